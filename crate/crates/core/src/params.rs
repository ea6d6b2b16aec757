//! Named parameter storage and the context blocks evaluate in.

use std::collections::{BTreeMap, HashMap};

use mznet_tensor::{ConvSpec, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Layer-norm epsilon used by every block.
pub const NORM_EPS: f64 = 1e-6;

/// Every learnable tensor of a network, keyed by a dotted path such as
/// `enc1.block0.mdcm.branch2.weight`. Iteration order is the path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; a path may be registered only once.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.map.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        self.map.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.map.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Sets every tensor whose path starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hits = 0;
        for (k, v) in self.map.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().iter_mut().for_each(|x| *x = 0.0);
                hits += 1;
            }
        }
        hits
    }

    /// Registers every tensor as a gradient-tracked leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.map
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        )
    }

    /// Wraps every tensor as an untracked constant (inference).
    pub fn constants(&self) -> Bound {
        Bound(
            self.map
                .iter()
                .map(|(k, v)| (k.clone(), Var::constant(v.clone())))
                .collect(),
        )
    }
}

/// Parameters bound to a tape (or as constants) for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound(HashMap<String, Var>);

impl Bound {
    pub fn get(&self, path: &str) -> Result<&Var> {
        self.0.get(path).ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Seeded initializer that collects parameters as blocks register them.
///
/// Weights are drawn from U(−1/√fan_in, 1/√fan_in); biases use the same
/// bound. Norm scales start at one and offsets at zero.
pub struct ParamInit {
    rng: ChaCha8Rng,
    params: Params,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Params::new(),
        }
    }

    fn uniform(&mut self, shape: Shape, bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound))
    }

    pub fn conv(&mut self, path: &str, spec: &ConvSpec) -> Result<()> {
        let fan_in = (spec.in_channels / spec.groups) * spec.kernel.0 * spec.kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(spec.weight_shape(), bound);
        self.params.insert(format!("{path}.weight"), w)?;
        if spec.has_bias {
            let b = self.uniform(Shape::vector(spec.out_channels), bound);
            self.params.insert(format!("{path}.bias"), b)?;
        }
        Ok(())
    }

    /// A convolution whose weight and bias start at exactly zero.
    pub fn conv_zero(&mut self, path: &str, spec: &ConvSpec) -> Result<()> {
        self.params
            .insert(format!("{path}.weight"), Tensor::zeros(spec.weight_shape()))?;
        if spec.has_bias {
            self.params
                .insert(format!("{path}.bias"), Tensor::zeros(Shape::vector(spec.out_channels)))?;
        }
        Ok(())
    }

    pub fn norm(&mut self, path: &str, channels: usize) -> Result<()> {
        self.params
            .insert(format!("{path}.gamma"), Tensor::full(Shape::vector(channels), 1.0))?;
        self.params
            .insert(format!("{path}.beta"), Tensor::zeros(Shape::vector(channels)))
    }

    pub fn zeros(&mut self, path: &str, shape: Shape) -> Result<()> {
        self.params.insert(path, Tensor::zeros(shape))
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

/// How channel attention summarizes a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Mean over the whole map.
    Global,
    /// Mean over a window given in pixels of an `image`-sized input,
    /// scaled to each feature map's resolution.
    Local {
        window: (usize, usize),
        image: (usize, usize),
    },
}

/// Evaluation context shared by all blocks of one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    params: &'a Bound,
    pub pooling: Pooling,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a Bound) -> Self {
        Self {
            tape,
            params,
            pooling: Pooling::Global,
        }
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn param(&self, path: &str) -> Result<Var> {
        self.params.get(path).cloned()
    }

    pub fn conv(&mut self, path: &str, x: &Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{path}.weight"))?;
        let b = if spec.has_bias {
            Some(self.param(&format!("{path}.bias"))?)
        } else {
            None
        };
        Ok(self.tape.conv2d(x, &w, b.as_ref(), spec)?)
    }

    pub fn norm(&mut self, path: &str, x: &Var) -> Result<Var> {
        let g = self.param(&format!("{path}.gamma"))?;
        let b = self.param(&format!("{path}.beta"))?;
        Ok(self.tape.layer_norm(x, &g, &b, NORM_EPS)?)
    }

    /// Pooling window for a feature map of size (h, w), or `None` when the
    /// map should be pooled globally.
    pub fn pool_window(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self.pooling {
            Pooling::Global => None,
            Pooling::Local { window, image } => {
                let kh = (window.0 * h / image.0.max(1)).max(1);
                let kw = (window.1 * w / image.1.max(1)).max(1);
                if kh >= h && kw >= w {
                    None
                } else {
                    Some((kh.min(h), kw.min(w)))
                }
            }
        }
    }
}
