//! Reverse-mode differentiation over the operator set.
//!
//! A [`Tape`] belongs to one forward pass. Operations whose inputs all lack
//! gradient tracking are evaluated but not recorded, so inference through
//! constant parameters leaves the tape empty and frees intermediates as
//! soon as their [`Var`] handles drop.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{conv2d, conv2d_backward, conv2d_reference, ConvSpec};
use crate::error::{Result, TensorError};
use crate::ops;
use crate::{Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct NodeRef {
    tape: u64,
    index: usize,
}

/// A tensor value, optionally recorded on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<NodeRef>,
}

impl Var {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Detached copy of the value.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }

    /// Scalar content of a 1×1×1×1 value.
    pub fn item(&self) -> f64 {
        self.value.data()[0]
    }
}

type Id = Option<usize>;

enum Op {
    Leaf,
    Conv { x: Var, w: Var, bias: Id, spec: ConvSpec },
    PixelUnshuffle { x: Id, r: usize },
    PixelShuffle { x: Id, r: usize },
    Resize { x: Id, in_shape: Shape },
    LayerNorm { x: Var, gamma: Var, beta: Id, eps: f64 },
    GlobalPool { x: Id, in_shape: Shape },
    LocalPool { x: Id, kh: usize, kw: usize },
    SimpleGate { x: Var },
    Add { a: Id, b: Id },
    Sub { a: Id, b: Id },
    Mul { a: Var, b: Var },
    MulChannels { x: Var, s: Var },
    Concat { parts: Vec<(Id, usize)> },
    Scale { x: Id, k: f64 },
    Sum { x: Id, shape: Shape },
    MeanAbsDiff { a: Var, b: Var },
    Dot { x: Id, weights: Rc<Tensor> },
}

/// Gradient tape for one forward/backward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Op>,
    leaf_grads: HashMap<usize, Tensor>,
    instrumented: bool,
    multiplies: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            instrumented: false,
            multiplies: 0,
        }
    }

    /// A tape that evaluates convolutions with the naive reference kernel
    /// and counts every multiply performed.
    pub fn instrumented() -> Self {
        Self {
            instrumented: true,
            ..Self::new()
        }
    }

    /// Multiplies counted so far, when instrumented.
    pub fn multiplies(&self) -> Option<u64> {
        self.instrumented.then_some(self.multiplies)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(op);
        Var {
            value: Rc::new(value),
            node: Some(NodeRef { tape: self.id, index }),
        }
    }

    fn id_of(&self, v: &Var) -> Result<Id> {
        match v.node {
            None => Ok(None),
            Some(r) if r.tape == self.id => Ok(Some(r.index)),
            Some(_) => Err(TensorError::NotOnTape),
        }
    }

    fn emit(&mut self, value: Tensor, tracked: bool, op: impl FnOnce() -> Op) -> Var {
        if tracked {
            self.push(value, op())
        } else {
            Var::constant(value)
        }
    }

    pub fn conv2d(&mut self, x: &Var, w: &Var, bias: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
        let value = if self.instrumented {
            conv2d_reference(
                x.value(),
                w.value(),
                bias.map(|b| b.value()),
                spec,
                &mut self.multiplies,
            )?
        } else {
            conv2d(x.value(), w.value(), bias.map(|b| b.value()), spec)?
        };
        let bias_id = match bias {
            Some(b) => self.id_of(b)?,
            None => None,
        };
        let tracked = self.id_of(x)?.is_some() || self.id_of(w)?.is_some() || bias_id.is_some();
        Ok(self.emit(value, tracked, || Op::Conv {
            x: x.clone(),
            w: w.clone(),
            bias: bias_id,
            spec: *spec,
        }))
    }

    pub fn pixel_unshuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        let value = ops::pixel_unshuffle(x.value(), r)?;
        let id = self.id_of(x)?;
        Ok(self.emit(value, id.is_some(), || Op::PixelUnshuffle { x: id, r }))
    }

    pub fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        let value = ops::pixel_shuffle(x.value(), r)?;
        let id = self.id_of(x)?;
        Ok(self.emit(value, id.is_some(), || Op::PixelShuffle { x: id, r }))
    }

    pub fn resize(&mut self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = ops::bilinear_resize(x.value(), out_h, out_w, &mut self.multiplies)?;
        let id = self.id_of(x)?;
        let in_shape = x.shape();
        Ok(self.emit(value, id.is_some(), || Op::Resize { x: id, in_shape }))
    }

    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let value = ops::layer_norm(x.value(), gamma.value(), beta.value(), eps, &mut self.multiplies)?;
        let beta_id = self.id_of(beta)?;
        let tracked = self.id_of(x)?.is_some() || self.id_of(gamma)?.is_some() || beta_id.is_some();
        Ok(self.emit(value, tracked, || Op::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta_id,
            eps,
        }))
    }

    pub fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let value = ops::global_avg_pool(x.value(), &mut self.multiplies);
        let id = self.id_of(x)?;
        let in_shape = x.shape();
        Ok(self.emit(value, id.is_some(), || Op::GlobalPool { x: id, in_shape }))
    }

    pub fn local_avg_pool(&mut self, x: &Var, kh: usize, kw: usize) -> Result<Var> {
        let value = ops::local_avg_pool(x.value(), kh, kw, &mut self.multiplies)?;
        let id = self.id_of(x)?;
        Ok(self.emit(value, id.is_some(), || Op::LocalPool { x: id, kh, kw }))
    }

    pub fn simple_gate(&mut self, x: &Var) -> Result<Var> {
        let value = ops::simple_gate(x.value(), &mut self.multiplies)?;
        let tracked = self.id_of(x)?.is_some();
        Ok(self.emit(value, tracked, || Op::SimpleGate { x: x.clone() }))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().zip_map(b.value(), |x, y| x + y)?;
        let (ia, ib) = (self.id_of(a)?, self.id_of(b)?);
        Ok(self.emit(value, ia.is_some() || ib.is_some(), || Op::Add { a: ia, b: ib }))
    }

    /// Left-to-right sum of equally shaped values.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let (first, rest) = items.split_first().ok_or(TensorError::InvalidArgument {
            op: "add_all",
            msg: "empty input".into(),
        })?;
        let mut acc = first.clone();
        for v in rest {
            acc = self.add(&acc, v)?;
        }
        Ok(acc)
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().zip_map(b.value(), |x, y| x - y)?;
        let (ia, ib) = (self.id_of(a)?, self.id_of(b)?);
        Ok(self.emit(value, ia.is_some() || ib.is_some(), || Op::Sub { a: ia, b: ib }))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().zip_map(b.value(), |x, y| x * y)?;
        self.multiplies += value.numel() as u64;
        let tracked = self.id_of(a)?.is_some() || self.id_of(b)?.is_some();
        Ok(self.emit(value, tracked, || Op::Mul {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    /// `x ⊙ s` with `s` of shape (n, c, 1, 1) broadcast over space.
    pub fn mul_channels(&mut self, x: &Var, s: &Var) -> Result<Var> {
        let value = ops::mul_channels(x.value(), s.value(), &mut self.multiplies)?;
        let tracked = self.id_of(x)?.is_some() || self.id_of(s)?.is_some();
        Ok(self.emit(value, tracked, || Op::MulChannels {
            x: x.clone(),
            s: s.clone(),
        }))
    }

    pub fn concat(&mut self, items: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = items.iter().map(|v| v.value()).collect();
        let value = ops::concat_channels(&refs)?;
        let parts = items
            .iter()
            .map(|v| Ok((self.id_of(v)?, v.shape().c)))
            .collect::<Result<Vec<_>>>()?;
        let tracked = parts.iter().any(|(id, _)| id.is_some());
        Ok(self.emit(value, tracked, || Op::Concat { parts }))
    }

    pub fn scale(&mut self, x: &Var, k: f64) -> Result<Var> {
        let value = x.value().map(|v| v * k);
        self.multiplies += value.numel() as u64;
        let id = self.id_of(x)?;
        Ok(self.emit(value, id.is_some(), || Op::Scale { x: id, k }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        let value = Tensor::scalar(x.value().sum());
        let id = self.id_of(x)?;
        let shape = x.shape();
        Ok(self.emit(value, id.is_some(), || Op::Sum { x: id, shape }))
    }

    /// Mean absolute difference as a scalar.
    pub fn mean_abs_diff(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let n = a.value().numel() as f64;
        let total: f64 = a.value().zip_map(b.value(), |x, y| (x - y).abs())?.data().iter().sum();
        let tracked = self.id_of(a)?.is_some() || self.id_of(b)?.is_some();
        Ok(self.emit(Tensor::scalar(total / n), tracked, || Op::MeanAbsDiff {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    /// Σ x ⊙ weights as a scalar, with constant weights.
    pub fn dot(&mut self, x: &Var, weights: &Tensor) -> Result<Var> {
        let value = Tensor::scalar(x.value().zip_map(weights, |a, b| a * b)?.sum());
        let id = self.id_of(x)?;
        Ok(self.emit(value, id.is_some(), || Op::Dot {
            x: id,
            weights: Rc::new(weights.clone()),
        }))
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: &Var) -> Option<&Tensor> {
        let r = v.node?;
        if r.tape != self.id {
            return None;
        }
        self.leaf_grads.get(&r.index)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Propagate d(loss)/d(·) to every tracked leaf. Leaf gradients
    /// accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        if !loss.shape().is_scalar() {
            return Err(TensorError::NotScalar(loss.shape()));
        }
        let root = self.id_of(loss)?.ok_or(TensorError::NotOnTape)?;
        if !loss.value().is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::scalar(1.0));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i] {
                Op::Leaf => match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                },
                Op::Conv { x, w, bias, spec } => {
                    let (ix, iw) = (node_index(x), node_index(w));
                    let cg = conv2d_backward(
                        x.value(),
                        w.value(),
                        spec,
                        &g,
                        ix.is_some(),
                        iw.is_some(),
                        bias.is_some(),
                    );
                    accumulate(&mut grads, ix, cg.input)?;
                    accumulate(&mut grads, iw, cg.weight)?;
                    accumulate(&mut grads, *bias, cg.bias)?;
                }
                Op::PixelUnshuffle { x, r } => {
                    accumulate(&mut grads, *x, Some(ops::pixel_shuffle(&g, *r)?))?;
                }
                Op::PixelShuffle { x, r } => {
                    accumulate(&mut grads, *x, Some(ops::pixel_unshuffle(&g, *r)?))?;
                }
                Op::Resize { x, in_shape } => {
                    accumulate(&mut grads, *x, Some(ops::bilinear_resize_backward(&g, *in_shape)))?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let ng = ops::layer_norm_backward(x.value(), gamma.value(), *eps, &g);
                    accumulate(&mut grads, node_index(x), Some(ng.input))?;
                    accumulate(&mut grads, node_index(gamma), Some(ng.gamma))?;
                    accumulate(&mut grads, *beta, Some(ng.beta))?;
                }
                Op::GlobalPool { x, in_shape } => {
                    accumulate(&mut grads, *x, Some(ops::global_avg_pool_backward(&g, *in_shape)))?;
                }
                Op::LocalPool { x, kh, kw } => {
                    accumulate(&mut grads, *x, Some(ops::local_avg_pool_backward(&g, *kh, *kw)))?;
                }
                Op::SimpleGate { x } => {
                    accumulate(
                        &mut grads,
                        node_index(x),
                        Some(ops::simple_gate_backward(x.value(), &g)),
                    )?;
                }
                Op::Add { a, b } => {
                    if b.is_some() {
                        accumulate(&mut grads, *b, Some(g.clone()))?;
                    }
                    accumulate(&mut grads, *a, Some(g))?;
                }
                Op::Sub { a, b } => {
                    if b.is_some() {
                        accumulate(&mut grads, *b, Some(g.map(|v| -v)))?;
                    }
                    accumulate(&mut grads, *a, Some(g))?;
                }
                Op::Mul { a, b } => {
                    if let Some(ia) = node_index(a) {
                        accumulate(&mut grads, Some(ia), Some(g.zip_map(b.value(), |x, y| x * y)?))?;
                    }
                    if let Some(ib) = node_index(b) {
                        accumulate(&mut grads, Some(ib), Some(g.zip_map(a.value(), |x, y| x * y)?))?;
                    }
                }
                Op::MulChannels { x, s } => {
                    if let Some(ix) = node_index(x) {
                        accumulate(&mut grads, Some(ix), Some(ops::mul_channels(&g, s.value(), &mut 0)?))?;
                    }
                    if let Some(is) = node_index(s) {
                        let xs = x.shape();
                        let mut ds = Tensor::zeros(s.shape());
                        for n in 0..xs.n {
                            for c in 0..xs.c {
                                let v: f64 = g
                                    .plane(n, c)
                                    .iter()
                                    .zip(x.value().plane(n, c))
                                    .map(|(a, b)| a * b)
                                    .sum();
                                ds.set(n, c, 0, 0, v);
                            }
                        }
                        accumulate(&mut grads, Some(is), Some(ds))?;
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &(id, c) in parts {
                        if id.is_some() {
                            accumulate(&mut grads, id, Some(ops::slice_channels(&g, offset, c)))?;
                        }
                        offset += c;
                    }
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    accumulate(&mut grads, *x, Some(g.map(|v| v * k)))?;
                }
                Op::Sum { x, shape } => {
                    accumulate(&mut grads, *x, Some(Tensor::full(*shape, g.data()[0])))?;
                }
                Op::MeanAbsDiff { a, b } => {
                    let scale = g.data()[0] / a.value().numel() as f64;
                    let da = a.value().zip_map(b.value(), |x, y| sign(x - y) * scale)?;
                    if let Some(ib) = node_index(b) {
                        accumulate(&mut grads, Some(ib), Some(da.map(|v| -v)))?;
                    }
                    accumulate(&mut grads, node_index(a), Some(da))?;
                }
                Op::Dot { x, weights } => {
                    let k = g.data()[0];
                    accumulate(&mut grads, *x, Some(weights.map(|v| v * k)))?;
                }
            }
        }
        Ok(())
    }
}

fn node_index(v: &Var) -> Id {
    v.node.map(|r| r.index)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: Id, g: Option<Tensor>) -> Result<()> {
    let (Some(i), Some(g)) = (id, g) else {
        return Ok(());
    };
    match &mut grads[i] {
        Some(acc) => acc.axpy(1.0, &g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
