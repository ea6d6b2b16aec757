//! Training objective: L1 plus a frozen random-feature perceptual term,
//! summed over the supervised output scales.

use mznet_tensor::{ConvSpec, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Output channels of the five proxy layers (after gating).
pub const PROXY_CHANNELS: [usize; 5] = [16, 32, 64, 64, 64];
/// Layers whose features enter the distance.
pub const PROXY_COMPARED: usize = 3;

/// Epsilon of the parameter-free channel normalization before each gate.
const PROXY_NORM_EPS: f64 = 1e-6;

/// Seed-initialized strided conv pyramid. Each conv output is normalized
/// across channels at every position before its SimpleGate, which keeps
/// the gated products near unit scale at any depth. Weights never train.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    seed: u64,
    layers: Vec<ProxyLayer>,
}

#[derive(Clone, Debug)]
struct ProxyLayer {
    spec: ConvSpec,
    weight: Var,
    bias: Var,
    gamma: Var,
    beta: Var,
}

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for &c in &PROXY_CHANNELS {
            let spec = ConvSpec::new(cin, 2 * c, (3, 3))
                .with_stride((2, 2))
                .with_padding((1, 1))
                .with_bias(true);
            let fan_in = (cin * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let ws = spec.weight_shape();
            let w = Tensor::from_fn(ws, |_, _, _, _| rng.gen_range(-bound..bound));
            let b = Tensor::from_fn(Shape::new(1, 2 * c, 1, 1), |_, _, _, _| rng.gen_range(-0.1..0.1));
            layers.push(ProxyLayer {
                spec,
                weight: Var::constant(w),
                bias: Var::constant(b),
                gamma: Var::constant(Tensor::full(Shape::vector(2 * c), 1.0)),
                beta: Var::constant(Tensor::zeros(Shape::vector(2 * c))),
            });
            cin = c;
        }
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Features of the last [`PROXY_COMPARED`] layers.
    pub fn features(&self, tape: &mut Tape, x: &Var) -> Result<Vec<Var>> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            h = tape.conv2d(&h, &l.weight, Some(&l.bias), &l.spec)?;
            h = tape.layer_norm(&h, &l.gamma, &l.beta, PROXY_NORM_EPS)?;
            h = tape.simple_gate(&h)?;
            if i + PROXY_COMPARED >= self.layers.len() {
                out.push(h.clone());
            }
        }
        Ok(out)
    }

    /// Σ over compared layers of the mean absolute feature difference.
    pub fn distance(&self, tape: &mut Tape, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::Config(format!(
                "perceptual inputs differ in shape: {} vs {}",
                a.shape(),
                b.shape()
            )));
        }
        let fa = self.features(tape, a)?;
        let fb = self.features(tape, b)?;
        let terms = fa
            .iter()
            .zip(&fb)
            .map(|(x, y)| tape.mean_abs_diff(x, y))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.add_all(&terms)?)
    }
}

/// Scalar loss with its per-term values for logging.
pub struct LossParts {
    pub total: Var,
    pub l1: f64,
    pub perceptual: f64,
}

/// Ground truth bilinearly resized to each prediction's scale.
pub fn scale_targets(gt: &Tensor, preds: &[Var]) -> Result<Vec<Tensor>> {
    let mut sink = 0;
    preds
        .iter()
        .map(|p| {
            let s = p.shape();
            Ok(mznet_tensor::ops::bilinear_resize(gt, s.h, s.w, &mut sink)?)
        })
        .collect()
}

/// Σ_s w_s·(L1(pred_s, target_s) + λ·proxy(pred_s, target_s)).
/// The proxy is skipped when λ = 0.
pub fn supervised_loss(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[Tensor],
    weights: &[f64],
    lambda: f64,
    proxy: &PerceptualProxy,
) -> Result<LossParts> {
    if preds.len() != targets.len() || preds.len() > weights.len() {
        return Err(Error::Config(format!(
            "{} predictions, {} targets, {} weights",
            preds.len(),
            targets.len(),
            weights.len()
        )));
    }
    let mut terms = Vec::new();
    let (mut l1_sum, mut perc_sum) = (0.0, 0.0);
    for ((p, t), &w) in preds.iter().zip(targets).zip(weights) {
        if p.shape() != t.shape() {
            return Err(Error::Config(format!(
                "prediction {} does not match target {}",
                p.shape(),
                t.shape()
            )));
        }
        let t = Var::constant(t.clone());
        let l1 = tape.mean_abs_diff(p, &t)?;
        l1_sum += w * l1.item();
        let mut term = l1;
        if lambda != 0.0 {
            let d = proxy.distance(tape, p, &t)?;
            perc_sum += w * d.item();
            let d = tape.scale(&d, lambda)?;
            term = tape.add(&term, &d)?;
        }
        terms.push(tape.scale(&term, w)?);
    }
    Ok(LossParts {
        total: tape.add_all(&terms)?,
        l1: l1_sum,
        perceptual: perc_sum,
    })
}

/// Deep-supervised loss against a full-scale ground truth.
pub fn loss_total(
    tape: &mut Tape,
    preds: &[Var],
    gt: &Tensor,
    weights: &[f64],
    lambda: f64,
    proxy: &PerceptualProxy,
) -> Result<LossParts> {
    let targets = scale_targets(gt, preds)?;
    supervised_loss(tape, preds, &targets, weights, lambda, proxy)
}
