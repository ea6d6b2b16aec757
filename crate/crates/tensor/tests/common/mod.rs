#![allow(dead_code)]

use mznet_tensor::{Result, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// |a − n| / max(|a|, |n|, floor)
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare tape gradients of `f` against central differences (step 1e-5)
/// at up to `per_input` random coordinates of every input. Returns the
/// worst relative error.
pub fn check_grads(
    inputs: &[Tensor],
    per_input: usize,
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(&loss).unwrap();
    let eval = |ts: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|t| Var::constant(t.clone())).collect();
        f(&mut t, &vs).unwrap().item()
    };
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = tape.grad(&vars[k]).unwrap_or(&zeros).clone();
        for _ in 0..per_input.min(input.numel()) {
            let i = r.gen_range(0..input.numel());
            let h = 1e-5;
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}
