#![allow(dead_code)]

use mznet::{Ctx, Params};
use mznet_tensor::{ConvSpec, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_image(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
}

/// Direct cross-correlation sum, one output element at a time.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: &ConvSpec) -> Tensor {
    let xs = x.shape();
    let ho = (xs.h + 2 * s.padding.0 - s.dilation.0 * (s.kernel.0 - 1) - 1) / s.stride.0 + 1;
    let wo = (xs.w + 2 * s.padding.1 - s.dilation.1 * (s.kernel.1 - 1) - 1) / s.stride.1 + 1;
    let cin_g = s.in_channels / s.groups;
    let cout_g = s.out_channels / s.groups;
    Tensor::from_fn(Shape::new(xs.n, s.out_channels, ho, wo), |n, co, oh, ow| {
        let g = co / cout_g;
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin_g {
            for ki in 0..s.kernel.0 {
                for kj in 0..s.kernel.1 {
                    let ih = (oh * s.stride.0 + ki * s.dilation.0) as i64 - s.padding.0 as i64;
                    let iw = (ow * s.stride.1 + kj * s.dilation.1) as i64 - s.padding.1 as i64;
                    if ih < 0 || iw < 0 || ih >= xs.h as i64 || iw >= xs.w as i64 {
                        continue;
                    }
                    acc += w.at(co, ci, ki, kj) * x.at(n, g * cin_g + ci, ih as usize, iw as usize);
                }
            }
        }
        acc
    })
}

/// Conv oracle reading `path.weight` / `path.bias` from a parameter set.
pub fn conv_with(params: &Params, path: &str, x: &Tensor, spec: &ConvSpec) -> Tensor {
    let w = params.get(&format!("{path}.weight")).unwrap();
    let b = params.get(&format!("{path}.bias"));
    conv_oracle(x, w, b, spec)
}

/// Elementwise binary map.
pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, f).unwrap()
}

/// Spatial mean per (n, c), by loops.
pub fn pool_oracle(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let mut acc = 0.0;
        for i in 0..s.h {
            for j in 0..s.w {
                acc += x.at(n, c, i, j);
            }
        }
        acc / (s.h * s.w) as f64
    })
}

/// x scaled by a per-channel (n, c, 1, 1) tensor.
pub fn scale_channels(x: &Tensor, s: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |n, c, i, j| x.at(n, c, i, j) * s.at(n, c, 0, 0))
}

/// Untracked evaluation of `f` with `params` bound as constants.
pub fn eval(params: &Params, f: impl FnOnce(&mut Ctx) -> mznet::Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let bound = params.constants();
    let mut ctx = Ctx::new(&mut tape, &bound);
    f(&mut ctx).unwrap().to_tensor()
}

/// Depthwise kernel with a 1 at the centre tap of every channel.
pub fn delta_kernel(shape: Shape) -> Tensor {
    Tensor::from_fn(
        shape,
        |_, _, i, j| if i == shape.h / 2 && j == shape.w / 2 { 1.0 } else { 0.0 },
    )
}

/// 1×1 identity weight for a c→c pointwise conv.
pub fn identity_pointwise(c: usize) -> Tensor {
    Tensor::from_fn(Shape::new(c, c, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 })
}

pub fn set(params: &mut Params, path: &str, value: Tensor) {
    let slot = params.get_mut(path).unwrap_or_else(|| panic!("no parameter {path}"));
    assert_eq!(slot.shape(), value.shape(), "{path}");
    *slot = value;
}

pub fn zero(params: &mut Params, path: &str) {
    let s = params
        .get(path)
        .unwrap_or_else(|| panic!("no parameter {path}"))
        .shape();
    set(params, path, Tensor::zeros(s));
}

/// Local mean over the clamped kh×kw window around each position, by loops.
pub fn local_pool_oracle(x: &Tensor, kh: usize, kw: usize) -> Tensor {
    let s = x.shape();
    let (kh, kw) = (kh.min(s.h), kw.min(s.w));
    Tensor::from_fn(s, |n, c, i, j| {
        let i0 = (i as i64 - (kh / 2) as i64).clamp(0, (s.h - kh) as i64) as usize;
        let j0 = (j as i64 - (kw / 2) as i64).clamp(0, (s.w - kw) as i64) as usize;
        let mut acc = 0.0;
        for a in i0..i0 + kh {
            for b in j0..j0 + kw {
                acc += x.at(n, c, a, b);
            }
        }
        acc / (kh * kw) as f64
    })
}

/// PSNR over every element, by loops.
pub fn psnr_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let mut acc = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    let d = a.at(n, c, i, j) - b.at(n, c, i, j);
                    acc += d * d;
                    count += 1;
                }
            }
        }
    }
    -10.0 * (acc / count as f64).log10()
}

/// Independent SSIM: a 2-D Gaussian weight table and explicit sums over
/// every valid 11×11 window.
pub fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let sigma: f64 = 1.5;
    let mut weights = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (u, row) in weights.iter_mut().enumerate() {
        for (v, w) in row.iter_mut().enumerate() {
            let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
            *w = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
            total += *w;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut sum = 0.0;
    let mut windows = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..=s.h - 11 {
                for j in 0..=s.w - 11 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for (u, row) in weights.iter().enumerate() {
                        for (v, wt) in row.iter().enumerate() {
                            let w = wt / total;
                            ma += w * a.at(n, c, i + u, j + v);
                            mb += w * b.at(n, c, i + u, j + v);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for (u, row) in weights.iter().enumerate() {
                        for (v, wt) in row.iter().enumerate() {
                            let w = wt / total;
                            let (x, y) = (a.at(n, c, i + u, j + v) - ma, b.at(n, c, i + u, j + v) - mb);
                            va += w * x * x;
                            vb += w * y * y;
                            cov += w * x * y;
                        }
                    }
                    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    windows += 1;
                }
            }
        }
    }
    sum / windows as f64
}
