//! Forward and backward kernels for the non-convolution operators.
//!
//! Kernels that multiply add the number of products they evaluate to a
//! caller-supplied counter; the tape sums these in instrumented mode.

use crate::error::{Result, TensorError};
use crate::{Shape, Tensor};

/// Space-to-depth: (n, c, h, w) → (n, c·r², h/r, w/r).
///
/// Output channel `c·r² + i·r + j` holds the pixels at row offset `i`, column
/// offset `j` of every r×r block of input channel `c`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(TensorError::IndivisibleSpatial {
            op: "pixel_unshuffle",
            h: s.h,
            w: s.w,
            factor: r,
        });
    }
    let os = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let oc = c * r * r + i * r + j;
                    for oh in 0..os.h {
                        for ow in 0..os.w {
                            out.set(n, oc, oh, ow, x.at(n, c, oh * r + i, ow * r + j));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depth-to-space, the exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(TensorError::IndivisibleChannels {
            op: "pixel_shuffle",
            channels: s.c,
            divisor: r * r,
        });
    }
    let os = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..os.c {
            for i in 0..r {
                for j in 0..r {
                    let ic = c * r * r + i * r + j;
                    for ih in 0..s.h {
                        for iw in 0..s.w {
                            out.set(n, c, ih * r + i, iw * r + j, x.at(n, ic, ih, iw));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-axis sampling table: (lower index, upper index, upper weight).
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (align-corners false), edge clamped.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize, mults: &mut u64) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_resize",
            msg: format!("cannot resize {}x{} to {out_h}x{out_w}", s.h, s.w),
        });
    }
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
                    let bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
                    dst[oy * out_w + ox] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
    }
    *mults += 6 * os.numel() as u64;
    Ok(out)
}

pub fn bilinear_resize_backward(grad_out: &Tensor, in_shape: Shape) -> Tensor {
    let os = grad_out.shape();
    if (os.h, os.w) == (in_shape.h, in_shape.w) {
        return grad_out.clone();
    }
    let ty = bilinear_taps(in_shape.h, os.h);
    let tx = bilinear_taps(in_shape.w, os.w);
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..os.n {
        for c in 0..os.c {
            let g = grad_out.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = g[oy * os.w + ox];
                    let top = (1.0 - fy) * v;
                    let bot = fy * v;
                    dst[y0 * in_shape.w + x0] += (1.0 - fx) * top;
                    dst[y0 * in_shape.w + x1] += fx * top;
                    dst[y1 * in_shape.w + x0] += (1.0 - fx) * bot;
                    dst[y1 * in_shape.w + x1] += fx * bot;
                }
            }
        }
    }
    dx
}

/// Per-position channel statistics: (mean, 1/√(var+eps)) for each (n, h, w).
fn channel_stats(x: &Tensor, eps: f64, mults: &mut u64) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let p = s.plane();
    let inv_c = 1.0 / s.c as f64;
    let mut mean = vec![0.0; s.n * p];
    let mut rstd = vec![0.0; s.n * p];
    for n in 0..s.n {
        let m = &mut mean[n * p..(n + 1) * p];
        for c in 0..s.c {
            for (m, &v) in m.iter_mut().zip(x.plane(n, c)) {
                *m += v;
            }
        }
        m.iter_mut().for_each(|m| *m *= inv_c);
        let r = &mut rstd[n * p..(n + 1) * p];
        for c in 0..s.c {
            for ((r, &v), &m) in r.iter_mut().zip(x.plane(n, c)).zip(m.iter()) {
                let d = v - m;
                *r += d * d;
            }
        }
        r.iter_mut().for_each(|r| *r = 1.0 / (*r * inv_c + eps).sqrt());
    }
    *mults += (s.n * p * (s.c + 2)) as u64;
    (mean, rstd)
}

fn check_norm_args(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    let c = x.shape().c;
    if c == 0 {
        return Err(TensorError::InvalidArgument {
            op: "layer_norm",
            msg: "zero-length channel axis".into(),
        });
    }
    for t in [gamma, beta] {
        if t.shape() != Shape::vector(c) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape(),
                rhs: Shape::vector(c),
            });
        }
    }
    Ok(())
}

/// Channel-axis layer normalisation at every spatial position:
/// `y[n,:,h,w] = γ ⊙ (x − mean_c)/√(var_c + eps) + β`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, mults: &mut u64) -> Result<Tensor> {
    check_norm_args(x, gamma, beta)?;
    let s = x.shape();
    let p = s.plane();
    let (mean, rstd) = channel_stats(x, eps, mults);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let m = &mean[n * p..(n + 1) * p];
        let r = &rstd[n * p..(n + 1) * p];
        for c in 0..s.c {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..p {
                dst[i] = (src[i] - m[i]) * r[i] * g + b;
            }
        }
    }
    *mults += 2 * s.numel() as u64;
    Ok(out)
}

pub struct NormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn layer_norm_backward(x: &Tensor, gamma: &Tensor, eps: f64, grad_out: &Tensor) -> NormGrads {
    let s = x.shape();
    let p = s.plane();
    let (mean, rstd) = channel_stats(x, eps, &mut 0);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::vector(s.c));
    let mut dbeta = Tensor::zeros(Shape::vector(s.c));
    let inv_c = 1.0 / s.c as f64;
    let mut sum_g = vec![0.0; p];
    let mut sum_gx = vec![0.0; p];
    for n in 0..s.n {
        let m = &mean[n * p..(n + 1) * p];
        let r = &rstd[n * p..(n + 1) * p];
        sum_g.fill(0.0);
        sum_gx.fill(0.0);
        for c in 0..s.c {
            let gm = gamma.data()[c];
            let (src, dy) = (x.plane(n, c), grad_out.plane(n, c));
            let (mut dg, mut db) = (0.0, 0.0);
            for i in 0..p {
                let xhat = (src[i] - m[i]) * r[i];
                dg += dy[i] * xhat;
                db += dy[i];
                let g = dy[i] * gm;
                sum_g[i] += g;
                sum_gx[i] += g * xhat;
            }
            dgamma.data_mut()[c] += dg;
            dbeta.data_mut()[c] += db;
        }
        for c in 0..s.c {
            let gm = gamma.data()[c];
            let (src, dy) = (x.plane(n, c), grad_out.plane(n, c));
            let dst = dx.plane_mut(n, c);
            for i in 0..p {
                let xhat = (src[i] - m[i]) * r[i];
                dst[i] = r[i] * (dy[i] * gm - inv_c * sum_g[i] - xhat * inv_c * sum_gx[i]);
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Spatial mean per (n, c): output shape (n, c, 1, 1).
pub fn global_avg_pool(x: &Tensor, mults: &mut u64) -> Tensor {
    let s = x.shape();
    let inv = 1.0 / s.plane() as f64;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            out.set(n, c, 0, 0, x.plane(n, c).iter().sum::<f64>() * inv);
        }
    }
    *mults += (s.n * s.c) as u64;
    out
}

pub fn global_avg_pool_backward(grad_out: &Tensor, in_shape: Shape) -> Tensor {
    let inv = 1.0 / in_shape.plane() as f64;
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let g = grad_out.at(n, c, 0, 0) * inv;
            dx.plane_mut(n, c).fill(g);
        }
    }
    dx
}

/// Start of the length-`k` window for output `i`, centred and shifted to stay inside `len`.
#[inline]
fn window_start(i: usize, k: usize, len: usize) -> usize {
    (i as isize - (k / 2) as isize).clamp(0, (len - k) as isize) as usize
}

/// Local mean over a kh×kw window clamped inside the feature map; windows
/// larger than the map are truncated to it. Output keeps the input shape.
pub fn local_avg_pool(x: &Tensor, kh: usize, kw: usize, mults: &mut u64) -> Result<Tensor> {
    if kh == 0 || kw == 0 {
        return Err(TensorError::InvalidArgument {
            op: "local_avg_pool",
            msg: "window must be positive".into(),
        });
    }
    let s = x.shape();
    let (kh, kw) = (kh.min(s.h), kw.min(s.w));
    let inv = 1.0 / (kh * kw) as f64;
    let mut out = Tensor::zeros(s);
    let mut rows = vec![0.0; s.plane()];
    let mut prefix = vec![0.0; s.h.max(s.w) + 1];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            // horizontal box sums
            for h in 0..s.h {
                let row = &src[h * s.w..(h + 1) * s.w];
                for (i, v) in row.iter().enumerate() {
                    prefix[i + 1] = prefix[i] + v;
                }
                for w in 0..s.w {
                    let a = window_start(w, kw, s.w);
                    rows[h * s.w + w] = prefix[a + kw] - prefix[a];
                }
            }
            let dst = out.plane_mut(n, c);
            for w in 0..s.w {
                for h in 0..s.h {
                    prefix[h + 1] = prefix[h] + rows[h * s.w + w];
                }
                for h in 0..s.h {
                    let a = window_start(h, kh, s.h);
                    dst[h * s.w + w] = (prefix[a + kh] - prefix[a]) * inv;
                }
            }
        }
    }
    *mults += s.numel() as u64;
    Ok(out)
}

pub fn local_avg_pool_backward(grad_out: &Tensor, kh: usize, kw: usize) -> Tensor {
    let s = grad_out.shape();
    let (kh, kw) = (kh.min(s.h), kw.min(s.w));
    let inv = 1.0 / (kh * kw) as f64;
    let mut dx = Tensor::zeros(s);
    let mut cols = vec![0.0; s.plane()];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            cols.fill(0.0);
            for h in 0..s.h {
                let a = window_start(h, kh, s.h);
                for hh in a..a + kh {
                    for w in 0..s.w {
                        cols[hh * s.w + w] += g[h * s.w + w] * inv;
                    }
                }
            }
            let dst = dx.plane_mut(n, c);
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = cols[h * s.w + w];
                    let a = window_start(w, kw, s.w);
                    for ww in a..a + kw {
                        dst[h * s.w + ww] += v;
                    }
                }
            }
        }
    }
    dx
}

/// Split channels into halves and multiply them: (n, 2c, h, w) → (n, c, h, w).
pub fn simple_gate(x: &Tensor, mults: &mut u64) -> Result<Tensor> {
    let s = x.shape();
    if !s.c.is_multiple_of(2) {
        return Err(TensorError::IndivisibleChannels {
            op: "simple_gate",
            channels: s.c,
            divisor: 2,
        });
    }
    let half = s.c / 2;
    let os = Shape::new(s.n, half, s.h, s.w);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..half {
            let a = x.plane(n, c);
            let b = x.plane(n, c + half);
            for ((o, &a), &b) in out.plane_mut(n, c).iter_mut().zip(a).zip(b) {
                *o = a * b;
            }
        }
    }
    *mults += os.numel() as u64;
    Ok(out)
}

pub fn simple_gate_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let s = x.shape();
    let half = s.c / 2;
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..half {
            let g = grad_out.plane(n, c);
            let a = x.plane(n, c).to_vec();
            let b = x.plane(n, c + half).to_vec();
            for ((d, &g), &b) in dx.plane_mut(n, c).iter_mut().zip(g).zip(&b) {
                *d = g * b;
            }
            for ((d, &g), &a) in dx.plane_mut(n, c + half).iter_mut().zip(g).zip(&a) {
                *d = g * a;
            }
        }
    }
    dx
}

/// `x ⊙ s` where `s` has shape (n, c, 1, 1).
pub fn mul_channels(x: &Tensor, s: &Tensor, mults: &mut u64) -> Result<Tensor> {
    let xs = x.shape();
    if s.shape() != Shape::new(xs.n, xs.c, 1, 1) {
        return Err(TensorError::ShapeMismatch {
            op: "mul_channels",
            lhs: xs,
            rhs: s.shape(),
        });
    }
    let mut out = x.clone();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let k = s.at(n, c, 0, 0);
            out.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
        }
    }
    *mults += xs.numel() as u64;
    Ok(out)
}

/// Concatenate along the channel axis.
pub fn concat_channels(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or(TensorError::InvalidArgument {
        op: "concat",
        msg: "empty input".into(),
    })?;
    let s0 = first.shape();
    let mut c_total = 0;
    for t in items {
        let s = t.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: s0,
                rhs: s,
            });
        }
        c_total += s.c;
    }
    let os = Shape::new(s0.n, c_total, s0.h, s0.w);
    let mut out = Tensor::zeros(os);
    let p = s0.plane();
    for n in 0..s0.n {
        let mut offset = 0;
        for t in items {
            let c = t.shape().c;
            let src = &t.data()[n * c * p..(n + 1) * c * p];
            let start = (n * c_total + offset) * p;
            out.data_mut()[start..start + c * p].copy_from_slice(src);
            offset += c;
        }
    }
    Ok(out)
}

/// Channels `[start, start+len)` of every sample.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Tensor {
    let s = x.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, len, s.h, s.w));
    for n in 0..s.n {
        let src = &x.data()[(n * s.c + start) * p..(n * s.c + start + len) * p];
        out.data_mut()[n * len * p..(n + 1) * len * p].copy_from_slice(src);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn unshuffle_orders_block_row_major() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = pixel_shuffle(&y, 2).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn shuffle_shape_law_and_errors() {
        let x = Tensor::zeros(Shape::new(2, 8, 3, 5));
        assert_eq!(pixel_shuffle(&x, 2).unwrap().shape(), Shape::new(2, 2, 6, 10));
        assert!(pixel_shuffle(&Tensor::zeros(Shape::new(1, 6, 2, 2)), 2).is_err());
        assert!(pixel_unshuffle(&Tensor::zeros(Shape::new(1, 1, 3, 4)), 2).is_err());
    }

    #[test]
    fn unshuffle_768_gives_384() {
        let x = Tensor::zeros(Shape::new(1, 3, 768, 768));
        assert_eq!(pixel_unshuffle(&x, 2).unwrap().shape(), Shape::new(1, 12, 384, 384));
    }

    #[test]
    fn resize_two_to_four() {
        let x = t(Shape::new(1, 1, 1, 2), &[0.0, 1.0]);
        let y = bilinear_resize(&x, 1, 4, &mut 0).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::from_fn(Shape::new(1, 2, 5, 3), |_, c, h, w| (c * 7 + h * 3 + w) as f64 * 0.1);
        let mut m = 0;
        assert_eq!(bilinear_resize(&x, 5, 3, &mut m).unwrap(), x);
        assert_eq!(m, 0);
        let k = Tensor::full(Shape::new(1, 1, 6, 4), 0.37);
        for (h, w) in [(3, 2), (12, 8), (5, 7), (1, 1)] {
            let y = bilinear_resize(&k, h, w, &mut 0).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn layer_norm_two_channels() {
        let x = t(Shape::new(1, 2, 1, 1), &[1.0, 3.0]);
        let g = Tensor::full(Shape::vector(2), 1.0);
        let b = Tensor::zeros(Shape::vector(2));
        let y = layer_norm(&x, &g, &b, 0.0, &mut 0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_constant_gives_beta() {
        let x = Tensor::full(Shape::new(2, 3, 2, 2), 4.2);
        let g = t(Shape::vector(3), &[0.5, 2.0, -1.0]);
        let b = t(Shape::vector(3), &[0.1, -0.2, 0.3]);
        let y = layer_norm(&x, &g, &b, 1e-6, &mut 0).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                assert!(y.plane(n, c).iter().all(|&v| v == b.data()[c]));
            }
        }
    }

    #[test]
    fn pools() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x, &mut 0).data(), &[2.5]);
        let full = local_avg_pool(&x, 5, 5, &mut 0).unwrap();
        assert!(full.data().iter().all(|&v| v == 2.5));
        let one = local_avg_pool(&x, 1, 1, &mut 0).unwrap();
        assert_eq!(one, x);
    }

    #[test]
    fn gate_multiplies_halves() {
        let x = t(Shape::new(1, 2, 1, 1), &[2.0, 3.0]);
        assert_eq!(simple_gate(&x, &mut 0).unwrap().data(), &[6.0]);
        assert!(simple_gate(&Tensor::zeros(Shape::new(1, 3, 1, 1)), &mut 0).is_err());
    }

    #[test]
    fn concat_then_slice() {
        let a = Tensor::from_fn(Shape::new(2, 2, 2, 2), |n, c, h, w| (n + c + h + w) as f64);
        let b = Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| -((n * c + h * w) as f64));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape().c, 5);
        assert_eq!(slice_channels(&cat, 0, 2), a);
        assert_eq!(slice_channels(&cat, 2, 3), b);
    }
}
