//! Synthetic moiré pairs, controlled misalignment and translation-only
//! re-alignment.
//!
//! A clean image is shown on a simulated stripe display and captured by a
//! simulated Bayer camera: upsample ×4, multiply by an RGB stripe mask
//! seen through a small homography, blur, sample through an RGGB mosaic
//! every `cfa_stride` supersampled pixels, demosaic bilinearly, apply a
//! per-channel gain, resize back and clamp. The mask alone is warped, so
//! the moiré image stays pixel-aligned with its clean source.

use mznet_tensor::ops::bilinear_resize;
use mznet_tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::reflect_index;

/// Supersampling factor of the display simulation.
pub const SUPERSAMPLE: usize = 4;
/// Largest offset accepted by misalignment and alignment search.
pub const MAX_OFFSET: f64 = 16.0;
/// Correlation shortfall below which a match counts as exact.
const EXACT_MATCH: f64 = 1e-9;
/// Pre-smoothing applied to both images before alignment. It suppresses
/// the near-Nyquist stripe and mosaic texture that subpixel resampling
/// attenuates in only one of the two images.
pub const ALIGN_SMOOTH_SIGMA: f64 = 1.5;

/// Parameters of one simulated capture.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    /// Width of one colored subpixel stripe, in supersampled pixels (2–6).
    pub display_period: f64,
    /// Display rotation relative to the sensor, degrees (−15..15).
    pub rotation_deg: f64,
    /// Projective terms of the display homography, per unit of
    /// normalized image coordinate (each within ±0.1).
    pub perspective: (f64, f64),
    /// Optical blur σ in output-image pixels (0.3–1.5).
    pub blur_sigma: f64,
    /// Sensor pitch in supersampled pixels (1–3).
    pub cfa_stride: usize,
    /// Per-channel gain (each within 0.5–1.5).
    pub color_gain: [f64; 3],
    pub misalign: Option<(f64, f64)>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if !(2.0..=6.0).contains(&self.display_period) {
            return bad(format!("display_period {} outside 2..6", self.display_period));
        }
        if self.rotation_deg.abs() > 15.0 {
            return bad(format!("rotation {} outside -15..15 degrees", self.rotation_deg));
        }
        if self.perspective.0.abs() > 0.1 || self.perspective.1.abs() > 0.1 {
            return bad(format!("perspective {:?} outside +-0.1", self.perspective));
        }
        if !(0.3..=1.5).contains(&self.blur_sigma) {
            return bad(format!("blur_sigma {} outside 0.3..1.5", self.blur_sigma));
        }
        if !(1..=3).contains(&self.cfa_stride) {
            return bad(format!("cfa_stride {} outside 1..3", self.cfa_stride));
        }
        if self.color_gain.iter().any(|g| !(0.5..=1.5).contains(g)) {
            return bad(format!("color_gain {:?} outside 0.5..1.5", self.color_gain));
        }
        if let Some((dx, dy)) = self.misalign {
            check_offset(dx, dy)?;
        }
        Ok(())
    }
}

fn check_offset(dx: f64, dy: f64) -> Result<()> {
    if !(dx.abs() <= MAX_OFFSET && dy.abs() <= MAX_OFFSET) {
        return Err(Error::Spec(format!("offset ({dx}, {dy}) exceeds {MAX_OFFSET} pixels")));
    }
    Ok(())
}

/// Ranges [`SynthSpec`]s are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRanges {
    pub period: (f64, f64),
    pub rotation_max_deg: f64,
    pub perspective_max: f64,
    pub blur: (f64, f64),
    pub cfa_stride: (usize, usize),
    pub gain_max_dev: f64,
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self {
            period: (2.0, 6.0),
            rotation_max_deg: 15.0,
            perspective_max: 0.05,
            blur: (0.3, 1.5),
            cfa_stride: (1, 3),
            gain_max_dev: 0.08,
        }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<()> {
        let probe = |period, rot, p, blur, stride, dev: f64| SynthSpec {
            seed: 0,
            display_period: period,
            rotation_deg: rot,
            perspective: (p, p),
            blur_sigma: blur,
            cfa_stride: stride,
            color_gain: [1.0 + dev; 3],
            misalign: None,
        };
        if self.period.0 > self.period.1 || self.blur.0 > self.blur.1 || self.cfa_stride.0 > self.cfa_stride.1 {
            return Err(Error::Spec("range minimum exceeds maximum".into()));
        }
        probe(
            self.period.0,
            self.rotation_max_deg,
            self.perspective_max,
            self.blur.0,
            self.cfa_stride.0,
            self.gain_max_dev,
        )
        .validate()?;
        probe(
            self.period.1,
            -self.rotation_max_deg,
            -self.perspective_max,
            self.blur.1,
            self.cfa_stride.1,
            -self.gain_max_dev,
        )
        .validate()
    }

    /// Draws a spec; the seed fully determines the result.
    pub fn sample(&self, seed: u64) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let display_period = uniform(self.period.0, self.period.1);
        let rotation_deg = uniform(-self.rotation_max_deg, self.rotation_max_deg);
        let perspective = (
            uniform(-self.perspective_max, self.perspective_max),
            uniform(-self.perspective_max, self.perspective_max),
        );
        let blur_sigma = uniform(self.blur.0, self.blur.1);
        let d = self.gain_max_dev;
        let color_gain = [
            uniform(1.0 - d, 1.0 + d),
            uniform(1.0 - d, 1.0 + d),
            uniform(1.0 - d, 1.0 + d),
        ];
        let cfa_stride = rng.gen_range(self.cfa_stride.0..=self.cfa_stride.1);
        SynthSpec {
            seed,
            display_period,
            rotation_deg,
            perspective,
            blur_sigma,
            cfa_stride,
            color_gain,
            misalign: None,
        }
    }
}

/// A (moiré, clean) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub moire: Tensor,
    pub clean: Tensor,
    pub spec: SynthSpec,
    /// Translation applied to `moire` after synthesis, if any.
    pub true_offset: Option<(f64, f64)>,
}

fn check_image(img: &Tensor, min: usize) -> Result<()> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 || s.h < min || s.w < min {
        return Err(Error::Spec(format!(
            "expected a 1x3xHxW image with sides >= {min}, got {s}"
        )));
    }
    Ok(())
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Tensor {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    let mut row = vec![0.0; s.h * s.w];
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    let mut acc = 0.0;
                    for (t, k) in taps.iter().enumerate() {
                        let jj = reflect_index(j as isize + t as isize - r, s.w);
                        acc += k * p[i * s.w + jj];
                    }
                    row[i * s.w + j] = acc;
                }
            }
            let o = out.plane_mut(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    let mut acc = 0.0;
                    for (t, k) in taps.iter().enumerate() {
                        let ii = reflect_index(i as isize + t as isize - r, s.h);
                        acc += k * row[ii * s.w + j];
                    }
                    o[i * s.w + j] = acc;
                }
            }
        }
    }
    out
}

/// Channel (0 = R, 1 = G, 2 = B) an RGGB sensor site records.
fn bayer_channel(i: usize, j: usize) -> usize {
    match (i % 2, j % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Bilinear demosaic of an RGGB mosaic: each missing sample is the mean
/// of the recorded neighbors of that color in the surrounding 3×3.
pub fn demosaic_bilinear(mosaic: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, i, j| {
        if bayer_channel(i, j) == c {
            return mosaic[i * w + j];
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                let (y, x) = (i as isize + di, j as isize + dj);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                if bayer_channel(y, x) == c {
                    sum += mosaic[y * w + x];
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    })
}

/// Intensity of RGB stripe `c` at display coordinate `u`: 3 inside the
/// channel's stripe, 0 elsewhere (mean 1 over a triad).
fn stripe_mask(u: f64, period: f64, c: usize) -> f64 {
    let stripe = (u / period).floor().rem_euclid(3.0) as usize;
    if stripe == c {
        3.0
    } else {
        0.0
    }
}

/// Downscale by averaging each output pixel's footprint, with fractional
/// coverage at footprint edges.
pub fn area_resize(x: &Tensor, h: usize, w: usize) -> Tensor {
    let s = x.shape();
    let weights = |src: usize, dst: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut k = lo.floor() as usize;
                while (k as f64) < hi && k < src {
                    let cover = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                    if cover > 0.0 {
                        taps.push((k, cover / scale));
                    }
                    k += 1;
                }
                taps
            })
            .collect()
    };
    let (wy, wx) = (weights(s.h, h), weights(s.w, w));
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, i, j| {
        let p = x.plane(n, c);
        let mut acc = 0.0;
        for &(y, a) in &wy[i] {
            for &(xx, b) in &wx[j] {
                acc += a * b * p[y * s.w + xx];
            }
        }
        acc
    })
}

/// Simulates capturing `clean` off a stripe display.
pub fn generate_pair(clean: &Tensor, spec: &SynthSpec) -> Result<ImagePair> {
    check_image(clean, 64)?;
    spec.validate()?;
    let s = clean.shape();
    let (hh, ww) = (s.h * SUPERSAMPLE, s.w * SUPERSAMPLE);
    let mut up = bilinear_resize(clean, hh, ww, &mut 0)?;

    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let (cy, cx) = (hh as f64 / 2.0, ww as f64 / 2.0);
    let scale = ww.max(hh) as f64 / 2.0;
    let (px, py) = (spec.perspective.0 / scale, spec.perspective.1 / scale);
    for c in 0..3 {
        let plane = up.plane_mut(0, c);
        for i in 0..hh {
            for j in 0..ww {
                let (x, y) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
                let denom = 1.0 + px * x + py * y;
                let u = (cos * x - sin * y) / denom;
                plane[i * ww + j] *= stripe_mask(u, spec.display_period, c);
            }
        }
    }
    let blurred = gaussian_blur(&up, spec.blur_sigma * SUPERSAMPLE as f64);

    let st = spec.cfa_stride;
    let (sh, sw) = (hh / st, ww / st);
    let mut mosaic = vec![0.0; sh * sw];
    for i in 0..sh {
        for j in 0..sw {
            // each sensor site integrates its st×st footprint
            let plane = blurred.plane(0, bayer_channel(i, j));
            let mut acc = 0.0;
            for y in i * st..(i + 1) * st {
                acc += plane[y * ww + j * st..y * ww + (j + 1) * st].iter().sum::<f64>();
            }
            mosaic[i * sw + j] = acc / (st * st) as f64;
        }
    }
    let mut rgb = demosaic_bilinear(&mosaic, sh, sw);
    for c in 0..3 {
        let g = spec.color_gain[c];
        rgb.plane_mut(0, c).iter_mut().for_each(|v| *v *= g);
    }
    let moire = area_resize(&rgb, s.h, s.w).map(|v| v.clamp(0.0, 1.0));
    let mut pair = ImagePair {
        moire,
        clean: clean.clone(),
        spec: spec.clone(),
        true_offset: None,
    };
    if let Some((dx, dy)) = spec.misalign {
        pair = inject_misalignment(&pair, dx, dy)?;
    }
    Ok(pair)
}

/// `out(x, y) = img(x − dx, y − dy)`, bilinear with reflected borders.
/// Integer offsets copy samples exactly.
pub fn shift(img: &Tensor, dx: f64, dy: f64) -> Tensor {
    let s = img.shape();
    let (fx, fy) = (dx.floor(), dy.floor());
    let (ax, ay) = (dx - fx, dy - fy);
    let (ix, iy) = (fx as isize, fy as isize);
    Tensor::from_fn(s, |n, c, i, j| {
        // source coordinate (j − dx, i − dy) lies between x0 − 1 and x0
        let x0 = j as isize - ix;
        let y0 = i as isize - iy;
        let at = |y: isize, x: isize| img.at(n, c, reflect_index(y, s.h), reflect_index(x, s.w));
        let top = if ax == 0.0 {
            at(y0, x0)
        } else {
            at(y0, x0) * (1.0 - ax) + at(y0, x0 - 1) * ax
        };
        if ay == 0.0 {
            top
        } else {
            let above = if ax == 0.0 {
                at(y0 - 1, x0)
            } else {
                at(y0 - 1, x0) * (1.0 - ax) + at(y0 - 1, x0 - 1) * ax
            };
            top * (1.0 - ay) + above * ay
        }
    })
}

/// Translates the moiré image of a pair by (dx, dy) and records it.
pub fn inject_misalignment(pair: &ImagePair, dx: f64, dy: f64) -> Result<ImagePair> {
    check_offset(dx, dy)?;
    let mut out = pair.clone();
    if dx != 0.0 || dy != 0.0 {
        out.moire = shift(&pair.moire, dx, dy);
    }
    out.true_offset = Some((dx, dy));
    Ok(out)
}

/// Estimated translation of `b` relative to `a` (`b ≈ shift(a, dx, dy)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Translation {
    pub dx: f64,
    pub dy: f64,
    /// Integer position of the correlation peak.
    pub peak: (i64, i64),
    /// Normalized cross-correlation at the peak.
    pub score: f64,
}

fn grayscale(img: &Tensor) -> Vec<f64> {
    let s = img.shape();
    let (r, g, b) = (img.plane(0, 0), img.plane(0, 1), img.plane(0, 2));
    (0..s.h * s.w)
        .map(|k| 0.299 * r[k] + 0.587 * g[k] + 0.114 * b[k])
        .collect()
}

/// Integer search over |dx|, |dy| ≤ `radius` maximizing normalized cross
/// correlation on the central window, then a parabola through the peak
/// and its neighbors on each axis for the subpixel part. Both images are
/// first blurred by [`ALIGN_SMOOTH_SIGMA`]; the window keeps the blur
/// footprint clear of the borders, so integer shifts still match exactly.
pub fn estimate_translation(a: &Tensor, b: &Tensor, radius: usize) -> Result<Translation> {
    if a.shape() != b.shape() {
        return Err(Error::Spec(format!(
            "alignment inputs differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    if radius as f64 > MAX_OFFSET {
        return Err(Error::Spec(format!("search radius {radius} exceeds {MAX_OFFSET}")));
    }
    let margin = radius.max(gaussian_taps(ALIGN_SMOOTH_SIGMA).len() / 2);
    check_image(a, 2 * margin + 8)?;
    let s = a.shape();
    let ga = grayscale(&gaussian_blur(a, ALIGN_SMOOTH_SIGMA));
    let gb = grayscale(&gaussian_blur(b, ALIGN_SMOOTH_SIGMA));
    let r = radius as isize;
    let (h, w) = (s.h as isize, s.w as isize);
    // window of b compared against a displaced by the candidate offset
    let m = margin as isize;
    let (y_lo, y_hi, x_lo, x_hi) = (m, h - m, m, w - m);
    let count = ((y_hi - y_lo) * (x_hi - x_lo)) as f64;

    let mut sb = 0.0;
    let mut sbb = 0.0;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let v = gb[(y * w + x) as usize];
            sb += v;
            sbb += v * v;
        }
    }
    let var_b = sbb / count - (sb / count).powi(2);
    if var_b <= 1e-12 {
        return Err(Error::Degenerate(
            "second image is constant over the search window".into(),
        ));
    }

    let side = (2 * r + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            let (mut sa, mut saa, mut sab) = (0.0, 0.0, 0.0);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let va = ga[((y - dy) * w + (x - dx)) as usize];
                    let vb = gb[(y * w + x) as usize];
                    sa += va;
                    saa += va * va;
                    sab += va * vb;
                }
            }
            let var_a = saa / count - (sa / count).powi(2);
            if var_a <= 1e-12 {
                return Err(Error::Degenerate(
                    "first image is constant over the search window".into(),
                ));
            }
            let cov = sab / count - (sa / count) * (sb / count);
            scores[((dy + r) as usize) * side + (dx + r) as usize] = cov / (var_a * var_b).sqrt();
        }
    }
    let (best, &score) = scores.iter().enumerate().fold(
        (0, &f64::NEG_INFINITY),
        |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
    );
    let (py, px) = ((best / side) as isize - r, (best % side) as isize - r);
    let at = |dy: isize, dx: isize| scores[((dy + r) as usize) * side + (dx + r) as usize];
    // a perfect correlation means the integer offset is exact; the
    // correlation surface around it is not symmetric in general
    let exact = score >= 1.0 - EXACT_MATCH;
    let refine = |minus: Option<f64>, plus: Option<f64>| match (minus, plus) {
        _ if exact => 0.0,
        (Some(m), Some(p)) => {
            let curv = m - 2.0 * score + p;
            if curv < 0.0 {
                (0.5 * (m - p) / curv).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let fx = refine((px > -r).then(|| at(py, px - 1)), (px < r).then(|| at(py, px + 1)));
    let fy = refine((py > -r).then(|| at(py - 1, px)), (py < r).then(|| at(py + 1, px)));
    Ok(Translation {
        dx: px as f64 + fx,
        dy: py as f64 + fy,
        peak: (px as i64, py as i64),
        score,
    })
}

/// Procedural stand-in for a natural photograph: smooth color gradients,
/// overlapping shapes with soft edges, and a few oriented textures.
pub fn procedural_scene(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.15..0.85)));
    struct Shape2 {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        round: bool,
        color: [f64; 3],
    }
    let shapes: Vec<Shape2> = (0..rng.gen_range(4..9))
        .map(|_| Shape2 {
            cx: rng.gen_range(0.0..1.0),
            cy: rng.gen_range(0.0..1.0),
            rx: rng.gen_range(0.05..0.3),
            ry: rng.gen_range(0.05..0.3),
            round: rng.gen_bool(0.5),
            color: std::array::from_fn(|_| rng.gen_range(0.05..0.95)),
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..rng.gen_range(1..4))
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(4.0..20.0);
            let amp = rng.gen_range(0.03..0.12);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (
                angle,
                freq,
                amp,
                phase,
                std::array::from_fn(|_| rng.gen_range(0.3..1.0)),
            )
        })
        .collect();
    let edge = 1.5 / h.max(w) as f64;

    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, i, j| {
        let (y, x) = ((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
        let mut v = base[0][c] * (1.0 - x) * (1.0 - y) + base[1][c] * x + base[2][c] * y * (1.0 - x);
        for s in &shapes {
            let (u, t) = ((x - s.cx) / s.rx, (y - s.cy) / s.ry);
            let d = if s.round {
                (u * u + t * t).sqrt() - 1.0
            } else {
                u.abs().max(t.abs()) - 1.0
            };
            let alpha = (0.5 - d * s.rx.min(s.ry) / edge).clamp(0.0, 1.0);
            v = v * (1.0 - alpha) + s.color[c] * alpha;
        }
        for &(angle, freq, amp, phase, tint) in &waves {
            let p = x * angle.cos() + y * angle.sin();
            v += amp * tint[c] * (std::f64::consts::TAU * freq * p + phase).sin();
        }
        v.clamp(0.0, 1.0)
    })
}

/// Solid gray `level` plus per-pixel noise of amplitude `amp` shared by
/// all channels, drawn from `noise_seed`.
pub fn inspection_base(level: f64, amp: f64, noise_seed: u64, h: usize, w: usize) -> (Tensor, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, i, j| {
        (level + amp * noise[i * w + j]).clamp(0.0, 1.0)
    });
    (img, noise)
}
