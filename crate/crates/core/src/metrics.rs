//! PSNR and SSIM on [0, 1] images.

use std::fmt::Write as _;

use mznet_tensor::Tensor;

use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "metric inputs differ in shape: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over every channel and pixel.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.numel() as f64)
}

/// PSNR from a mean squared error, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// 10·log10(1/MSE) over the flattened RGB data.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            let src = &plane[i * w + j..i * w + j + k];
            rows[i * ow + j] = src.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, gt) in g.iter().enumerate() {
                acc += gt * rows[(i + t) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows, averaged over channels
/// (and batch entries).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            s.h, s.w
        )));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let (pa, pb) = (a.plane(n, c), b.plane(n, c));
            let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
            let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
            let mu_a = filter_valid(pa, s.h, s.w, &g);
            let mu_b = filter_valid(pb, s.h, s.w, &g);
            let e_aa = filter_valid(&aa, s.h, s.w, &g);
            let e_bb = filter_valid(&bb, s.h, s.w, &g);
            let e_ab = filter_valid(&ab, s.h, s.w, &g);
            let mut plane_sum = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                plane_sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            total += plane_sum / mu_a.len() as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image metrics with their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn push(&mut self, id: impl Into<String>, pred: &Tensor, gt: &Tensor) -> Result<()> {
        self.rows.push(MetricsRow {
            id: id.into(),
            psnr: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
        });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// Rows plus a `mean` line. LPIPS needs a pretrained network and is
    /// reported as unavailable.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tpsnr_db\tssim\tlpips\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\tNA", r.id, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "mean\t{}\t{}\tNA", self.mean_psnr(), self.mean_ssim());
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(2).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$} {:>10} {:>8}", "id", "PSNR(dB)", "SSIM");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$} {:>10.3} {:>8.4}", r.id, r.psnr, r.ssim);
        }
        let _ = writeln!(
            s,
            "{:<width$} {:>10.3} {:>8.4}",
            "mean",
            self.mean_psnr(),
            self.mean_ssim()
        );
        let _ = writeln!(
            s,
            "SSIM: {SSIM_WINDOW}x{SSIM_WINDOW} Gaussian window, sigma {SSIM_SIGMA}, valid positions; data range [0, 1]; LPIPS unavailable"
        );
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
