//! Parameter and multiply-accumulate accounting.
//!
//! MACs are counted analytically from the layer geometry, at the same
//! per-element rates the engine's instrumented mode counts:
//! convolution n·H_out·W_out·C_out·(C_in/groups)·k_h·k_w (padded taps
//! included), bilinear resize 6 per output element (0 for same-size),
//! layer norm c+2 per position plus 2 per element, global pooling 1 per
//! (sample, channel), SimpleGate and elementwise/channel products 1 per
//! output element. Additions, concatenation and shuffles are free.

use std::fmt::Write as _;

use mznet_tensor::{Shape, Tape, Tensor, Var};

use crate::error::Result;
use crate::model::{module_macs, module_name, Model, ModelConfig};
use crate::params::Ctx;

/// Published size of the original UHDM model, for side-by-side display.
pub const REFERENCE_PARAMS: f64 = 14.824e6;
/// Published MACs of the original UHDM model at 3840×2160.
pub const REFERENCE_MACS: f64 = 1.190e12;

pub const MODULES: [&str; 15] = [
    "stem",
    "enc1",
    "enc2",
    "enc3",
    "enc4",
    "bottleneck",
    "ffsc1",
    "ffsc2",
    "ffsc3",
    "ffsc4",
    "dec1",
    "dec2",
    "dec3",
    "dec4",
    "heads",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub module: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Input (height, width) the MACs refer to, if counted.
    pub resolution: Option<(usize, usize)>,
    /// Size the input is reflect-padded to before the network runs.
    pub padded: Option<(usize, usize)>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Tab-separated rows with a header and a trailing total line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("module\tparams\tmacs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}", r.module, r.params, r.macs);
        }
        let _ = writeln!(s, "total\t{}\t{}", self.total_params(), self.total_macs());
        s
    }

    /// Aligned console table with totals and the reference comparison.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>14} {:>20}", "module", "params", "MACs");
        for r in &self.rows {
            let _ = writeln!(s, "{:<12} {:>14} {:>20}", r.module, r.params, r.macs);
        }
        let _ = writeln!(
            s,
            "{:<12} {:>14} {:>20}",
            "total",
            self.total_params(),
            self.total_macs()
        );
        let mut res = self
            .resolution
            .map_or_else(|| "-".to_string(), |(h, w)| format!("{w}x{h}"));
        if let (Some(r), Some((ph, pw))) = (self.resolution, self.padded) {
            if r != (ph, pw) {
                let _ = write!(res, " (padded to {pw}x{ph})");
            }
        }
        let _ = writeln!(
            s,
            "this model:  {:.3} M params, {:.3} T MACs at {res}",
            self.total_params() as f64 / 1e6,
            self.total_macs() as f64 / 1e12
        );
        let _ = writeln!(
            s,
            "reference:   {:.3} M params, {:.3} T MACs at 3840x2160 (original UHDM model)",
            REFERENCE_PARAMS / 1e6,
            REFERENCE_MACS / 1e12
        );
        let _ = writeln!(
            s,
            "note: the reference base width C is unpublished; totals depend on C and are shown for calibration, not expected to match"
        );
        s
    }
}

/// Parameter count per module of a built model.
pub fn count_params(model: &Model) -> CostReport {
    let mut rows: Vec<CostRow> = MODULES
        .iter()
        .map(|m| CostRow {
            module: m.to_string(),
            params: 0,
            macs: 0,
        })
        .collect();
    for (path, t) in model.params.iter() {
        let name = module_name(path);
        match rows.iter_mut().find(|r| r.module == name) {
            Some(r) => r.params += t.numel() as u64,
            None => rows.push(CostRow {
                module: name.to_string(),
                params: t.numel() as u64,
                macs: 0,
            }),
        }
    }
    CostReport {
        rows,
        resolution: None,
        padded: None,
    }
}

/// Analytic MACs per module for one `h`×`w` image, counted at the padded
/// size full-resolution inference actually runs.
pub fn count_macs(config: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    let m = config.size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let rows = module_macs(config, 1, ph, pw)?
        .into_iter()
        .map(|(module, macs)| CostRow {
            module,
            params: 0,
            macs,
        })
        .collect();
    Ok(CostReport {
        rows,
        resolution: Some((h, w)),
        padded: Some((ph, pw)),
    })
}

/// Parameters and MACs together.
pub fn cost_report(model: &Model, h: usize, w: usize) -> Result<CostReport> {
    let mut report = count_params(model);
    let macs = count_macs(&model.config, h, w)?;
    for m in macs.rows {
        match report.rows.iter_mut().find(|r| r.module == m.module) {
            Some(r) => r.macs = m.macs,
            None => report.rows.push(m),
        }
    }
    report.resolution = macs.resolution;
    report.padded = macs.padded;
    Ok(report)
}

/// Multiplies literally performed by one forward pass of an `n`×3×`h`×`w`
/// input, using the engine's counting reference kernels.
pub fn instrumented_macs(model: &Model, n: usize, h: usize, w: usize) -> Result<u64> {
    let mut tape = Tape::instrumented();
    let bound = model.params.constants();
    let image = Tensor::from_fn(Shape::new(n, 3, h, w), |n, c, i, j| {
        ((n * 7 + c * 3 + i * 5 + j) % 11) as f64 / 11.0
    });
    let mut ctx = Ctx::new(&mut tape, &bound);
    model.forward(&mut ctx, &Var::constant(image))?;
    Ok(tape.multiplies().expect("instrumented tape counts"))
}
