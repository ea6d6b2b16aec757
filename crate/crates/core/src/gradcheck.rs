//! Central finite-difference checks of every block and of a small
//! network against the tape's gradients.

use std::fmt::Write as _;

use mznet_tensor::{Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{AttentionSwitches, Dam, Ffsc, Lka, Mdcm, Mscm, Msdab, Mslkb, NafBlock, Sca};
use crate::error::{Error, Result};
use crate::loss::{supervised_loss, PerceptualProxy};
use crate::model::{Model, ModelConfig};
use crate::params::{Ctx, ParamInit, Params};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so components that are zero
/// up to rounding compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One compared gradient component.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

fn scalar_loss(
    values: &Params,
    tracked: bool,
    f: &dyn Fn(&mut Ctx) -> Result<Var>,
) -> Result<(Tape, Var, Option<crate::params::Bound>)> {
    let mut tape = Tape::new();
    let bound = if tracked {
        values.bind(&mut tape)
    } else {
        values.constants()
    };
    let loss = {
        let mut ctx = Ctx::new(&mut tape, &bound);
        f(&mut ctx)?
    };
    if !loss.shape().is_scalar() {
        return Err(Error::Config(format!("checked function returned {}", loss.shape())));
    }
    Ok((tape, loss, tracked.then_some(bound)))
}

/// Compares d(f)/d(value) with central differences at `probes` randomly
/// chosen components. Every entry of `values` is differentiated,
/// inputs included.
pub fn fd_check(
    values: &Params,
    probes: usize,
    rng: &mut impl Rng,
    f: &dyn Fn(&mut Ctx) -> Result<Var>,
) -> Result<Vec<Probe>> {
    let (mut tape, loss, bound) = scalar_loss(values, true, f)?;
    tape.backward(&loss)?;
    let bound = bound.expect("tracked run binds parameters");
    let paths: Vec<String> = values.paths().map(str::to_string).collect();
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let path = &paths[rng.gen_range(0..paths.len())];
        let numel = values.get(path).map_or(0, Tensor::numel);
        let index = rng.gen_range(0..numel);
        let analytic = tape.grad(bound.get(path)?).map_or(0.0, |g| g.data()[index]);
        let eval = |delta: f64| -> Result<f64> {
            let mut v = values.clone();
            v.get_mut(path).expect("path exists").data_mut()[index] += delta;
            Ok(scalar_loss(&v, false, f)?.1.item())
        };
        let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        out.push(Probe {
            path: path.clone(),
            index,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    Ok(out)
}

fn uniform(shape: Shape, scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale))
}

/// Seeded initialization moved off its starting point so that zero
/// initializations (heads, biases, norm offsets) are exercised too.
fn perturbed(params: Params, rng: &mut impl Rng) -> Params {
    let mut p = params;
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    p
}

/// Worst relative error of one checked unit over all trials.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub trials: usize,
    pub probes: usize,
    pub worst: f64,
    pub worst_probe: Option<Probe>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.worst < self.tol)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>7} {:>12}  status",
            "unit", "trials", "probes", "max rel err"
        );
        for r in &self.rows {
            let status = if r.worst < self.tol { "ok" } else { "FAIL" };
            let _ = write!(
                s,
                "{:<10} {:>7} {:>7} {:>12.3e}  {status}",
                r.name, r.trials, r.probes, r.worst
            );
            if let (false, Some(p)) = (r.worst < self.tol, &r.worst_probe) {
                let _ = write!(
                    s,
                    " at {}[{}]: analytic {:e}, numeric {:e}",
                    p.path, p.index, p.analytic, p.numeric
                );
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "tolerance {:e}, central differences with step {:e}",
            self.tol, FD_STEP
        );
        s
    }
}

/// Settings of the finite-difference suite.
#[derive(Clone, Debug)]
pub struct GradSuite {
    pub trials: usize,
    pub probes_per_trial: usize,
    pub seed: u64,
    pub tol: f64,
    /// Network checked end to end (with heads perturbed away from zero).
    pub model: ModelConfig,
    pub model_size: usize,
}

impl Default for GradSuite {
    fn default() -> Self {
        Self {
            trials: 20,
            probes_per_trial: 10,
            seed: 0,
            tol: 1e-4,
            model: ModelConfig::tiny(),
            model_size: 32,
        }
    }
}

/// Unit names in suite order.
pub const UNITS: [&str; 10] = [
    "MDCM", "SCA", "LKA", "DAM", "MSDAB", "MSCM", "MSLKB", "NAFBlock", "FFSC", "model",
];

type Setup = Box<dyn Fn(&mut ParamInit) -> Result<()>>;
type Body = Box<dyn Fn(&mut Ctx, &Var) -> Result<Var>>;

fn block_case(name: &str, c: usize, hw: (usize, usize)) -> (Shape, Setup, Body) {
    let shape = Shape::new(1, c, hw.0, hw.1);
    match name {
        "MDCM" => {
            let b = Mdcm {
                channels: c,
                dilations: vec![1, 4, 7, 9],
            };
            let b2 = b.clone();
            (
                shape,
                Box::new(move |i| b.init("mdcm", i)),
                Box::new(move |ctx, x| b2.forward(ctx, "mdcm", x)),
            )
        }
        "SCA" => {
            let b = Sca { channels: c };
            (
                shape,
                Box::new(move |i| b.init("sca", i)),
                Box::new(move |ctx, x| b.forward(ctx, "sca", x)),
            )
        }
        "LKA" => {
            let b = Lka { channels: c };
            (
                shape,
                Box::new(move |i| b.init("lka", i)),
                Box::new(move |ctx, x| b.forward(ctx, "lka", x)),
            )
        }
        "DAM" => {
            let b = Dam {
                channels: c,
                use_sca: true,
                use_lka: true,
            };
            (
                shape,
                Box::new(move |i| b.init("dam", i)),
                Box::new(move |ctx, x| b.forward(ctx, "dam", x)),
            )
        }
        "MSDAB" => {
            let b = Msdab {
                channels: c,
                dilations: vec![1, 4, 7, 9],
                switches: AttentionSwitches::default(),
            };
            let b2 = b.clone();
            (
                shape,
                Box::new(move |i| b.init("msdab", i)),
                Box::new(move |ctx, x| b2.forward(ctx, "msdab", x)),
            )
        }
        "MSCM" => {
            let b = Mscm {
                channels: c,
                kernel: 5,
                use_square: true,
                use_stripe: true,
                use_sca: true,
            };
            (
                shape,
                Box::new(move |i| b.init("mscm", i)),
                Box::new(move |ctx, x| b.forward(ctx, "mscm", x)),
            )
        }
        "MSLKB" => {
            let b = Mslkb::new(c, 7);
            let b2 = b;
            (
                shape,
                Box::new(move |i| b.init("mslkb", i)),
                Box::new(move |ctx, x| b2.forward(ctx, "mslkb", x)),
            )
        }
        "NAFBlock" => {
            let b = NafBlock { channels: c };
            (
                shape,
                Box::new(move |i| b.init("naf", i)),
                Box::new(move |ctx, x| b.forward(ctx, "naf", x)),
            )
        }
        other => unreachable!("no block case {other}"),
    }
}

impl GradSuite {
    fn rng(&self, unit: usize, trial: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((unit * 1000 + trial) as u64);
        rng
    }

    fn check_block(&self, unit: usize, name: &str) -> Result<Vec<Probe>> {
        let mut probes = Vec::new();
        for trial in 0..self.trials {
            let mut rng = self.rng(unit, trial);
            let hw = match name {
                "MSDAB" | "SCA" | "NAFBlock" => (8, 8),
                "MSLKB" | "LKA" => (12, 12),
                _ => (10, 10),
            };
            let (shape, setup, body) = block_case(name, 8, hw);
            let mut init = ParamInit::new(rng.gen());
            setup(&mut init)?;
            let mut values = perturbed(init.finish(), &mut rng);
            values.insert("input", uniform(shape, 1.0, &mut rng))?;
            let proj = uniform(shape, 1.0, &mut rng);
            let f = move |ctx: &mut Ctx| -> Result<Var> {
                let x = ctx.param("input")?;
                let y = body(ctx, &x)?;
                Ok(ctx.tape.dot(&y, &proj)?)
            };
            probes.extend(fd_check(&values, self.probes_per_trial, &mut rng, &f)?);
        }
        Ok(probes)
    }

    fn check_ffsc(&self, unit: usize) -> Result<Vec<Probe>> {
        let mut probes = Vec::new();
        let base = 2;
        for trial in 0..self.trials {
            let mut rng = self.rng(unit, trial);
            let level = 1 + trial % 4;
            let block = Ffsc {
                base_width: base,
                level,
            };
            let mut init = ParamInit::new(rng.gen());
            block.init("ffsc", &mut init)?;
            let mut values = perturbed(init.finish(), &mut rng);
            for k in 1..=4 {
                let shape = Shape::new(1, base << k, 16 >> (k - 1), 16 >> (k - 1));
                values.insert(format!("input.{k}"), uniform(shape, 1.0, &mut rng))?;
            }
            let side = 16 >> (level - 1);
            let proj = uniform(Shape::new(1, block.width(), side, side), 1.0, &mut rng);
            let f = move |ctx: &mut Ctx| -> Result<Var> {
                let feats = (1..=4)
                    .map(|k| ctx.param(&format!("input.{k}")))
                    .collect::<Result<Vec<_>>>()?;
                let y = block.forward(ctx, "ffsc", &feats)?;
                Ok(ctx.tape.dot(&y, &proj)?)
            };
            probes.extend(fd_check(&values, self.probes_per_trial, &mut rng, &f)?);
        }
        Ok(probes)
    }

    /// L1 over all supervised scales with targets placed away from the
    /// predictions, so no absolute value sits at its kink.
    fn check_model(&self, unit: usize) -> Result<Vec<Probe>> {
        let size = self.model_size;
        let cfg = self.model.with_crop(size, size)?;
        let proxy = PerceptualProxy::new(0);
        let mut probes = Vec::new();
        for trial in 0..self.trials {
            let mut rng = self.rng(unit, trial);
            let model = Model::build(&cfg, rng.gen())?;
            let params = perturbed(model.params.clone(), &mut rng);
            let model = Model::from_params(&cfg, params.clone())?;
            let image = Tensor::from_fn(Shape::new(1, 3, size, size), |_, _, _, _| rng.gen_range(0.0..1.0));
            let preds = {
                let mut tape = Tape::new();
                let bound = model.params.constants();
                let mut ctx = Ctx::new(&mut tape, &bound);
                model.forward(&mut ctx, &Var::constant(image.clone()))?.preds
            };
            let targets: Vec<Tensor> = preds
                .iter()
                .map(|p| {
                    let mut t = p.to_tensor();
                    for v in t.data_mut() {
                        let off = rng.gen_range(0.05..0.15);
                        *v += if rng.gen_bool(0.5) { off } else { -off };
                    }
                    t
                })
                .collect();
            let mut values = params;
            values.insert("input", image)?;
            let (model, proxy) = (&model, &proxy);
            let f = move |ctx: &mut Ctx| -> Result<Var> {
                let x = ctx.param("input")?;
                let out = model.forward(ctx, &x)?;
                Ok(supervised_loss(ctx.tape, &out.preds, &targets, &[1.0; 3], 0.0, proxy)?.total)
            };
            probes.extend(fd_check(&values, self.probes_per_trial, &mut rng, &f)?);
        }
        Ok(probes)
    }

    pub fn check_unit(&self, name: &str) -> Result<GradRow> {
        let unit = UNITS
            .iter()
            .position(|u| *u == name)
            .ok_or_else(|| Error::Config(format!("unknown unit {name}")))?;
        let probes = match name {
            "FFSC" => self.check_ffsc(unit)?,
            "model" => self.check_model(unit)?,
            _ => self.check_block(unit, name)?,
        };
        let worst_probe = probes.iter().cloned().fold(None::<Probe>, |acc, p| match acc {
            Some(a) if a.rel_err >= p.rel_err => Some(a),
            _ => Some(p),
        });
        Ok(GradRow {
            name: name.to_string(),
            trials: self.trials,
            probes: probes.len(),
            worst: worst_probe.as_ref().map_or(0.0, |p| p.rel_err),
            worst_probe,
        })
    }

    pub fn run(&self) -> Result<GradReport> {
        Ok(GradReport {
            rows: UNITS.iter().map(|u| self.check_unit(u)).collect::<Result<_>>()?,
            tol: self.tol,
        })
    }
}
