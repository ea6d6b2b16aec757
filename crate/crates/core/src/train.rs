//! Training loop: seeded shuffling, aligned random crops and flips,
//! gradient accumulation, Adam under a cosine schedule, TSV logging and
//! per-epoch checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mznet_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::loss::{loss_total, PerceptualProxy};
use crate::metrics::{psnr_from_mse, MetricsReport};
use crate::model::{crop, Model, TlcSpec};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::Ctx;
use crate::synth::{estimate_translation, shift};

pub const LOG_FILE: &str = "train_log.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mznt";
pub const LOG_HEADER: &str = "step\tepoch\tlr\tl1\tperceptual\ttotal\ttrain_psnr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub crop: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_perceptual: f64,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub supervision_weights: [f64; 3],
    pub proxy_seed: u64,
    pub flips: bool,
    /// Epochs between checkpoints; the final state is always written.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            crop: 256,
            lr_init: 2e-4,
            lr_min: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            lambda_perceptual: 1.0,
            grad_accum_steps: 1,
            seed: 0,
            supervision_weights: [1.0; 3],
            proxy_seed: 0,
            flips: true,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.epochs == 0 {
            return bad("train.batch_size, train.grad_accum_steps and train.epochs must be positive".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(32) {
            return bad(format!("train.crop {} must be a positive multiple of 32", self.crop));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            return bad(format!(
                "need 0 < lr_min ({}) <= lr_init ({})",
                self.lr_min, self.lr_init
            ));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("train.{k} = {b} is outside [0, 1)"));
            }
        }
        if self.adam_eps <= 0.0 || self.lambda_perceptual < 0.0 {
            return bad("train.adam_eps must be positive and train.lambda_perceptual non-negative".into());
        }
        if self.supervision_weights.iter().any(|w| *w < 0.0) {
            return bad("train.supervision_weights must be non-negative".into());
        }
        if self.checkpoint_every == 0 {
            return bad("train.checkpoint_every must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Optimizer steps per epoch; incomplete batches are dropped.
    pub fn steps_per_epoch(&self, samples: usize) -> Result<u64> {
        let per_step = self.batch_size * self.grad_accum_steps;
        let steps = samples / per_step;
        if steps == 0 {
            return Err(Error::Config(format!(
                "{samples} samples cannot fill one step of {per_step}"
            )));
        }
        Ok(steps as u64)
    }

    pub fn total_steps(&self, samples: usize) -> Result<u64> {
        Ok(self.steps_per_epoch(samples)? * self.epochs)
    }
}

/// One optimizer step's scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub train_psnr: f64,
}

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.epoch, self.lr, self.l1, self.perceptual, self.total, self.train_psnr
        )
    }
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn flip(x: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return x.clone();
    }
    let s = x.shape();
    Tensor::from_fn(s, |n, c, i, j| {
        let i = if vertical { s.h - 1 - i } else { i };
        let j = if horizontal { s.w - 1 - j } else { j };
        x.at(n, c, i, j)
    })
}

/// The same window and flips applied to both images of a pair.
pub fn augment(sample: &Sample, size: usize, flips: bool, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let s = sample.moire.shape();
    if s.h < size || s.w < size {
        return Err(Error::Config(format!(
            "crop {size} exceeds image {}x{} of {}",
            s.h, s.w, sample.id
        )));
    }
    let top = rng.gen_range(0..=s.h - size);
    let left = rng.gen_range(0..=s.w - size);
    let (fh, fv) = if flips {
        (rng.gen_bool(0.5), rng.gen_bool(0.5))
    } else {
        (false, false)
    };
    let m = flip(&crop(&sample.moire, top, left, size, size), fh, fv);
    let g = flip(&crop(&sample.gt, top, left, size, size), fh, fv);
    Ok((m, g))
}

/// Model, optimizer and schedule position over a fixed dataset.
pub struct Trainer<'a> {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub config: TrainConfig,
    proxy: PerceptualProxy,
    data: &'a [Sample],
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, config: TrainConfig, data: &'a [Sample]) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        config.steps_per_epoch(data.len())?;
        Ok(Self {
            adam: Adam::new(config.adam()),
            proxy: PerceptualProxy::new(config.proxy_seed),
            model,
            step: 0,
            config,
            data,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, mut config: TrainConfig, data: &'a [Sample]) -> Result<Self> {
        config.proxy_seed = ckpt.proxy_seed;
        let mut t = Self::new(ckpt.model()?, config, data)?;
        t.adam = ckpt.adam(t.config.adam());
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.model, Some(&self.adam), self.step, self.proxy.seed())
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps(self.data.len()).unwrap_or(0)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.config.steps_per_epoch(self.data.len()).unwrap_or(1)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// The (moiré, ground truth) batch of micro-batch `micro` at the
    /// current step.
    pub fn batch(&self, micro: usize) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let spe = self.steps_per_epoch();
        let (epoch, within) = (self.step / spe, (self.step % spe) as usize);
        let order = epoch_order(cfg.seed, epoch, self.data.len());
        let start = (within * cfg.grad_accum_steps + micro) * cfg.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d7a_6e65_7463_726f);
        rng.set_stream(self.step * cfg.grad_accum_steps as u64 + micro as u64);
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for &idx in &order[start..start + cfg.batch_size] {
            let (m, g) = augment(&self.data[idx], cfg.crop, cfg.flips, &mut rng)?;
            inputs.push(m);
            targets.push(g);
        }
        Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
    }

    /// Loss and parameter gradients of one batch, the loss scaled by `scale`.
    pub fn gradients(&self, input: &Tensor, gt: &Tensor, scale: f64) -> Result<(BTreeMap<String, Tensor>, LogParts)> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let out = {
            let mut ctx = Ctx::new(&mut tape, &bound);
            self.model.forward(&mut ctx, &Var::constant(input.clone()))?
        };
        let parts = loss_total(
            &mut tape,
            &out.preds,
            gt,
            &cfg.supervision_weights,
            cfg.lambda_perceptual,
            &self.proxy,
        )?;
        let total = parts.total.item();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss(self.step));
        }
        let mse = crate::metrics::mse(out.preds[0].value(), gt)?;
        let scaled = tape.scale(&parts.total, scale)?;
        tape.backward(&scaled)?;
        let mut grads = BTreeMap::new();
        for (path, var) in bound.iter() {
            if let Some(g) = tape.grad(var) {
                grads.insert(path.to_string(), g.clone());
            }
        }
        Ok((
            grads,
            LogParts {
                l1: parts.l1,
                perceptual: parts.perceptual,
                total,
                mse,
            },
        ))
    }

    /// One optimizer step over `grad_accum_steps` micro-batches.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let total_steps = self.total_steps();
        if self.step >= total_steps {
            return Err(Error::Config(format!("schedule finished at step {total_steps}")));
        }
        let cfg = self.config.clone();
        let k = cfg.grad_accum_steps;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut acc = LogParts::default();
        for micro in 0..k {
            let (input, gt) = self.batch(micro)?;
            let (g, parts) = self.gradients(&input, &gt, 1.0 / k as f64)?;
            for (path, t) in g {
                match grads.get_mut(&path) {
                    Some(sum) => sum.axpy(1.0, &t)?,
                    None => {
                        grads.insert(path, t);
                    }
                }
            }
            acc.l1 += parts.l1 / k as f64;
            acc.perceptual += parts.perceptual / k as f64;
            acc.total += parts.total / k as f64;
            acc.mse += parts.mse / k as f64;
        }
        let lr = cosine_lr(self.step, total_steps, cfg.lr_init, cfg.lr_min)?;
        self.adam.step(&mut self.model.params, &grads, lr)?;
        let row = LogRow {
            step: self.step,
            epoch: self.step / self.steps_per_epoch(),
            lr,
            l1: acc.l1,
            perceptual: acc.perceptual,
            total: acc.total,
            train_psnr: psnr_from_mse(acc.mse),
        };
        self.step += 1;
        Ok(row)
    }
}

/// Per-batch scalars before averaging over micro-batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogParts {
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub mse: f64,
}

/// Where a file-backed run writes.
pub struct RunPaths {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            log: out_dir.join(LOG_FILE),
            checkpoint: out_dir.join(CHECKPOINT_FILE),
        }
    }
}

/// Runs the trainer to the end of its schedule, appending to the log and
/// checkpointing every `checkpoint_every` epochs and at the end. On error
/// the last written checkpoint stays in place.
pub fn run(trainer: &mut Trainer, out_dir: &Path, mut on_row: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = RunPaths::new(out_dir);
    let fresh = trainer.step == 0 || !paths.log.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&paths.log)
        .map_err(|e| Error::io(&paths.log, e))?;
    if fresh {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&paths.log, e))?;
    }
    let spe = trainer.steps_per_epoch();
    let mut rows = Vec::new();
    while !trainer.is_done() {
        let row = trainer.train_step()?;
        writeln!(log, "{}", row.to_tsv()).map_err(|e| Error::io(&paths.log, e))?;
        on_row(&row);
        rows.push(row);
        let epochs_done = trainer.step / spe;
        if trainer.step.is_multiple_of(spe)
            && (epochs_done.is_multiple_of(trainer.config.checkpoint_every) || trainer.is_done())
        {
            log.flush().map_err(|e| Error::io(&paths.log, e))?;
            trainer.checkpoint().save(&paths.checkpoint)?;
        }
    }
    log.flush().map_err(|e| Error::io(&paths.log, e))?;
    Ok(rows)
}

/// PSNR/SSIM of the model's full-resolution outputs.
pub fn evaluate(model: &Model, samples: &[Sample], tlc: Option<TlcSpec>) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for s in samples {
        let pred = model.infer_padded(&s.moire, tlc)?;
        report.push(s.id.clone(), &pred, &s.gt)?;
    }
    Ok(report)
}

/// PSNR/SSIM of the moiré inputs themselves.
pub fn input_metrics(samples: &[Sample]) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for s in samples {
        report.push(s.id.clone(), &s.moire, &s.gt)?;
    }
    Ok(report)
}

/// Estimates each pair's translation and shifts the moiré image back onto
/// its ground truth by the nearest whole-pixel offset. Bilinear resampling
/// would low-pass the moiré texture and leave training inputs softer than
/// the ones seen at inference.
pub fn realign(samples: &[Sample], radius: usize) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let t = estimate_translation(&s.gt, &s.moire, radius)?;
            let (dx, dy) = (t.dx.round(), t.dy.round());
            let mut out = s.clone();
            if dx != 0.0 || dy != 0.0 {
                out.moire = shift(&s.moire, -dx, -dy);
            }
            Ok(out)
        })
        .collect()
}
