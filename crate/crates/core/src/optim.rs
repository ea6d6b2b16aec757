//! Adam with bias correction and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use mznet_tensor::Tensor;

use crate::error::{Error, Result};
use crate::params::Params;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment estimates per parameter path plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter. Paths absent from `grads` are
    /// treated as having zero gradient. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (path, g) in grads {
            let p = params.get(path).ok_or_else(|| Error::MissingParam(path.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Config(format!(
                    "gradient for `{path}` has shape {}, parameter has {}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGrad(path.clone()));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (path, p) in params.iter_mut() {
            let shape = p.shape();
            let m = self.m.entry(path.to_string()).or_insert_with(|| Tensor::zeros(shape));
            let v = self.v.entry(path.to_string()).or_insert_with(|| Tensor::zeros(shape));
            let g = grads.get(path);
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// lr_min + (lr_init − lr_min)·(1 + cos(π·step/total))/2.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} is past the schedule end {total_steps}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + (lr_init - lr_min) * (1.0 + phase.cos()) / 2.0)
}
