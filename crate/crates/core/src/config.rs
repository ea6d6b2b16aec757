//! Flat `key = value` configuration with `model.`, `train.` and `synth.`
//! sections, dotted overrides and strict key checking.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{KernelSize, ModelConfig};
use crate::synth::SynthRanges;
use crate::train::TrainConfig;

const UHDM: &str = include_str!("../presets/uhdm.cfg");
const FHDMI: &str = include_str!("../presets/fhdmi.cfg");
const TIP2018: &str = include_str!("../presets/tip2018.cfg");
const DESK: &str = include_str!("../presets/desk.cfg");

/// Names of the built-in presets.
pub const PRESETS: [&str; 4] = ["uhdm", "fhdmi", "tip2018", "desk"];

/// Text of a built-in preset.
pub fn preset_text(name: &str) -> Option<&'static str> {
    match name {
        "uhdm" => Some(UHDM),
        "fhdmi" => Some(FHDMI),
        "tip2018" => Some(TIP2018),
        "desk" => Some(DESK),
        _ => None,
    }
}

/// `(key, value)` pairs in file order; comments and blank lines dropped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not `key=value`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| value(key, p.trim())).collect()
}

fn array<const N: usize, T: std::str::FromStr + Copy + Default>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = list(key, v)?;
    if items.len() != N {
        return Err(Error::Config(format!(
            "`{key}`: expected {N} values, got {}",
            items.len()
        )));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&items);
    Ok(out)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Applies one `model.`-relative key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let full = format!("model.{key}");
        let k = full.as_str();
        match key {
            "base_width" => self.base_width = value(k, v)?,
            "unshuffle_factor" => self.unshuffle_factor = value(k, v)?,
            "encoder_blocks" => self.encoder_blocks = array(k, v)?,
            "decoder_blocks" => self.decoder_blocks = array(k, v)?,
            "dilations" => {
                let d: Vec<usize> = list(k, v)?;
                self.dilations = [d.clone(), d.clone(), d.clone(), d];
            }
            "dilations.1" => self.dilations[0] = list(k, v)?,
            "dilations.2" => self.dilations[1] = list(k, v)?,
            "dilations.3" => self.dilations[2] = list(k, v)?,
            "dilations.4" => self.dilations[3] = list(k, v)?,
            "mslkb_k" => {
                self.mslkb_kernel = if v == "auto" {
                    KernelSize::Auto
                } else {
                    KernelSize::Fixed(value(k, v)?)
                }
            }
            "use_lka" => self.use_lka = flag(k, v)?,
            "use_sca" => self.use_sca = flag(k, v)?,
            "use_mdcm" => self.use_mdcm = flag(k, v)?,
            "use_stripe" => self.use_stripe = flag(k, v)?,
            "use_square" => self.use_square = flag(k, v)?,
            "use_ffsc" => self.use_ffsc = flag(k, v)?,
            "use_mslkb" => self.use_mslkb = flag(k, v)?,
            "use_mscm_sca" => self.use_mscm_sca = flag(k, v)?,
            "use_msdab" => self.use_msdab = flag(k, v)?,
            "deep_supervision_levels" => self.deep_supervision_levels = value(k, v)?,
            _ => return Err(Error::UnknownKey(full)),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let k = match self.mslkb_kernel {
            KernelSize::Auto => "auto".to_string(),
            KernelSize::Fixed(k) => k.to_string(),
        };
        let mut e = vec![
            ("base_width", self.base_width.to_string()),
            ("unshuffle_factor", self.unshuffle_factor.to_string()),
            ("encoder_blocks", join(&self.encoder_blocks)),
            ("decoder_blocks", join(&self.decoder_blocks)),
            ("dilations.1", join(&self.dilations[0])),
            ("dilations.2", join(&self.dilations[1])),
            ("dilations.3", join(&self.dilations[2])),
            ("dilations.4", join(&self.dilations[3])),
            ("mslkb_k", k),
            ("use_lka", self.use_lka.to_string()),
            ("use_sca", self.use_sca.to_string()),
            ("use_mdcm", self.use_mdcm.to_string()),
            ("use_stripe", self.use_stripe.to_string()),
            ("use_square", self.use_square.to_string()),
            ("use_ffsc", self.use_ffsc.to_string()),
            ("use_mslkb", self.use_mslkb.to_string()),
            ("use_mscm_sca", self.use_mscm_sca.to_string()),
            ("use_msdab", self.use_msdab.to_string()),
            ("deep_supervision_levels", self.deep_supervision_levels.to_string()),
        ];
        e.drain(..).map(|(k, v)| (format!("model.{k}"), v)).collect()
    }

    /// `model.*` lines, one per field.
    pub fn to_text(&self) -> String {
        render(&self.entries())
    }

    /// Parses text holding only `model.*` keys; unset fields keep defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in parse_pairs(text)? {
            let rest = k.strip_prefix("model.").ok_or_else(|| Error::UnknownKey(k.clone()))?;
            c.set(rest, &v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let full = format!("train.{key}");
        let k = full.as_str();
        match key {
            "epochs" => self.epochs = value(k, v)?,
            "batch_size" => self.batch_size = value(k, v)?,
            "crop" => self.crop = value(k, v)?,
            "lr_init" => self.lr_init = value(k, v)?,
            "lr_min" => self.lr_min = value(k, v)?,
            "adam_beta1" => self.adam_beta1 = value(k, v)?,
            "adam_beta2" => self.adam_beta2 = value(k, v)?,
            "adam_eps" => self.adam_eps = value(k, v)?,
            "lambda_perceptual" => self.lambda_perceptual = value(k, v)?,
            "grad_accum_steps" => self.grad_accum_steps = value(k, v)?,
            "seed" => self.seed = value(k, v)?,
            "supervision_weights" => self.supervision_weights = array(k, v)?,
            "proxy_seed" => self.proxy_seed = value(k, v)?,
            "flips" => self.flips = flag(k, v)?,
            "checkpoint_every" => self.checkpoint_every = value(k, v)?,
            _ => return Err(Error::UnknownKey(full)),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("crop", self.crop.to_string()),
            ("lr_init", self.lr_init.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("lambda_perceptual", self.lambda_perceptual.to_string()),
            ("grad_accum_steps", self.grad_accum_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("supervision_weights", join(&self.supervision_weights)),
            ("proxy_seed", self.proxy_seed.to_string()),
            ("flips", self.flips.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect()
    }
}

impl SynthRanges {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let full = format!("synth.{key}");
        let k = full.as_str();
        match key {
            "period_min" => self.period.0 = value(k, v)?,
            "period_max" => self.period.1 = value(k, v)?,
            "rotation_max_deg" => self.rotation_max_deg = value(k, v)?,
            "perspective_max" => self.perspective_max = value(k, v)?,
            "blur_min" => self.blur.0 = value(k, v)?,
            "blur_max" => self.blur.1 = value(k, v)?,
            "cfa_stride_min" => self.cfa_stride.0 = value(k, v)?,
            "cfa_stride_max" => self.cfa_stride.1 = value(k, v)?,
            "gain_max_dev" => self.gain_max_dev = value(k, v)?,
            _ => return Err(Error::UnknownKey(full)),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("period_min", self.period.0.to_string()),
            ("period_max", self.period.1.to_string()),
            ("rotation_max_deg", self.rotation_max_deg.to_string()),
            ("perspective_max", self.perspective_max.to_string()),
            ("blur_min", self.blur.0.to_string()),
            ("blur_max", self.blur.1.to_string()),
            ("cfa_stride_min", self.cfa_stride.0.to_string()),
            ("cfa_stride_max", self.cfa_stride.1.to_string()),
            ("gain_max_dev", self.gain_max_dev.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("synth.{k}"), v))
        .collect()
    }
}

fn render(entries: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Everything a run is configured by.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthRanges,
}

impl RunConfig {
    /// Applies one fully qualified key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("model.") {
            self.model.set(rest, v)
        } else if let Some(rest) = key.strip_prefix("train.") {
            self.train.set(rest, v)
        } else if let Some(rest) = key.strip_prefix("synth.") {
            self.synth.set(rest, v)
        } else {
            Err(Error::UnknownKey(key.to_string()))
        }
    }

    /// Defaults overlaid with the keys of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = preset_text(name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}` (available: {})", PRESETS.join(", "))))?;
        Self::from_text(text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let m = self.model.size_multiple();
        if !self.train.crop.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "train.crop {} must be a multiple of {m}",
                self.train.crop
            )));
        }
        Ok(())
    }

    /// Every key with its effective value; parsing it back reproduces
    /// the configuration.
    pub fn to_text(&self) -> String {
        let mut all = self.model.entries();
        all.extend(self.train.entries());
        all.extend(self.synth.entries());
        render(&all)
    }

    /// Model configuration with the bottleneck kernel resolved from the
    /// training crop.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        self.model.with_crop(self.train.crop, self.train.crop)
    }
}
