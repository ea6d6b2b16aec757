//! Dataset directories: numbered PPM pairs plus a `manifest.tsv` that
//! records how every pair was made.

use std::fs;
use std::path::{Path, PathBuf};

use mznet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{quantize, read_ppm, write_ppm};
use crate::synth::{generate_pair, inject_misalignment, inspection_base, procedural_scene, SynthRanges};

pub const MANIFEST: &str = "manifest.tsv";
pub const INSPECTION_NOISE_AMP: f64 = 0.05;

const COLUMNS: [&str; 22] = [
    "index",
    "seed",
    "moire",
    "gt",
    "preset",
    "source",
    "display_period",
    "rotation_deg",
    "perspective_x",
    "perspective_y",
    "blur_sigma",
    "cfa_stride",
    "gain_r",
    "gain_g",
    "gain_b",
    "offset_dx",
    "offset_dy",
    "level",
    "noise_seed",
    "noise_amp",
    "brightest",
    "darkest",
];

/// Where clean images come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Clean PPM images from a directory.
    Natural,
    /// Generated scenes; no source directory needed.
    Procedural,
    /// Solid gray with per-pixel noise.
    Inspection,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Natural => "natural",
            Preset::Procedural => "procedural",
            Preset::Inspection => "inspection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "natural" => Some(Preset::Natural),
            "procedural" => Some(Preset::Procedural),
            "inspection" => Some(Preset::Inspection),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub preset: Preset,
    pub n: usize,
    pub seed: u64,
    pub ranges: SynthRanges,
    /// Maximum integer offset injected into each moiré image (0 = none).
    pub misalign: u32,
    /// Side of generated images (procedural and inspection presets).
    pub size: usize,
    pub clean_dir: Option<PathBuf>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            preset: Preset::Procedural,
            n: 8,
            seed: 0,
            ranges: SynthRanges::default(),
            misalign: 0,
            size: 128,
            clean_dir: None,
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub index: usize,
    pub seed: u64,
    pub moire: String,
    pub gt: String,
    pub preset: String,
    pub source: String,
    pub display_period: f64,
    pub rotation_deg: f64,
    pub perspective: (f64, f64),
    pub blur_sigma: f64,
    pub cfa_stride: usize,
    pub color_gain: [f64; 3],
    pub offset: Option<(f64, f64)>,
    /// Inspection preset: gray level, noise seed and amplitude, and the
    /// flat indices of the brightest and darkest clean pixels.
    pub inspection: Option<InspectionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectionRecord {
    pub level: f64,
    pub noise_seed: u64,
    pub noise_amp: f64,
    pub brightest: usize,
    pub darkest: usize,
}

fn na<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl ManifestRow {
    fn to_line(&self) -> String {
        let i = self.inspection.as_ref();
        [
            self.index.to_string(),
            self.seed.to_string(),
            self.moire.clone(),
            self.gt.clone(),
            self.preset.clone(),
            self.source.clone(),
            self.display_period.to_string(),
            self.rotation_deg.to_string(),
            self.perspective.0.to_string(),
            self.perspective.1.to_string(),
            self.blur_sigma.to_string(),
            self.cfa_stride.to_string(),
            self.color_gain[0].to_string(),
            self.color_gain[1].to_string(),
            self.color_gain[2].to_string(),
            na(self.offset.map(|o| o.0)),
            na(self.offset.map(|o| o.1)),
            na(i.map(|r| r.level)),
            na(i.map(|r| r.noise_seed)),
            na(i.map(|r| r.noise_amp)),
            na(i.map(|r| r.brightest)),
            na(i.map(|r| r.darkest)),
        ]
        .join("\t")
    }

    fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != COLUMNS.len() {
            return Err(Error::Manifest(format!(
                "expected {} columns, got {}",
                COLUMNS.len(),
                f.len()
            )));
        }
        fn num<T: std::str::FromStr>(s: &str, col: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Manifest(format!("bad {col} value `{s}`")))
        }
        fn opt<T: std::str::FromStr>(s: &str, col: &str) -> Result<Option<T>> {
            if s == "NA" {
                Ok(None)
            } else {
                num(s, col).map(Some)
            }
        }
        let offset = match (opt::<f64>(f[15], "offset_dx")?, opt::<f64>(f[16], "offset_dy")?) {
            (Some(dx), Some(dy)) => Some((dx, dy)),
            (None, None) => None,
            _ => return Err(Error::Manifest("offset columns must both be set or both NA".into())),
        };
        let inspection = match opt::<f64>(f[17], "level")? {
            None => None,
            Some(level) => Some(InspectionRecord {
                level,
                noise_seed: num(f[18], "noise_seed")?,
                noise_amp: num(f[19], "noise_amp")?,
                brightest: num(f[20], "brightest")?,
                darkest: num(f[21], "darkest")?,
            }),
        };
        Ok(Self {
            index: num(f[0], "index")?,
            seed: num(f[1], "seed")?,
            moire: f[2].to_string(),
            gt: f[3].to_string(),
            preset: f[4].to_string(),
            source: f[5].to_string(),
            display_period: num(f[6], "display_period")?,
            rotation_deg: num(f[7], "rotation_deg")?,
            perspective: (num(f[8], "perspective_x")?, num(f[9], "perspective_y")?),
            blur_sigma: num(f[10], "blur_sigma")?,
            cfa_stride: num(f[11], "cfa_stride")?,
            color_gain: [num(f[12], "gain_r")?, num(f[13], "gain_g")?, num(f[14], "gain_b")?],
            offset,
            inspection,
        })
    }
}

pub fn manifest_text(rows: &[ManifestRow]) -> String {
    let mut s = COLUMNS.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Manifest("empty manifest".into()))?;
    if header.split('\t').collect::<Vec<_>>() != COLUMNS {
        return Err(Error::Manifest("unexpected header".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(ManifestRow::parse).collect()
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)
}

/// Sorted `.ppm` files of a directory.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| x.eq_ignore_ascii_case("ppm"))
        {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Seed of pair `index` in a dataset seeded with `seed`.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

fn argmax_argmin(values: &[f64]) -> (usize, usize) {
    let mut hi = 0;
    let mut lo = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[hi] {
            hi = i;
        }
        if v < values[lo] {
            lo = i;
        }
    }
    (hi, lo)
}

/// Writes `n` pairs and the manifest into `out_dir`.
pub fn make_dataset(opts: &DatasetOptions, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    opts.ranges.validate()?;
    if opts.misalign as f64 > crate::synth::MAX_OFFSET {
        return Err(Error::Spec(format!("misalignment {} exceeds 16 pixels", opts.misalign)));
    }
    let sources = match opts.preset {
        Preset::Natural => {
            let dir = opts
                .clean_dir
                .as_deref()
                .ok_or_else(|| Error::Config("the natural preset needs a clean image directory".into()))?;
            let files = list_ppm(dir)?;
            if files.is_empty() {
                return Err(Error::Config(format!("no .ppm images in {}", dir.display())));
            }
            files
        }
        _ => Vec::new(),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(opts.n);
    for index in 0..opts.n {
        let seed = pair_seed(opts.seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inspection = None;
        let (clean, source) = match opts.preset {
            Preset::Natural => {
                let path = &sources[index % sources.len()];
                let name = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                (read_ppm(path)?, name)
            }
            Preset::Procedural => (procedural_scene(seed, opts.size, opts.size), "procedural".to_string()),
            Preset::Inspection => {
                let level = rng.gen_range(0.2..0.8);
                let noise_seed: u64 = rng.gen();
                let (img, noise) = inspection_base(level, INSPECTION_NOISE_AMP, noise_seed, opts.size, opts.size);
                let (brightest, darkest) = argmax_argmin(&noise);
                inspection = Some(InspectionRecord {
                    level,
                    noise_seed,
                    noise_amp: INSPECTION_NOISE_AMP,
                    brightest,
                    darkest,
                });
                (img, "inspection".to_string())
            }
        };
        let spec = opts.ranges.sample(seed);
        let mut pair = generate_pair(&clean, &spec)?;
        if opts.misalign > 0 {
            let m = opts.misalign as i64;
            let dx = rng.gen_range(-m..=m) as f64;
            let dy = rng.gen_range(-m..=m) as f64;
            pair = inject_misalignment(&pair, dx, dy)?;
        }
        let moire = format!("{index:05}_moire.ppm");
        let gt = format!("{index:05}_gt.ppm");
        write_ppm(&out_dir.join(&moire), &pair.moire)?;
        write_ppm(&out_dir.join(&gt), &pair.clean)?;
        rows.push(ManifestRow {
            index,
            seed,
            moire,
            gt,
            preset: opts.preset.name().to_string(),
            source,
            display_period: spec.display_period,
            rotation_deg: spec.rotation_deg,
            perspective: spec.perspective,
            blur_sigma: spec.blur_sigma,
            cfa_stride: spec.cfa_stride,
            color_gain: spec.color_gain,
            offset: pair.true_offset,
            inspection,
        });
    }
    let path = out_dir.join(MANIFEST);
    fs::write(&path, manifest_text(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// A loaded pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub moire: Tensor,
    pub gt: Tensor,
    pub offset: Option<(f64, f64)>,
}

/// Reads every pair listed in a dataset's manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let rows = read_manifest(dir)?;
    if rows.is_empty() {
        return Err(Error::Manifest(format!(
            "{} lists no pairs",
            dir.join(MANIFEST).display()
        )));
    }
    rows.iter()
        .map(|r| {
            let moire = read_ppm(&dir.join(&r.moire))?;
            let gt = read_ppm(&dir.join(&r.gt))?;
            if moire.shape() != gt.shape() {
                return Err(Error::Manifest(format!("pair {} has mismatched image sizes", r.index)));
            }
            Ok(Sample {
                id: format!("{:05}", r.index),
                moire,
                gt,
                offset: r.offset,
            })
        })
        .collect()
}

/// 8-bit round trip of an image, as stored in a dataset.
pub fn quantized(img: &Tensor) -> Tensor {
    img.map(|v| quantize(v) as f64 / 255.0)
}
