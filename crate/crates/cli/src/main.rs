//! `mznet` command-line tool: dataset synthesis, training, inference,
//! evaluation, cost reports and self-checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mznet::checkpoint::Checkpoint;
use mznet::config::{parse_override, RunConfig};
use mznet::cost::cost_report;
use mznet::dataset::{list_ppm, load_dataset, make_dataset, read_manifest, DatasetOptions, Preset};
use mznet::gradcheck::GradSuite;
use mznet::image::{read_ppm, write_ppm};
use mznet::metrics::MetricsReport;
use mznet::synth::estimate_translation;
use mznet::train::{run, Trainer};
use mznet::{Error, Model, ModelConfig, TlcSpec};

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CORRUPT: u8 = 4;

#[derive(Parser)]
#[command(name = "mznet", version, about = "Image demoiréing with MZNet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic (moiré, clean) pairs and a manifest.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Remove moiré from an image or a directory of images.
    Demoire(DemoireArgs),
    /// PSNR/SSIM of predictions against ground truth.
    Eval(EvalArgs),
    /// Parameter and MAC counts.
    Count(CountArgs),
    /// Finite-difference gradient checks of every block and a small network.
    Gradcheck(GradcheckArgs),
    /// Re-estimate each pair's translation and compare with the manifest.
    Aligncheck(AligncheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Natural,
    Procedural,
    Inspection,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Natural => Preset::Natural,
            PresetArg::Procedural => Preset::Procedural,
            PresetArg::Inspection => Preset::Inspection,
        }
    }
}

/// Configuration sources, applied in order: defaults, preset, file, overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Built-in preset (uhdm, fhdmi, tip2018, desk).
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    sources: SourceArgs,
}

/// Configuration file and overrides layered over a base configuration.
#[derive(Args)]
struct SourceArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr_init=2e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl SourceArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.overrides.is_empty()
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Failure> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for o in &self.overrides {
            let (k, v) = parse_override(o)?;
            cfg.set(&k, &v)?;
        }
        Ok(())
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.preset {
            Some(name) => RunConfig::preset(name)?,
            None => RunConfig::default(),
        };
        self.sources.apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clean PPM images (natural preset).
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PresetArg::Procedural)]
    preset: PresetArg,
    /// Largest random integer offset injected into each moiré image.
    #[arg(long, default_value_t = 0)]
    misalign: u32,
    /// Side of generated clean images (procedural and inspection presets).
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// `synth.*` keys; `--preset` here names the dataset kind.
    #[command(flatten)]
    config: SourceArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DemoireArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PPM image or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; files keep their names.
    #[arg(long)]
    out: PathBuf,
    /// Local channel-attention window in pixels (`N` or `HxW`), or `off`.
    #[arg(long, default_value = "off")]
    tlc: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// Also write the report as TSV.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    /// Input resolution as WIDTHxHEIGHT.
    #[arg(long, default_value = "3840x2160")]
    res: String,
    /// Print TSV rows instead of the table.
    #[arg(long)]
    tsv: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the network input in the end-to-end check.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Model keys for the end-to-end check; defaults to the tiny network.
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AligncheckArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 16)]
    radius: usize,
    /// Largest accepted residual in pixels.
    #[arg(long, default_value_t = 0.5)]
    tol: f64,
}

/// A failed command: message and exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) | Error::Spec(_) => EXIT_USAGE,
        Error::Io { .. } => EXIT_IO,
        Error::Image { .. } | Error::Checkpoint(_) | Error::Manifest(_) => EXIT_CORRUPT,
        _ => EXIT_CHECK,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::new(exit_code(&e), e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Demoire(a) => demoire(a),
        Command::Eval(a) => eval(a),
        Command::Count(a) => count(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Aligncheck(a) => aligncheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::default();
    a.config.apply(&mut cfg)?;
    let opts = DatasetOptions {
        preset: a.preset.into(),
        n: a.n,
        seed: a.seed,
        ranges: cfg.synth,
        misalign: a.misalign,
        size: a.size,
        clean_dir: a.clean_dir,
    };
    let rows = make_dataset(&opts, &a.out)?;
    println!("wrote {} pairs to {}", rows.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = a.config.load()?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::io(&a.out, e))?;
    let resolved = a.out.join("config.resolved");
    fs::write(&resolved, cfg.to_text()).map_err(|e| Failure::io(&resolved, e))?;
    let data = load_dataset(&a.data)?;
    let ckpt_path = a.out.join(mznet::train::CHECKPOINT_FILE);
    let mut trainer = if a.resume {
        Trainer::resume(&Checkpoint::load(&ckpt_path)?, cfg.train.clone(), &data)?
    } else {
        let model = Model::build(&cfg.resolved_model()?, cfg.train.seed)?;
        Trainer::new(model, cfg.train.clone(), &data)?
    };
    let total = trainer.total_steps();
    println!("training {} pairs for {total} steps", data.len());
    let spe = trainer.steps_per_epoch();
    run(&mut trainer, &a.out, |r| {
        if (r.step + 1) % spe == 0 {
            println!(
                "epoch {} step {} lr {:.3e} loss {:.5} train PSNR {:.2} dB",
                r.epoch,
                r.step + 1,
                r.lr,
                r.total,
                r.train_psnr
            );
        }
    })?;
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn parse_tlc(s: &str) -> Result<Option<TlcSpec>, Failure> {
    if s == "off" {
        return Ok(None);
    }
    let bad = || Failure::new(EXIT_USAGE, format!("--tlc expects `off`, `N` or `HxW`, got `{s}`"));
    let (h, w) = match s.split_once('x') {
        Some((h, w)) => (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?),
        None => {
            let n = s.parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok(Some(TlcSpec { window: (h, w) }))
}

fn demoire(a: DemoireArgs) -> Result<(), Failure> {
    let tlc = parse_tlc(&a.tlc)?;
    let model = Checkpoint::load(&a.ckpt)?.model()?;
    let inputs = if a.input.is_dir() {
        list_ppm(&a.input)?
    } else {
        vec![a.input.clone()]
    };
    fs::create_dir_all(&a.out).map_err(|e| Failure::io(&a.out, e))?;
    let mut skipped = 0;
    for path in &inputs {
        let img = match read_ppm(path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let out = model.infer_padded(&img, tlc)?;
        let name = path
            .file_name()
            .ok_or_else(|| Failure::new(EXIT_USAGE, "input has no file name"))?;
        write_ppm(&a.out.join(name), &out)?;
    }
    println!("processed {} of {} images", inputs.len() - skipped, inputs.len());
    if skipped > 0 {
        return Err(Failure::new(EXIT_IO, format!("{skipped} images could not be read")));
    }
    Ok(())
}

/// Ground-truth file for a prediction: the `_gt` counterpart of a
/// `_moire` name when present, otherwise the same name.
fn gt_for(pred: &Path, gt_dir: &Path) -> Option<PathBuf> {
    let name = pred.file_name()?.to_str()?;
    let alt = gt_dir.join(name.replace("_moire", "_gt"));
    if alt.exists() {
        return Some(alt);
    }
    let same = gt_dir.join(name);
    same.exists().then_some(same)
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let preds = list_ppm(&a.pred_dir)?;
    if preds.is_empty() {
        return Err(Failure::new(
            EXIT_USAGE,
            format!("no .ppm images in {}", a.pred_dir.display()),
        ));
    }
    let mut report = MetricsReport::default();
    for p in &preds {
        let gt = gt_for(p, &a.gt_dir).ok_or_else(|| {
            Failure::new(
                EXIT_IO,
                format!("no ground truth for {} in {}", p.display(), a.gt_dir.display()),
            )
        })?;
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        report.push(id, &read_ppm(p)?, &read_ppm(&gt)?)?;
    }
    print!("{}", report.to_table());
    if let Some(path) = &a.tsv {
        fs::write(path, report.to_tsv()).map_err(|e| Failure::io(path, e))?;
    }
    Ok(())
}

fn parse_res(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::new(EXIT_USAGE, format!("--res expects WIDTHxHEIGHT, got `{s}`"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn count(a: CountArgs) -> Result<(), Failure> {
    let (w, h) = parse_res(&a.res)?;
    let cfg = a.config.load()?;
    cfg.validate()?;
    let model = Model::build(&cfg.resolved_model()?, 0)?;
    let report = cost_report(&model, h, w)?;
    if a.tsv {
        print!("{}", report.to_tsv());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let model = if a.config.preset.is_none() && a.config.sources.is_empty() {
        ModelConfig::tiny()
    } else {
        a.config.load()?.model
    };
    let suite = GradSuite {
        trials: a.trials,
        seed: a.seed,
        tol: a.tol,
        model,
        model_size: a.size,
        ..GradSuite::default()
    };
    let report = suite.run()?;
    print!("{}", report.to_table());
    if !report.passed() {
        return Err(Failure::new(EXIT_CHECK, "gradient check failed"));
    }
    Ok(())
}

fn aligncheck(a: AligncheckArgs) -> Result<(), Failure> {
    let rows = read_manifest(&a.data)?;
    let mut worst: f64 = 0.0;
    println!(
        "{:>5} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "index", "true_dx", "true_dy", "est_dx", "est_dy", "residual"
    );
    for r in &rows {
        let moire = read_ppm(&a.data.join(&r.moire))?;
        let gt = read_ppm(&a.data.join(&r.gt))?;
        let t = estimate_translation(&gt, &moire, a.radius)?;
        let (tx, ty) = r.offset.unwrap_or((0.0, 0.0));
        let residual = (t.dx - tx).abs().max((t.dy - ty).abs());
        worst = worst.max(residual);
        println!(
            "{:>5} {tx:>8.2} {ty:>8.2} {:>8.2} {:>8.2} {residual:>9.3}",
            r.index, t.dx, t.dy
        );
    }
    println!("worst residual {worst:.3} px over {} pairs", rows.len());
    if worst > a.tol {
        return Err(Failure::new(
            EXIT_CHECK,
            format!("residual {worst:.3} px exceeds {}", a.tol),
        ));
    }
    Ok(())
}
