//! Command implementations behind the `pwinr` binary.
//!
//! Every command writes into a caller-named location and, for training, a run
//! manifest recording the resolved configuration, input hashes and timings.
//! Set `PWINR_DETERMINISTIC=1` to zero the timings so reruns are byte-identical
//! down to the manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use pwinr::data_io::{compression_report, export_image, generate_phantom, CompressionReport, ImageFormat, PhantomSpec, PlaneWaveStack, StackEncoding};
use pwinr::metrics::{evaluate_stack, MetricsReport, RoiSpec, Section, Source};
use pwinr::model::{weight_file_size, ModelParams};
use pwinr::render::{render, PsfKernel};
use pwinr::trainer::{checkpoint_path, train_from, training_views, TrainConfig, TrainState, ViewSelection};

pub const DETERMINISTIC_ENV: &str = "PWINR_DETERMINISTIC";
pub const WEIGHTS_FILE: &str = "model.pwin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_FILE: &str = "loss.csv";

/// Bad flag values found after clap parsing; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 0 success, 1 I/O or data error, 2 usage, 3 numerical failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<pwinr::Error>() {
        Some(pwinr::Error::NonFinite { .. } | pwinr::Error::NonFiniteLoss { .. }) => 3,
        _ => 1,
    }
}

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_stack(path: &Path) -> Result<PlaneWaveStack> {
    PlaneWaveStack::load(path).with_context(|| format!("loading stack {}", path.display()))
}

fn load_weights(path: &Path) -> Result<ModelParams<f32>> {
    ModelParams::load_weights(path).with_context(|| format!("loading weights {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- phantom

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    /// Phantom spec file; the bundled 64x64x8 phantom when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output stack file.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_phantom(args: &PhantomArgs) -> Result<PlaneWaveStack> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
            PhantomSpec::parse(&text).with_context(|| format!("parsing spec {}", path.display()))?
        }
        None => PhantomSpec::bundled(),
    };
    let stack = generate_phantom(&spec, args.seed)?;
    stack.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(stack)
}

// ---------------------------------------------------------------- train

/// Training flags shared by `train` and `sweep`. Unset flags fall back to the
/// config file, then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// TOML file with any subset of the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden-layer width.
    #[arg(long)]
    pub width: Option<usize>,
    /// Number of hidden layers; the skip goes into layer `layers / 2 + 1`.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Positional-encoding frequencies L.
    #[arg(long)]
    pub embedding: Option<usize>,
    #[arg(long)]
    pub stripes: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub final_learning_rate: Option<f64>,
    /// Loss weight of the SSIM term.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl TrainFlags {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.layers.is_some() || self.width.is_some() || self.embedding.is_some() {
            let layers = self.layers.unwrap_or(cfg.model.num_layers);
            let skip = if self.layers.is_some() { layers / 2 + 1 } else { cfg.model.skip_layer };
            cfg.model.num_layers = layers;
            cfg.model.skip_layer = skip;
            cfg.model.width = self.width.unwrap_or(cfg.model.width);
            cfg.model.embedding_size = self.embedding.unwrap_or(cfg.model.embedding_size);
        }
        if let Some(v) = self.stripes {
            cfg.stripes_per_image = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.final_learning_rate {
            cfg.final_learning_rate = v;
        }
        if let Some(v) = self.lambda {
            cfg.loss.lambda = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = Some(v);
        }
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

/// `all` or a positive view count.
pub fn parse_views(s: &str) -> Result<ViewSelection, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(ViewSelection::All);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(ViewSelection::Count(n)),
        _ => Err(format!("expected `all` or a positive view count, got `{s}`")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stack: PathBuf,
    /// Output directory for weights, manifest and loss log.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of uniformly spaced training views, or `all`.
    #[arg(long, value_parser = parse_views)]
    pub views: Option<ViewSelection>,
    /// Exclude the angle closest to 0 degrees from training.
    #[arg(long)]
    pub holdout_orthogonal: bool,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl InputFile {
    pub fn describe(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
            bytes: fs::metadata(path)?.len(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub train_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub deterministic: bool,
    pub seed: u64,
    pub config: TrainConfig,
    pub inputs: Vec<InputFile>,
    pub training_indices: Vec<usize>,
    pub training_angles_deg: Vec<f32>,
    pub stripes: usize,
    pub parameter_count: usize,
    pub weight_bytes: usize,
    pub iterations_completed: usize,
    pub timings: Timings,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }
}

/// Training indices recorded in a manifest file.
pub fn manifest_training_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let list = value["training_indices"]
        .as_array()
        .with_context(|| format!("{} has no training_indices", path.display()))?;
    list.iter()
        .map(|v| v.as_u64().map(|n| n as usize).context("training index is not an integer"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub losses: Vec<f64>,
    pub weights_path: PathBuf,
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut cfg = args.flags.resolve()?;
    if let Some(v) = &args.views {
        cfg.views = v.clone();
    }
    cfg.holdout_orthogonal |= args.holdout_orthogonal;
    train_into(&args.stack, &args.out, cfg, args.resume, started)
}

fn train_into(stack_path: &Path, out: &Path, cfg: TrainConfig, resume: bool, started: Instant) -> Result<TrainOutcome> {
    let stack = load_stack(stack_path)?;
    training_views(&stack, &cfg).map_err(|e| UsageError(e.to_string()))?;
    create_dir(out)?;

    let state = if resume && checkpoint_path(out).exists() {
        Some(TrainState::<f32>::load_checkpoint(checkpoint_path(out)).context("loading checkpoint")?)
    } else {
        None
    };
    let train_started = Instant::now();
    let (params, report) = train_from::<f32>(&stack, &cfg, state, Some(out))?;
    let train_secs = train_started.elapsed().as_secs_f64();

    let weights_path = out.join(WEIGHTS_FILE);
    let weight_bytes = params
        .save_weights(&weights_path)
        .with_context(|| format!("writing {}", weights_path.display()))?;
    write(&out.join(LOSS_FILE), loss_csv(&report.losses))?;

    let deterministic = deterministic_mode();
    let manifest = RunManifest {
        tool: "pwinr",
        version: env!("CARGO_PKG_VERSION"),
        command: "train",
        deterministic,
        seed: cfg.seed,
        training_angles_deg: report.training_views.iter().map(|&i| stack.angles_deg()[i]).collect(),
        training_indices: report.training_views.clone(),
        config: cfg,
        inputs: vec![InputFile::describe(stack_path)?],
        stripes: report.stripes,
        parameter_count: report.parameter_count,
        weight_bytes,
        iterations_completed: report.losses.len(),
        timings: if deterministic {
            Timings { train_secs: 0.0, total_secs: 0.0 }
        } else {
            Timings {
                train_secs,
                total_secs: started.elapsed().as_secs_f64(),
            }
        },
    };
    write(&out.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(TrainOutcome {
        manifest,
        losses: report.losses,
        weights_path,
    })
}

// ---------------------------------------------------------------- infer

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    /// Intermediate image straight from the network.
    O,
    /// Intermediate image rendered through the PSF.
    OPrime,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Steering angle in degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub angle: f64,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    /// Output image; `.pgm` (8-bit) or `.png`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Which::OPrime)]
    pub which: Which,
}

/// Normalised `[0, 1]` image for `which` at `angle_deg`.
pub fn infer_image(params: &ModelParams<f32>, angle_deg: f64, height: usize, width: usize, which: Which) -> Result<pwinr::DenseArray<f64>> {
    if height == 0 || width == 0 {
        bail!(UsageError("height and width must be positive".into()));
    }
    let o = params.predict_image(height, width, angle_deg)?.cast::<f64>();
    Ok(match which {
        Which::O => o,
        Which::OPrime => render(&o, &PsfKernel::standard())?,
    })
}

pub fn cmd_infer(args: &InferArgs) -> Result<pwinr::DenseArray<f64>> {
    let params = load_weights(&args.weights)?;
    let format = ImageFormat::from_path(&args.out)
        .ok_or_else(|| UsageError(format!("unknown image extension in {}", args.out.display())))?;
    let img = infer_image(&params, args.angle, args.height, args.width, args.which)?;
    export_image(&img, &args.out, format).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(img)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub stack: PathBuf,
    /// ROI file; whole-image metrics only when omitted.
    #[arg(long)]
    pub roi: Option<PathBuf>,
    /// Manifest with the training indices; defaults to the one beside the
    /// weights. Without one every angle counts as trained.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for metrics.csv and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let params = load_weights(&args.weights)?;
    let stack = load_stack(&args.stack)?;
    let roi = match &args.roi {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading ROI file {}", path.display()))?;
            RoiSpec::parse(&text).with_context(|| format!("parsing ROI file {}", path.display()))?
        }
        None => RoiSpec::default(),
    };
    let manifest = args
        .manifest
        .clone()
        .or_else(|| args.weights.parent().map(|d| d.join(MANIFEST_FILE)).filter(|p| p.exists()));
    let training = match manifest {
        Some(path) => manifest_training_indices(&path)?,
        None => (0..stack.angle_count()).collect(),
    };
    let report = evaluate_stack(&params, &stack, &roi, &PsfKernel::standard(), &training)?;
    create_dir(&args.out)?;
    write(&args.out.join("metrics.csv"), report.to_csv())?;
    write(&args.out.join("metrics.json"), report.aggregate_json())?;
    Ok(report)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub stack: PathBuf,
    /// View counts, e.g. `14,25,38,74`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub counts: Vec<usize>,
    #[arg(long)]
    pub roi: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub count: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

/// Mean and std of one whole-image metric of `o'` over every angle.
fn all_angle_stats(report: &MetricsReport, metric: &str) -> (f64, f64) {
    let values: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.source == Source::Rendered && r.metric == metric && r.region.is_empty())
        .map(|r| r.value)
        .collect();
    pwinr::metrics::aggregate(&values)
}

pub fn sweep_summary_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("views,ssim_mean,ssim_std,psnr_mean,psnr_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.count, r.ssim_mean, r.ssim_std, r.psnr_mean, r.psnr_std
        ));
    }
    out
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    let counts = &args.counts;
    if counts.is_empty() || counts.contains(&0) {
        bail!(UsageError("view counts must be positive".into()));
    }
    let base = args.flags.resolve()?;
    create_dir(&args.out)?;
    let mut rows = Vec::new();
    for &count in counts {
        let started = Instant::now();
        let dir = args.out.join(format!("views_{count}"));
        let cfg = TrainConfig {
            views: ViewSelection::Count(count),
            ..base.clone()
        };
        let outcome = train_into(&args.stack, &dir, cfg, false, started)?;
        let report = cmd_eval(&EvalArgs {
            weights: outcome.weights_path.clone(),
            stack: args.stack.clone(),
            roi: args.roi.clone(),
            manifest: Some(dir.join(MANIFEST_FILE)),
            out: dir.clone(),
        })?;
        let (ssim_mean, ssim_std) = all_angle_stats(&report, "ssim");
        let (psnr_mean, psnr_std) = all_angle_stats(&report, "psnr");
        rows.push(SweepRow {
            count,
            ssim_mean,
            ssim_std,
            psnr_mean,
            psnr_std,
        });
    }
    write(&args.out.join("summary.csv"), sweep_summary_csv(&rows))?;
    Ok(rows)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncodingFlag {
    Float32,
    Uint8,
}

impl From<EncodingFlag> for StackEncoding {
    fn from(e: EncodingFlag) -> Self {
        match e {
            EncodingFlag::Float32 => StackEncoding::Float32,
            EncodingFlag::Uint8 => StackEncoding::Uint8,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Weight file whose size is the model side of the ratio.
    #[arg(long, conflicts_with = "model_bytes")]
    pub weights: Option<PathBuf>,
    /// Stack whose raw image payload is the data side of the ratio.
    #[arg(long, conflicts_with = "stack_bytes")]
    pub stack: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EncodingFlag::Float32)]
    pub encoding: EncodingFlag,
    /// Explicit model size in bytes instead of a weight file.
    #[arg(long)]
    pub model_bytes: Option<u64>,
    /// Explicit data size in bytes instead of a stack.
    #[arg(long)]
    pub stack_bytes: Option<u64>,
}

pub fn cmd_report(args: &ReportArgs) -> Result<CompressionReport> {
    let model_bytes = match (&args.weights, args.model_bytes) {
        (Some(path), _) => fs::metadata(path).with_context(|| format!("reading {}", path.display()))?.len(),
        (None, Some(n)) => n,
        (None, None) => bail!(UsageError("give --weights or --model-bytes".into())),
    };
    if model_bytes == 0 {
        bail!(UsageError("model size must be positive".into()));
    }
    let report = match (&args.stack, args.stack_bytes) {
        (Some(path), _) => {
            let stack = load_stack(path)?;
            compression_report(model_bytes, &stack, args.encoding.into())
        }
        (None, Some(n)) if n > 0 => CompressionReport::from_sizes(model_bytes, n),
        (None, _) => bail!(UsageError("give --stack or a positive --stack-bytes".into())),
    };
    Ok(report)
}

/// Size the default architecture's weight file would have.
pub fn default_weight_file_size() -> usize {
    weight_file_size(&pwinr::model::Architecture::default())
}

/// Mean SSIM of `o'` for a section, as recorded in `report`.
pub fn section_ssim(report: &MetricsReport, section: Section) -> Option<f64> {
    report.mean_of(section, Source::Rendered, "ssim")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_parse_all_and_counts() {
        assert_eq!(parse_views("all"), Ok(ViewSelection::All));
        assert_eq!(parse_views("ALL"), Ok(ViewSelection::All));
        assert_eq!(parse_views("15"), Ok(ViewSelection::Count(15)));
        assert!(parse_views("0").is_err());
        assert!(parse_views("-3").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "iterations = 50\nseed = 9\n[model]\nwidth = 32\n").unwrap();
        let flags = TrainFlags {
            config: Some(path),
            seed: Some(4),
            layers: Some(6),
            ..Default::default()
        };
        let cfg = flags.resolve().unwrap();
        assert_eq!(cfg.iterations, 50);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model.width, 32);
        assert_eq!((cfg.model.num_layers, cfg.model.skip_layer), (6, 4));
    }

    #[test]
    fn invalid_flags_are_usage_errors() {
        let flags = TrainFlags {
            lambda: Some(2.0),
            ..Default::default()
        };
        assert_eq!(exit_code(&flags.resolve().unwrap_err()), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "iterations = \"many\"\n").unwrap();
        let flags = TrainFlags {
            config: Some(path),
            ..Default::default()
        };
        assert_eq!(exit_code(&flags.resolve().unwrap_err()), 2);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let nan = anyhow::Error::new(pwinr::Error::NonFiniteLoss {
            iteration: 3,
            angle: 1,
            stripe: 0,
        });
        assert_eq!(exit_code(&nan), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("disk full")), 1);
        assert_eq!(exit_code(&anyhow::Error::new(UsageError("bad".into()))), 2);
    }

    #[test]
    fn loss_log_is_one_based() {
        assert_eq!(loss_csv(&[0.5, 0.25]), "iteration,loss\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn sweep_summary_layout() {
        let rows = [SweepRow {
            count: 4,
            ssim_mean: 0.5,
            ssim_std: 0.1,
            psnr_mean: 20.0,
            psnr_std: 1.0,
        }];
        assert_eq!(
            sweep_summary_csv(&rows),
            "views,ssim_mean,ssim_std,psnr_mean,psnr_std\n4,0.5,0.1,20,1\n"
        );
    }
}
