//! Config-driven entry points: dataset generation, training, evaluation,
//! alignment, bound audits and sample export.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{self, MeanShiftConfig};
use crate::data::{self, DataSpec, Dataset};
use crate::flow::FlowConfig;
use crate::nn::Module;
use crate::training::{self, ClassifierConfig, GridAveraged, Models, MonteCarloAveraged, Predictor, TrainConfig, TrainError};
use crate::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

const TAG_AUDIT: u64 = 21;
const TAG_EVAL: u64 = 22;
const TAG_EXPORT: u64 = 23;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Exit code 2.
    #[error("invalid config: {0}")]
    Config(String),
    /// Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSpec,
    /// Examples held out for validation.
    pub val_count: usize,
    pub split_seed: u64,
    /// Class-imbalance ratio applied to the training part.
    pub long_tail_rho: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSpec::TwoGlyph { range_deg: 45.0, n_per_class: 400, size: 16, seed: 0 }, val_count: 200, split_seed: 0, long_tail_rho: None }
    }
}

impl DataConfig {
    /// `(train, val)` datasets.
    pub fn load(&self) -> Result<(Dataset, Dataset), data::DataError> {
        let full = self.source.build()?;
        let (val, train) = full.split(self.val_count, self.split_seed);
        let train = match self.long_tail_rho {
            Some(rho) => data::make_long_tail(&train, rho, self.split_seed)?,
            None => train,
        };
        Ok((train, val))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub pairs: usize,
    pub grid: usize,
    /// Shifts are drawn uniformly from `±max_delta` per parameter.
    pub max_delta: f64,
    pub slack: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { pairs: 50, grid: 360, max_delta: 0.25, slack: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub mean_shift: MeanShiftConfig,
    /// Validation images aligned by `align`.
    pub align_images: usize,
    pub audit: AuditConfig,
    pub ekld_angles_deg: Vec<f64>,
    /// Flow draws averaged per prediction in `eval`.
    pub eval_samples: usize,
    pub tta_budget: usize,
    /// Grid points for deterministic averaging with one-parameter flows.
    pub grid_points: usize,
    pub export_image: usize,
    pub export_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            mean_shift: MeanShiftConfig::default(),
            align_images: 100,
            audit: AuditConfig::default(),
            ekld_angles_deg: vec![-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0],
            eval_samples: 30,
            tta_budget: 30,
            grid_points: 90,
            export_image: 0,
            export_samples: 1000,
        }
    }
}

/// The whole experiment; every field has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    /// Parses JSON, naming the offending field path on failure.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: String| CliError::Config(e);
        self.flow.validate().map_err(|e| bad(format!("flow: {e}")))?;
        self.train.validate().map_err(|e| bad(format!("train: {e}")))?;
        self.analysis.mean_shift.validate().map_err(|e| bad(format!("analysis.mean_shift: {e}")))?;
        if self.classifier.widths.is_empty() {
            return Err(bad("classifier.widths: at least one block is required".into()));
        }
        let a = &self.analysis;
        if a.eval_samples == 0 || a.tta_budget == 0 || a.grid_points == 0 || a.audit.grid == 0 {
            return Err(bad("analysis: sample counts and grid sizes must be at least 1".into()));
        }
        if let Some(rho) = self.data.long_tail_rho {
            if !(rho >= 1.0) {
                return Err(bad(format!("data.long_tail_rho: must be ≥ 1, got {rho}")));
            }
        }
        Ok(())
    }
}

fn tensor_to_nested(t: &Tensor) -> Value {
    fn go(shape: &[usize], values: &[f64]) -> Value {
        match shape.split_first() {
            None => Value::from(values[0]),
            Some((_, [])) => Value::from(values.to_vec()),
            Some((&n, rest)) => {
                let stride = rest.iter().product::<usize>();
                Value::Array((0..n).map(|i| go(rest, &values[i * stride..(i + 1) * stride])).collect())
            }
        }
    }
    go(t.shape(), t.values())
}

fn nested_into(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<(), String> {
    match shape.split_first() {
        None => out.push(v.as_f64().ok_or_else(|| format!("expected a number, found {v}"))?),
        Some((&n, rest)) => {
            let items = v.as_array().ok_or_else(|| format!("expected a list of {n}"))?;
            if items.len() != n {
                return Err(format!("expected {n} entries, found {}", items.len()));
            }
            for item in items {
                nested_into(item, rest, out)?;
            }
        }
    }
    Ok(())
}

/// Trained models plus the config that built them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub image_shape: [usize; 3],
    pub classes: usize,
    /// Parameter arrays in module order.
    pub flow: Vec<Value>,
    pub classifier: Vec<Value>,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, models: &Models) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            image_shape: models.classifier.image_shape(),
            classes: models.classifier.classes(),
            flow: models.flow.params().into_iter().map(tensor_to_nested).collect(),
            classifier: models.classifier.params().into_iter().map(tensor_to_nested).collect(),
        }
    }

    pub fn models(&self) -> Result<Models, CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(runtime(format!("checkpoint schema {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        let c = &self.config;
        let mut m = Models::new(&c.flow, &c.classifier, self.image_shape, self.classes, c.train.seed).map_err(runtime)?;
        fill(&mut m.flow, &self.flow, "flow")?;
        fill(&mut m.classifier, &self.classifier, "classifier")?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))
    }
}

fn fill(module: &mut impl Module, arrays: &[Value], name: &str) -> Result<(), CliError> {
    let params = module.params_mut();
    if params.len() != arrays.len() {
        return Err(runtime(format!("checkpoint {name}: {} arrays for {} parameters", arrays.len(), params.len())));
    }
    for (i, (p, v)) in params.into_iter().zip(arrays).enumerate() {
        let mut out = Vec::with_capacity(p.len());
        nested_into(v, &p.shape().to_vec(), &mut out).map_err(|e| runtime(format!("checkpoint {name}[{i}]: {e}")))?;
        p.values_mut().copy_from_slice(&out);
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "flowinv", about = "Instance-wise learned augmentation with conditional normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON); defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`; its config is used unless `--config` is given.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the train/validation split as IDX files.
    MakeData(Common),
    /// Trains classifier and augmenter; writes metrics and a checkpoint.
    Train(Common),
    /// Accuracy (plain, averaged, rejection-sampled) and eKLD curves.
    Eval(WithCheckpoint),
    /// Mean-shift alignment of validation images.
    Align(WithCheckpoint),
    /// Total-variation invariance audits (one- or two-parameter flows).
    Audit(WithCheckpoint),
    /// Exports flow samples for one validation image.
    ExportDist(WithCheckpoint),
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOWINV_LOG", "info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                other => other,
            })
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn resolve(common: &Common, base: Option<ExperimentConfig>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&common.config, base) {
        (None, Some(b)) => b,
        (path, _) => read_config(path.as_deref())?,
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out).map_err(|e| runtime(format!("{}: {e}", common.out.display())))?;
    write_json(&common.out.join("resolved-config.json"), &cfg)?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes()).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    Ok(b.build().map_err(runtime)?.install(f))
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::MakeData(c) => {
            let cfg = resolve(&c, None)?;
            with_threads(c.threads, || make_data(&cfg, &c.out))?
        }
        Command::Train(c) => {
            let cfg = resolve(&c, None)?;
            with_threads(c.threads, || train(&cfg, &c.out))?
        }
        Command::Eval(w) => checkpointed(&w, eval),
        Command::Align(w) => checkpointed(&w, align),
        Command::Audit(w) => checkpointed(&w, audit),
        Command::ExportDist(w) => checkpointed(&w, export_dist),
    }
}

fn checkpointed(w: &WithCheckpoint, f: fn(&ExperimentConfig, &Models, &Dataset, &Path) -> Result<(), CliError>) -> Result<(), CliError> {
    let ck = Checkpoint::read(&w.checkpoint)?;
    let models = ck.models()?;
    let cfg = resolve(&w.common, Some(ck.config.clone()))?;
    let (_, val) = cfg.data.load().map_err(runtime)?;
    if val.image_shape() != ck.image_shape {
        return Err(runtime(format!("validation images {:?} do not match the checkpoint's {:?}", val.image_shape(), ck.image_shape)));
    }
    with_threads(w.common.threads, || f(&cfg, &models, &val, &w.common.out))?
}

fn make_data(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let (train, val) = cfg.data.load().map_err(runtime)?;
    data::write_idx(&out.join("train-images.idx"), &out.join("train-labels.idx"), &train).map_err(runtime)?;
    data::write_idx(&out.join("val-images.idx"), &out.join("val-labels.idx"), &val).map_err(runtime)?;
    log::info!("wrote {} training and {} validation images", train.len(), val.len());
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let (train, val) = cfg.data.load().map_err(runtime)?;
    let models = Models::new(&cfg.flow, &cfg.classifier, train.image_shape(), train.classes, cfg.train.seed).map_err(|e| match e {
        TrainError::Config(m) => CliError::Config(m),
        other => runtime(other),
    })?;
    let result = training::fit_models(models, &train, &val, &cfg.train);
    let fit = match result {
        Ok(f) => f,
        Err(TrainError::NonFinite(dump)) => {
            write_json(&out.join("nan-dump.json"), &*dump)?;
            return Err(runtime(format!("non-finite loss at epoch {}, step {}; state written to nan-dump.json", dump.epoch, dump.step)));
        }
        Err(e) => return Err(runtime(e)),
    };
    training::write_metrics_csv(&out.join("metrics.csv"), &fit.history).map_err(runtime)?;
    write_json(&out.join("checkpoint.json"), &Checkpoint::new(cfg, &fit.models))
}

/// Deterministic averaged predictor: a density-weighted grid for
/// one-parameter flows, seeded Monte Carlo otherwise.
fn averaged_predictor<'a>(cfg: &ExperimentConfig, models: &'a Models) -> Box<dyn Predictor + 'a> {
    if models.flow.dim() == 1 {
        Box::new(GridAveraged { models, points: cfg.analysis.grid_points })
    } else {
        Box::new(MonteCarloAveraged { models, samples: cfg.analysis.eval_samples, seed: cfg.train.seed })
    }
}

fn eval(cfg: &ExperimentConfig, models: &Models, val: &Dataset, out: &Path) -> Result<(), CliError> {
    let a = &cfg.analysis;
    let seed = cfg.train.seed;
    let plain = training::accuracy(|_, im| models.classifier.probs(im), val);
    let averaged = training::accuracy(
        |i, im| {
            let mut rng = training::substream(seed, TAG_EVAL, 0, i as u64);
            training::classify_averaged(models, im, a.eval_samples, &mut rng).expect("checked image shape")
        },
        val,
    );
    let tta_failures = std::sync::atomic::AtomicUsize::new(0);
    let tta = training::accuracy(
        |i, im| {
            let mut rng = training::substream(seed, TAG_EVAL, 1, i as u64);
            training::predict_tta(models, im, a.tta_budget, &mut rng).unwrap_or_else(|_| {
                tta_failures.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                models.classifier.probs(im)
            })
        },
        val,
    );
    let failures = tta_failures.into_inner();
    if failures > 0 {
        log::warn!("rejection sampling found no admissible draw for {failures} images; used the plain prediction");
    }
    write_text(&out.join("metrics.csv"), &format!("method,accuracy\nplain,{plain}\naveraged,{averaged}\ntta,{tta}\n"))?;
    let predictor = averaged_predictor(cfg, models);
    let report = analysis::ekld(&*predictor, val, &a.ekld_angles_deg).map_err(runtime)?;
    report.write_csv(&out.join("ekld.csv")).map_err(runtime)?;
    log::info!("accuracy: plain {plain:.4}, averaged {averaged:.4}, tta {tta:.4}");
    Ok(())
}

fn align(cfg: &ExperimentConfig, models: &Models, val: &Dataset, out: &Path) -> Result<(), CliError> {
    let n = cfg.analysis.align_images.min(val.len());
    let results = analysis::align_all(&models.flow, &val.images[..n], &cfg.analysis.mean_shift, cfg.train.seed).map_err(runtime)?;
    let k = models.flow.dim();
    let ts: Vec<String> = (1..=k).map(|i| format!("t{i}")).collect();
    let mut summary = format!("index,label,true_angle_deg,{},last_mean_norm\n", ts.join(","));
    let mut traj = format!("index,iteration,{}\n", ts.join(","));
    for (i, r) in results.iter().enumerate() {
        let angle = val.true_angles.as_ref().map_or("NA".to_string(), |a| a[i].to_string());
        let t: Vec<String> = r.t_final.iter().map(f64::to_string).collect();
        let norm = r.last_mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        summary += &format!("{i},{},{angle},{},{norm}\n", val.labels[i], t.join(","));
        for (it, step) in r.trajectory.iter().enumerate() {
            traj += &format!("{i},{it},{}\n", step.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        }
    }
    write_text(&out.join("alignment.csv"), &summary)?;
    write_text(&out.join("trajectories.csv"), &traj)
}

#[derive(Serialize)]
struct AuditRecord {
    image: usize,
    class: usize,
    delta: Vec<f64>,
    #[serde(flatten)]
    audit: analysis::InvarianceAudit,
    holds: bool,
}

fn audit(cfg: &ExperimentConfig, models: &Models, val: &Dataset, out: &Path) -> Result<(), CliError> {
    let a = &cfg.analysis.audit;
    if val.is_empty() {
        return Err(runtime("no validation images to audit"));
    }
    let mut rng = training::substream(cfg.train.seed, TAG_AUDIT, 0, 0);
    let k = models.flow.dim();
    let mut records = Vec::with_capacity(a.pairs);
    for _ in 0..a.pairs {
        let image = rng.random_range(0..val.len());
        let delta: Vec<f64> = (0..k).map(|_| rng.random_range(-a.max_delta..=a.max_delta)).collect();
        let class = val.labels[image];
        let audit = analysis::invariance_bound(&models.flow, &models.classifier, &val.images[image], &delta, class, a.grid).map_err(runtime)?;
        let holds = audit.observed_err <= audit.bound + a.slack;
        records.push(AuditRecord { image, class, delta, audit, holds });
    }
    let held = records.iter().filter(|r| r.holds).count();
    log::info!("bound held in {held} of {} audits", records.len());
    write_json(&out.join("audit.json"), &records)
}

fn export_dist(cfg: &ExperimentConfig, models: &Models, val: &Dataset, out: &Path) -> Result<(), CliError> {
    let a = &cfg.analysis;
    let image = val.images.get(a.export_image).ok_or_else(|| runtime(format!("export_image {} out of range for {} images", a.export_image, val.len())))?;
    let mut rng = training::substream(cfg.train.seed, TAG_EXPORT, a.export_image as u64, 0);
    analysis::distribution_export(&models.flow, image, a.export_samples, &mut rng, &out.join("samples.csv")).map_err(runtime)?;
    Ok(())
}
