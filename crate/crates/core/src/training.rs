//! Joint training of a classifier and its conditional augmenter.
//!
//! The classifier sees images warped by transforms drawn from the flow; the
//! flow receives the same cross-entropy gradient through the reparameterised
//! draw plus `alpha · mean log p`, which rewards entropy. `alpha` is either
//! fixed or steered by a PID controller towards a target entropy.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::flow::{ConditionalFlow, FlowConfig, FlowError, FlowSample, SampleMode};
use crate::nn::{Conv2d, Linear, Module, Optimizer, OptimizerKind};
use crate::numerics::NumericsError;
use crate::transforms::{self, affine_var, warp_var};
use crate::{Graph, Tensor, Var};

/// Examples per gradient shard. Fixed so results do not depend on the
/// number of worker threads.
pub const SHARD: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}\n{0}", epoch = .0.epoch, step = .0.step)]
    NonFinite(Box<DiagnosticDump>),
    #[error("no accepted samples after {draws} draws; the flow looks degenerate")]
    Degenerate { draws: usize },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("dataset mismatch: {0}")]
    Data(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Transform(#[from] crate::transforms::TransformError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// State captured when training hits a non-finite value.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticDump {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub classifier_param_norm: f64,
    pub flow_param_norm: f64,
    pub history: Vec<EpochMetrics>,
}

impl fmt::Display for DiagnosticDump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serde_json::to_string_pretty(self).map_err(|_| fmt::Error)?)
    }
}

/// Deterministic RNG substream for `(tag, a, b)` under `seed`.
pub fn substream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(a.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ b);
    rng
}

const TAG_SHUFFLE: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_VAL: u64 = 3;
const TAG_INIT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Channels of the conv blocks; each block halves the resolution.
    pub widths: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { widths: vec![8, 16, 32] }
    }
}

/// Conv3×3 + ReLU + 2×2 max-pool blocks followed by a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub blocks: Vec<Conv2d>,
    pub head: Linear,
    image_shape: [usize; 3],
    classes: usize,
}

impl Classifier {
    pub fn new(cfg: &ClassifierConfig, image_shape: [usize; 3], classes: usize, rng: &mut impl Rng) -> Result<Self, TrainError> {
        if cfg.widths.is_empty() || classes < 2 {
            return Err(TrainError::Config("classifier needs at least one block and two classes".into()));
        }
        let (mut h, mut w, mut c) = (image_shape[0], image_shape[1], image_shape[2]);
        let mut blocks = Vec::new();
        for &width in &cfg.widths {
            if h < 2 || w < 2 {
                return Err(TrainError::Config(format!("{} pooling blocks do not fit a {image_shape:?} image", cfg.widths.len())));
            }
            blocks.push(Conv2d::new(c, width, 3, 1, 1, rng));
            (h, w, c) = (h / 2, w / 2, width);
        }
        Ok(Self { blocks, head: Linear::new(h * w * c, classes, 1.0, rng), image_shape, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    /// Class log-probabilities `[K]`.
    pub fn log_probs_var<'g>(&self, g: &'g Graph, image: Var<'g>) -> Var<'g> {
        let mut x = image;
        for b in &self.blocks {
            x = b.forward(g, x).relu().max_pool2d(2);
        }
        let n = x.numel();
        self.head.forward(g, x.reshape(&[n])).log_softmax()
    }

    pub fn probs(&self, image: &Tensor) -> Vec<f64> {
        let g = Graph::new();
        let lp = self.log_probs_var(&g, g.constant(image.shape().to_vec(), image.values().to_vec()));
        lp.to_vec().into_iter().map(f64::exp).collect()
    }
}

impl Module for Classifier {
    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.blocks.iter().flat_map(Module::params).collect();
        p.extend(self.head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(Module::params_mut).collect();
        p.extend(self.head.params_mut());
        p
    }
}

/// Anything mapping an image to a class-probability vector.
pub trait Predictor: Sync {
    fn predict(&self, image: &Tensor) -> Vec<f64>;
}

impl Predictor for Classifier {
    fn predict(&self, image: &Tensor) -> Vec<f64> {
        self.probs(image)
    }
}

/// Classifier paired with its augmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub classifier: Classifier,
    pub flow: ConditionalFlow,
}

impl Models {
    pub fn new(flow: &FlowConfig, classifier: &ClassifierConfig, image_shape: [usize; 3], classes: usize, seed: u64) -> Result<Self, TrainError> {
        let mut rng = substream(seed, TAG_INIT, 0, 0);
        let classifier = Classifier::new(classifier, image_shape, classes, &mut rng)?;
        let flow = ConditionalFlow::new(flow, image_shape, &mut rng)?;
        Ok(Self { classifier, flow })
    }

    /// Log-probabilities of the classifier on `image` warped by `t`.
    fn warped_log_probs<'g>(&self, g: &'g Graph, image: Var<'g>, t: Var<'g>) -> Var<'g> {
        let a = affine_var(t, self.flow.spec());
        self.classifier.log_probs_var(g, warp_var(image, a))
    }

    fn warp_value(&self, image: &Tensor, s: &FlowSample) -> Tensor {
        let a = self.flow.spec().affine(&s.t).expect("flow samples are valid transforms");
        transforms::warp(image, &a)
    }
}

/// How training images are augmented after warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Augment {
    /// Draws from the learned conditional flow.
    Flow,
    /// Parameters uniform in `±range` per coordinate, shared by all inputs.
    FixedUniform { range: f64 },
    None,
}

/// Entropy-regularisation weight schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EntropyControl {
    Fixed { alpha: f64 },
    Pid(PidConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub target_entropy: f64,
    /// Smoothing constant of the input and output moving averages.
    pub smoothing: f64,
    /// `alpha_raw` is clamped to `±windup`.
    pub windup: f64,
    pub initial_alpha: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self { kp: 0.01, ki: 0.01, kd: 0.0, target_entropy: 2.0, smoothing: 0.9, windup: 1.0, initial_alpha: 0.0 }
    }
}

/// Velocity-form PID on a smoothed entropy measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub cfg: PidConfig,
    pub ema_in: Option<f64>,
    pub prev_error: Option<f64>,
    pub prev_prev_error: Option<f64>,
    pub alpha_raw: f64,
    /// Smoothed, non-negative output.
    pub alpha: f64,
}

impl PidState {
    pub fn new(cfg: PidConfig) -> Self {
        let a = cfg.initial_alpha.max(0.0);
        Self { cfg, ema_in: None, prev_error: None, prev_prev_error: None, alpha_raw: a, alpha: a }
    }

    /// Feeds one entropy measurement and returns the new `alpha`.
    pub fn update(&mut self, measured: f64) -> f64 {
        let b = self.cfg.smoothing;
        let smoothed = match self.ema_in {
            Some(prev) => b * prev + (1.0 - b) * measured,
            None => measured,
        };
        self.ema_in = Some(smoothed);
        let e = self.cfg.target_entropy - smoothed;
        let e1 = self.prev_error.unwrap_or(e);
        let e2 = self.prev_prev_error.unwrap_or(e1);
        let delta = self.cfg.kp * (e - e1) + self.cfg.ki * e + self.cfg.kd * (e - 2.0 * e1 + e2);
        self.alpha_raw = (self.alpha_raw + delta).clamp(-self.cfg.windup, self.cfg.windup);
        self.prev_prev_error = Some(e1);
        self.prev_error = Some(e);
        self.alpha = b * self.alpha + (1.0 - b) * self.alpha_raw.max(0.0);
        self.alpha
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs that train the classifier alone on clean images.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub classifier_lr: f64,
    pub augmenter_lr: f64,
    pub optimizer: OptimizerKind,
    /// Augmentations drawn per example and step.
    pub n_train_samples: usize,
    /// Flow draws averaged per validation image; 0 classifies clean images.
    pub val_samples: usize,
    pub entropy: EntropyControl,
    pub augment: Augment,
    pub freeze_classifier: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 5,
            batch_size: 64,
            classifier_lr: 1e-2,
            augmenter_lr: 1e-3,
            optimizer: OptimizerKind::default(),
            n_train_samples: 1,
            val_samples: 4,
            entropy: EntropyControl::Pid(PidConfig::default()),
            augment: Augment::Flow,
            freeze_classifier: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return bad(format!("need 0 < epochs and warmup_epochs ≤ epochs, got {} and {}", self.epochs, self.warmup_epochs));
        }
        if self.n_train_samples == 0 || self.batch_size == 0 {
            return bad("n_train_samples and batch_size must be at least 1".into());
        }
        if !(self.classifier_lr >= 0.0 && self.augmenter_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        match &self.entropy {
            EntropyControl::Fixed { alpha } if !(*alpha >= 0.0) => bad(format!("alpha must be ≥ 0, got {alpha}")),
            EntropyControl::Pid(p) if !(0.0..1.0).contains(&p.smoothing) || !(p.windup > 0.0) => {
                bad("PID smoothing must lie in [0, 1) and windup must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub aug_loss: f64,
    pub entropy: f64,
    pub alpha: f64,
    pub val_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,aug_loss,entropy,alpha,val_acc";

pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io { path: path.to_path_buf(), source };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "{METRICS_HEADER}").map_err(io)?;
    for m in history {
        writeln!(out, "{},{},{},{},{},{}", m.epoch, m.train_loss, m.aug_loss, m.entropy, m.alpha, m.val_acc).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Per-example loss pieces on a graph: summed cross-entropy and summed
/// log-density over the drawn augmentations.
struct ExampleTerms<'g> {
    ce_sum: Var<'g>,
    logp_sum: Option<Var<'g>>,
    logps: Vec<f64>,
}

fn example_terms<'g>(g: &'g Graph, m: &Models, image: &Tensor, label: usize, n: usize, augment: &Augment, rng: &mut impl Rng) -> ExampleTerms<'g> {
    assert!(label < m.classifier.classes(), "label {label} out of range for {} classes", m.classifier.classes());
    let x = g.constant(image.shape().to_vec(), image.values().to_vec());
    let k = m.flow.dim();
    match augment {
        Augment::None => ExampleTerms { ce_sum: m.classifier.log_probs_var(g, x).at(label).neg(), logp_sum: None, logps: Vec::new() },
        Augment::FixedUniform { range } => {
            let mut ces = Vec::with_capacity(n);
            for _ in 0..n {
                let t: Vec<f64> = (0..k).map(|_| rng.random_range(-range..=*range)).collect();
                ces.push(m.warped_log_probs(g, x, g.constant(vec![k], t)).at(label).neg());
            }
            ExampleTerms { ce_sum: g.concat(&ces).sum(), logp_sum: None, logps: Vec::new() }
        }
        Augment::Flow => {
            let e = m.flow.embed_var(g, x);
            let (mut ces, mut lps) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let d = m.flow.sample_var(g, e, rng, SampleMode::Train);
                ces.push(m.warped_log_probs(g, x, d.t).at(label).neg());
                lps.push(d.logp);
            }
            let logps = lps.iter().map(Var::item).collect();
            ExampleTerms { ce_sum: g.concat(&ces).sum(), logp_sum: Some(g.concat(&lps).sum()), logps }
        }
    }
}

/// Mean cross-entropy of the classifier over `n` augmentations per example.
pub fn classifier_loss<'g>(g: &'g Graph, m: &Models, batch: &[(&Tensor, usize)], n: usize, augment: &Augment, rng: &mut impl Rng) -> Var<'g> {
    augmenter_loss(g, m, batch, n, 0.0, augment, rng).0
}

/// `(classifier_loss, classifier_loss + alpha · mean log p, drawn log p values)`.
pub fn augmenter_loss<'g>(
    g: &'g Graph,
    m: &Models,
    batch: &[(&Tensor, usize)],
    n: usize,
    alpha: f64,
    augment: &Augment,
    rng: &mut impl Rng,
) -> (Var<'g>, Var<'g>, Vec<f64>) {
    assert!(n >= 1 && !batch.is_empty(), "need a non-empty batch and at least one sample");
    let draws = if matches!(augment, Augment::None) { 1 } else { n };
    let denom = (batch.len() * draws) as f64;
    let terms: Vec<ExampleTerms<'g>> = batch.iter().map(|(im, l)| example_terms(g, m, im, *l, draws, augment, rng)).collect();
    let ce = g.concat(&terms.iter().map(|t| t.ce_sum).collect::<Vec<_>>()).sum().mul_scalar(1.0 / denom);
    let lp: Vec<Var<'g>> = terms.iter().filter_map(|t| t.logp_sum).collect();
    let total = if lp.is_empty() || alpha == 0.0 { ce } else { ce + g.concat(&lp).sum().mul_scalar(alpha / denom) };
    (ce, total, terms.into_iter().flat_map(|t| t.logps).collect())
}

/// Averages class probabilities over `n` eval-mode flow draws.
pub fn classify_averaged(m: &Models, image: &Tensor, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>, TrainError> {
    if n == 0 {
        return Err(TrainError::NoSamples);
    }
    let e = m.flow.embed(image)?;
    let samples = m.flow.sample_n(&e, n, rng, SampleMode::Eval);
    Ok(average_over(m, image, &samples))
}

fn average_over(m: &Models, image: &Tensor, samples: &[FlowSample]) -> Vec<f64> {
    let mut acc = vec![0.0; m.classifier.classes()];
    for s in samples {
        for (a, p) in acc.iter_mut().zip(m.classifier.probs(&m.warp_value(image, s))) {
            *a += p;
        }
    }
    acc.iter_mut().for_each(|a| *a /= samples.len() as f64);
    acc
}

/// Midpoints of a uniform grid over `(-1, 1)`.
pub fn grid_points(n: usize) -> Vec<f64> {
    (0..n).map(|i| -1.0 + (i as f64 + 0.5) * 2.0 / n as f64).collect()
}

/// Deterministic average over a midpoint grid weighted by the flow density;
/// one-parameter flows only.
pub fn classify_grid(m: &Models, image: &Tensor, points: usize) -> Result<Vec<f64>, TrainError> {
    if m.flow.dim() != 1 {
        return Err(TrainError::Config(format!("grid averaging needs a one-parameter flow, got {}", m.flow.dim())));
    }
    let e = m.flow.embed(image)?;
    let spec = *m.flow.spec();
    let mut acc = vec![0.0; m.classifier.classes()];
    let mut total = 0.0;
    for t in grid_points(points) {
        let w = m.flow.log_prob_raw(&[t], &e)?.exp();
        let a = spec.affine(&spec.params(vec![t])?)?;
        for (s, p) in acc.iter_mut().zip(m.classifier.probs(&transforms::warp(image, &a))) {
            *s += w * p;
        }
        total += w;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

/// Draws until `budget` samples with `‖t.raw‖₂ < 1` are accepted, giving up
/// after `100 · budget` draws.
pub fn tta_rejection_sample(flow: &ConditionalFlow, image: &Tensor, budget: usize, rng: &mut impl Rng) -> Result<Vec<FlowSample>, TrainError> {
    let e = flow.embed(image)?;
    Ok(rejection_sample(|| flow.sample(&e, rng, SampleMode::Eval), budget)?.0)
}

/// Rejection loop behind [`tta_rejection_sample`] over any sample source;
/// also returns the number of draws made.
pub fn rejection_sample(mut draw: impl FnMut() -> FlowSample, budget: usize) -> Result<(Vec<FlowSample>, usize), TrainError> {
    if budget == 0 {
        return Err(TrainError::NoSamples);
    }
    let cap = 100 * budget;
    let mut accepted = Vec::with_capacity(budget);
    let mut draws = 0;
    while draws < cap && accepted.len() < budget {
        let s = draw();
        draws += 1;
        if s.t.norm() < 1.0 {
            accepted.push(s);
        }
    }
    if accepted.is_empty() {
        return Err(TrainError::Degenerate { draws: cap });
    }
    Ok((accepted, draws))
}

/// Test-time prediction averaged over rejection-sampled augmentations.
pub fn predict_tta(m: &Models, image: &Tensor, budget: usize, rng: &mut impl Rng) -> Result<Vec<f64>, TrainError> {
    let samples = tta_rejection_sample(&m.flow, image, budget, rng)?;
    Ok(average_over(m, image, &samples))
}

/// Deterministic grid-averaged predictor.
pub struct GridAveraged<'a> {
    pub models: &'a Models,
    pub points: usize,
}

impl Predictor for GridAveraged<'_> {
    fn predict(&self, image: &Tensor) -> Vec<f64> {
        classify_grid(self.models, image, self.points).expect("grid prediction on a one-parameter flow")
    }
}

/// Monte Carlo averaged predictor with a fixed seed per call.
pub struct MonteCarloAveraged<'a> {
    pub models: &'a Models,
    pub samples: usize,
    pub seed: u64,
}

impl Predictor for MonteCarloAveraged<'_> {
    fn predict(&self, image: &Tensor) -> Vec<f64> {
        let mut rng = substream(self.seed, TAG_VAL, 0, 0);
        classify_averaged(self.models, image, self.samples, &mut rng).expect("valid image")
    }
}

pub fn argmax(p: &[f64]) -> usize {
    (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0)
}

/// Fraction of `ds` whose top class matches the label.
pub fn accuracy(predict: impl Fn(usize, &Tensor) -> Vec<f64> + Sync, ds: &Dataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let hits: usize = (0..ds.len()).into_par_iter().map(|i| usize::from(argmax(&predict(i, &ds.images[i])) == ds.labels[i])).sum();
    hits as f64 / ds.len() as f64
}

fn param_norm(m: &impl Module) -> f64 {
    m.params().iter().flat_map(|p| p.values()).map(|v| v * v).sum::<f64>().sqrt()
}

type Grads = Vec<Option<Vec<f64>>>;

struct ShardOut {
    ce: f64,
    total: f64,
    logps: Vec<f64>,
    clf: Grads,
    flow: Grads,
}

fn add_into(acc: &mut Grads, part: Grads) {
    if acc.is_empty() {
        *acc = part;
        return;
    }
    for (a, p) in acc.iter_mut().zip(part) {
        match (a.as_mut(), p) {
            (Some(a), Some(p)) => a.iter_mut().zip(p).for_each(|(x, y)| *x += y),
            (None, Some(p)) => *a = Some(p),
            _ => {}
        }
    }
}

struct Step<'a> {
    m: &'a Models,
    batch: &'a [usize],
    epoch: usize,
    warm: bool,
    alpha: f64,
}

fn run_step(step: &Step<'_>, ds: &Dataset, cfg: &TrainConfig) -> Result<ShardOut, NumericsError> {
    let m = step.m;
    let augment = if step.warm { Augment::None } else { cfg.augment.clone() };
    let draws = if matches!(augment, Augment::None) { 1 } else { cfg.n_train_samples };
    let scale = 1.0 / (step.batch.len() * draws) as f64;
    let shards: Vec<Result<ShardOut, NumericsError>> = step
        .batch
        .par_chunks(SHARD)
        .map(|shard| {
            let g = Graph::new();
            let mut ce = Vec::new();
            let mut lp = Vec::new();
            let mut logps = Vec::new();
            for &i in shard {
                let mut rng = substream(cfg.seed, TAG_TRAIN, step.epoch as u64, i as u64);
                let t = example_terms(&g, m, &ds.images[i], ds.labels[i], draws, &augment, &mut rng);
                ce.push(t.ce_sum);
                lp.extend(t.logp_sum);
                logps.extend(t.logps);
            }
            let ce_part = g.concat(&ce).sum().mul_scalar(scale);
            let total = if lp.is_empty() || step.alpha == 0.0 { ce_part } else { ce_part + g.concat(&lp).sum().mul_scalar(step.alpha * scale) };
            let (ce_v, total_v) = (ce_part.item(), total.item());
            let grads = g.backward(total)?;
            let collect = |ps: Vec<&Tensor>| ps.iter().map(|p| grads.of(p).map(<[f64]>::to_vec)).collect::<Grads>();
            Ok(ShardOut {
                ce: ce_v,
                total: total_v,
                logps,
                clf: collect(m.classifier.params()),
                flow: if step.warm { Vec::new() } else { collect(m.flow.params()) },
            })
        })
        .collect();
    let mut out = ShardOut { ce: 0.0, total: 0.0, logps: Vec::new(), clf: Vec::new(), flow: Vec::new() };
    for s in shards {
        let s = s?;
        out.ce += s.ce;
        out.total += s.total;
        out.logps.extend(s.logps);
        add_into(&mut out.clf, s.clf);
        add_into(&mut out.flow, s.flow);
    }
    Ok(out)
}

fn apply(module: &mut impl Module, grads: Grads, opt: &mut Optimizer, group: usize) {
    if grads.is_empty() {
        return;
    }
    for (p, g) in module.params_mut().into_iter().zip(grads) {
        p.set_grad(g);
    }
    opt.step(group, module.params_mut());
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub models: Models,
    pub history: Vec<EpochMetrics>,
    /// Smoothed batch entropy after every post-warmup step.
    pub entropy_trace: Vec<f64>,
    pub pid: Option<PidState>,
}

/// Builds fresh models from `cfg.seed` and trains them.
pub fn fit(train: &Dataset, val: &Dataset, flow: &FlowConfig, classifier: &ClassifierConfig, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    let models = Models::new(flow, classifier, train.image_shape(), train.classes, cfg.seed)?;
    fit_models(models, train, val, cfg)
}

/// Trains existing models; the result is a pure function of the inputs.
pub fn fit_models(mut models: Models, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Data("empty training set".into()));
    }
    models.flow.check_image(&train.image_shape())?;
    if train.classes > models.classifier.classes() || val.classes > models.classifier.classes() {
        return Err(TrainError::Data(format!("{} classes in the data, classifier has {}", train.classes.max(val.classes), models.classifier.classes())));
    }
    models.classifier.set_trainable(!cfg.freeze_classifier);
    let mut opt = Optimizer::new(cfg.optimizer, &[cfg.classifier_lr, cfg.augmenter_lr]);
    let mut pid = match &cfg.entropy {
        EntropyControl::Pid(p) => Some(PidState::new(p.clone())),
        EntropyControl::Fixed { .. } => None,
    };
    let fixed_alpha = match cfg.entropy {
        EntropyControl::Fixed { alpha } => alpha,
        EntropyControl::Pid(_) => 0.0,
    };
    let learns_flow = matches!(cfg.augment, Augment::Flow);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut entropy_trace = Vec::new();
    let mut smoothed_entropy: Option<f64> = None;
    let mut step_no = 0;
    for epoch in 0..cfg.epochs {
        let warm = epoch < cfg.warmup_epochs;
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut substream(cfg.seed, TAG_SHUFFLE, epoch as u64, 0));
        let (mut ce_sum, mut total_sum, mut ent_sum, mut batches, mut ent_batches) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let alpha = pid.as_ref().map_or(fixed_alpha, |p| p.alpha);
            let step = Step { m: &models, batch, epoch, warm, alpha };
            let dump = |loss: f64, entropy: f64, m: &Models, history: &[EpochMetrics]| {
                TrainError::NonFinite(Box::new(DiagnosticDump {
                    epoch,
                    step: step_no,
                    loss,
                    alpha,
                    entropy,
                    classifier_param_norm: param_norm(&m.classifier),
                    flow_param_norm: param_norm(&m.flow),
                    history: history.to_vec(),
                }))
            };
            let out = match run_step(&step, train, cfg) {
                Ok(o) => o,
                Err(NumericsError::NonFinite { .. }) => return Err(dump(f64::NAN, f64::NAN, &models, &history)),
                Err(e) => return Err(e.into()),
            };
            let entropy = if out.logps.is_empty() { f64::NAN } else { -out.logps.iter().sum::<f64>() / out.logps.len() as f64 };
            if !out.total.is_finite() || (!warm && learns_flow && !entropy.is_finite()) {
                return Err(dump(out.total, entropy, &models, &history));
            }
            if !cfg.freeze_classifier {
                apply(&mut models.classifier, out.clf, &mut opt, 0);
            }
            if !warm && learns_flow {
                apply(&mut models.flow, out.flow, &mut opt, 1);
                if let Some(p) = pid.as_mut() {
                    p.update(entropy);
                }
                let s = match smoothed_entropy {
                    Some(prev) => 0.9 * prev + 0.1 * entropy,
                    None => entropy,
                };
                smoothed_entropy = Some(s);
                entropy_trace.push(s);
                ent_sum += entropy;
                ent_batches += 1;
            }
            ce_sum += out.ce;
            total_sum += out.total;
            batches += 1;
            step_no += 1;
        }
        let val_acc = validation_accuracy(&models, val, cfg, warm, epoch);
        let m = EpochMetrics {
            epoch,
            train_loss: ce_sum / batches as f64,
            aug_loss: total_sum / batches as f64,
            entropy: if ent_batches > 0 { ent_sum / ent_batches as f64 } else { f64::NAN },
            alpha: pid.as_ref().map_or(fixed_alpha, |p| p.alpha),
            val_acc,
        };
        log::info!(
            "epoch {:>3}: loss {:.4} aug {:.4} entropy {:.4} alpha {:.4} val_acc {:.4}",
            m.epoch,
            m.train_loss,
            m.aug_loss,
            m.entropy,
            m.alpha,
            m.val_acc
        );
        history.push(m);
    }
    models.classifier.set_trainable(true);
    Ok(FitResult { models, history, entropy_trace, pid })
}

fn validation_accuracy(m: &Models, val: &Dataset, cfg: &TrainConfig, warm: bool, epoch: usize) -> f64 {
    if warm || cfg.val_samples == 0 || !matches!(cfg.augment, Augment::Flow) {
        accuracy(|_, im| m.classifier.probs(im), val)
    } else {
        accuracy(
            |i, im| {
                let mut rng = substream(cfg.seed, TAG_VAL, epoch as u64, i as u64);
                classify_averaged(m, im, cfg.val_samples, &mut rng).expect("validated image shape")
            },
            val,
        )
    }
}

#[cfg(test)]
mod tests;
