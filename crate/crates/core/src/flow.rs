//! Image-conditional coupling flow over bounded transform parameters.
//!
//! A pose-embedding CNN maps the image to a 32-vector `e`. A linear
//! projection of `e` parameterises a Gaussian-mixture base; affine coupling
//! layers whose conditioners also see `e` reshape the base sample, and a
//! final `tanh` bounds it to `(-1, 1)^k`.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, Linear, Mlp, Module};
use crate::transforms::{TransformError, TransformParams, TransformSpec};
use crate::{Graph, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Coupling log-scales pass through `LOG_SCALE_BOUND · tanh(s / LOG_SCALE_BOUND)`.
pub const LOG_SCALE_BOUND: f64 = 5.0;
/// Inputs to `atanh` are clamped to this magnitude.
pub const ATANH_CLAMP: f64 = 1.0 - 1e-7;
const SCALE_FLOOR: f64 = 1e-4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FlowError {
    #[error("image shape {got:?} does not match the configured {expected:?}")]
    ImageShape { expected: [usize; 3], got: Vec<usize> },
    #[error("transform coordinate {index} = {value} is outside the open interval (-1, 1)")]
    Boundary { index: usize, value: f64 },
    #[error("expected a {expected}-dimensional vector, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("entropy estimate needs at least one sample")]
    EmptySamples,
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("embedding contains non-finite values")]
    NonFiniteEmbedding,
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub transform: TransformSpec,
    pub layers: usize,
    /// Width of both conditioner hidden layers.
    pub hidden: usize,
    pub modes: usize,
    /// Gumbel-softmax temperature for training-mode draws.
    pub temperature: f64,
    pub embed_widths: Vec<usize>,
    pub embed_dim: usize,
    /// Multiplier on conditioner and base-projection weights at init.
    pub init_scale: f64,
    /// Initial base standard deviation (set through the scale bias).
    pub base_init_sigma: f64,
    /// Initial base locations are spread evenly over `±base_loc_spread`.
    pub base_loc_spread: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            transform: TransformSpec::default(),
            layers: 4,
            hidden: 32,
            modes: 1,
            temperature: 0.05,
            embed_widths: vec![16, 32, 64, 64],
            embed_dim: 32,
            init_scale: 0.01,
            base_init_sigma: 1.0,
            base_loc_spread: 0.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::Config(m.to_string()));
        if self.modes == 0 {
            return bad("modes must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.embed_widths.is_empty() || self.embed_widths.contains(&0) {
            return bad("embed_widths must be non-empty and positive");
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return bad("embed_dim and hidden must be positive");
        }
        if !(self.base_init_sigma > SCALE_FLOOR) {
            return bad("base_init_sigma must exceed the scale floor");
        }
        if !self.init_scale.is_finite() || !self.base_loc_spread.is_finite() {
            return bad("init_scale and base_loc_spread must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Gumbel-softmax relaxed mode weights.
    Train,
    /// Hard Gumbel-max mode choice.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, FlowError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteEmbedding);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn var<'g>(&self, g: &'g Graph) -> Var<'g> {
        g.constant(vec![self.0.len()], self.0.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub t: TransformParams,
    /// Log-density of `t` in nats.
    pub logp: f64,
    /// `Σ log(1 - t_i²)`, the log-Jacobian of the final squashing.
    pub tanh_log_det: f64,
}

/// A differentiable draw living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Draw<'g> {
    pub z0: Var<'g>,
    pub t: Var<'g>,
    pub logp: Var<'g>,
    pub tanh_log_det: Var<'g>,
}

/// Strided CNN followed by a global max pool and a linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEmbedder {
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}

impl PoseEmbedder {
    pub fn new(channels: usize, widths: &[usize], dim: usize, rng: &mut impl Rng) -> Self {
        let mut cin = channels;
        let convs = widths
            .iter()
            .map(|&w| {
                let c = Conv2d::new(cin, w, 3, 2, 1, rng);
                cin = w;
                c
            })
            .collect();
        Self { convs, head: Linear::new(cin, dim, 1.0, rng) }
    }

    pub fn forward<'g>(&self, g: &'g Graph, image: Var<'g>) -> Var<'g> {
        let mut x = image;
        for conv in &self.convs {
            x = conv.forward(g, x).relu();
        }
        self.head.forward(g, x.global_max_pool())
    }
}

impl Module for PoseEmbedder {
    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.convs.iter().flat_map(Module::params).collect();
        p.extend(self.head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.convs.iter_mut().flat_map(Module::params_mut).collect();
        p.extend(self.head.params_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalFlow {
    cfg: FlowConfig,
    image_shape: [usize; 3],
    pub embedder: PoseEmbedder,
    /// Embedding → `[logits (M), locations (M·k), raw scales (M·k)]`.
    pub base: Linear,
    pub couplings: Vec<Mlp>,
}

fn range(a: usize, b: usize) -> Vec<usize> {
    (a..b).collect()
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `log(1 - tanh(x)²)` summed, computed without cancellation.
fn tanh_log_det<'g>(x: Var<'g>) -> Var<'g> {
    (x.mul_scalar(-2.0).softplus() + x).neg().add_scalar(std::f64::consts::LN_2).mul_scalar(2.0).sum()
}

impl ConditionalFlow {
    pub fn new(cfg: &FlowConfig, image_shape: [usize; 3], rng: &mut impl Rng) -> Result<Self, FlowError> {
        cfg.validate()?;
        let k = cfg.transform.dim();
        let m = cfg.modes;
        let embedder = PoseEmbedder::new(image_shape[2], &cfg.embed_widths, cfg.embed_dim, rng);
        let mut base = Linear::new(cfg.embed_dim, m * (1 + 2 * k), cfg.init_scale, rng);
        {
            let bias = base.bias.values_mut();
            for i in 0..m {
                let loc = if m > 1 { cfg.base_loc_spread * (-1.0 + 2.0 * i as f64 / (m - 1) as f64) } else { 0.0 };
                for j in 0..k {
                    bias[m + i * k + j] = loc;
                    bias[m + m * k + i * k + j] = inverse_softplus(cfg.base_init_sigma - SCALE_FLOOR);
                }
            }
        }
        let d = k / 2;
        let sizes = [d + cfg.embed_dim, cfg.hidden, cfg.hidden, 2 * (k - d)];
        let couplings = (0..cfg.layers).map(|_| Mlp::new(&sizes, cfg.init_scale, rng)).collect();
        Ok(Self { cfg: cfg.clone(), image_shape, embedder, base, couplings })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &TransformSpec {
        &self.cfg.transform
    }

    pub fn dim(&self) -> usize {
        self.cfg.transform.dim()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<(), FlowError> {
        if shape != self.image_shape {
            return Err(FlowError::ImageShape { expected: self.image_shape, got: shape.to_vec() });
        }
        Ok(())
    }

    pub fn embed_var<'g>(&self, g: &'g Graph, image: Var<'g>) -> Var<'g> {
        assert_eq!(image.shape(), self.image_shape, "flow embedder: wrong image shape");
        self.embedder.forward(g, image)
    }

    pub fn embed(&self, image: &Tensor) -> Result<Embedding, FlowError> {
        self.check_image(image.shape())?;
        let g = Graph::new();
        let x = g.constant(image.shape().to_vec(), image.values().to_vec());
        Embedding::new(self.embed_var(&g, x).to_vec())
    }

    fn base_parts<'g>(&self, g: &'g Graph, e: Var<'g>) -> (Var<'g>, Var<'g>, Var<'g>) {
        let (m, k) = (self.cfg.modes, self.dim());
        let proj = self.base.forward(g, e);
        let logits = proj.gather(&range(0, m), &[m]);
        let locs = proj.gather(&range(m, m + m * k), &[m, k]);
        let scales = proj.gather(&range(m + m * k, m + 2 * m * k), &[m, k]).softplus().add_scalar(SCALE_FLOOR);
        (logits, locs, scales)
    }

    fn mixture_log_density<'g>(&self, z: Var<'g>, parts: (Var<'g>, Var<'g>, Var<'g>)) -> Var<'g> {
        let (logits, locs, scales) = parts;
        let (m, k) = (self.cfg.modes, self.dim());
        let diff = (z.broadcast_to(&[m, k]) - locs) / scales;
        let comp = (diff.square().mul_scalar(-0.5) - scales.ln()).sum_last().add_scalar(-0.5 * k as f64 * LN_2PI);
        (comp + logits.log_softmax()).logsumexp(0)
    }

    /// Exact mixture log-density of a base point.
    pub fn base_log_prob_var<'g>(&self, g: &'g Graph, z0: Var<'g>, e: Var<'g>) -> Var<'g> {
        self.mixture_log_density(z0, self.base_parts(g, e))
    }

    /// Base draw `(z0, log p0)`. Consumes `modes` Gumbel variates then `k`
    /// standard normals in both modes, sharing the normal noise across
    /// mixture components.
    pub fn base_sample_var<'g>(&self, g: &'g Graph, e: Var<'g>, rng: &mut impl Rng, mode: SampleMode) -> (Var<'g>, Var<'g>) {
        let (m, k) = (self.cfg.modes, self.dim());
        let parts = self.base_parts(g, e);
        let (logits, locs, scales) = parts;
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
        let noise: Vec<f64> = (0..m).map(|_| gumbel.sample(rng)).collect();
        let eps: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let comps = locs + scales * g.constant(vec![k], eps);
        match mode {
            SampleMode::Train => {
                // The relaxed point can fall between separated modes, where the
                // mixture density is vanishingly small; its density is instead
                // the w-weighted mean of the exact density at every component's
                // own draw, which is exact whenever w is one-hot.
                let w = (logits + g.constant(vec![m], noise)).mul_scalar(1.0 / self.cfg.temperature).softmax();
                let z0 = w.reshape(&[1, m]).matmul(comps).reshape(&[k]);
                let at_comps: Vec<Var<'g>> = (0..m).map(|i| self.mixture_log_density(comps.row(i), parts)).collect();
                (z0, (w * g.concat(&at_comps)).sum())
            }
            SampleMode::Eval => {
                let lv = logits.value();
                let pick = (0..m).max_by(|&a, &b| (lv[a] + noise[a]).total_cmp(&(lv[b] + noise[b]))).expect("modes ≥ 1");
                let z0 = comps.row(pick);
                (z0, self.mixture_log_density(z0, parts))
            }
        }
    }

    fn coupling<'g>(&self, layer: usize, g: &'g Graph, x: Var<'g>, e: Var<'g>, inverse: bool) -> (Var<'g>, Var<'g>) {
        let k = self.dim();
        let d = k / 2;
        let a = k - d;
        let passive = (d > 0).then(|| x.gather(&range(0, d), &[d]));
        let active = x.gather(&range(d, k), &[a]);
        let input = match passive {
            Some(p) => g.concat(&[p, e]),
            None => e,
        };
        let out = self.couplings[layer].forward(g, input);
        let s = out.gather(&range(0, a), &[a]).soft_clamp(LOG_SCALE_BOUND);
        let shift = out.gather(&range(a, 2 * a), &[a]);
        let moved = if inverse { (active - shift) * s.neg().exp() } else { active * s.exp() + shift };
        let y = match passive {
            Some(p) => g.concat(&[p, moved]),
            None => moved,
        };
        (y, s.sum())
    }

    /// Reversals sit between layers; an odd count gets one more at the end
    /// so outputs keep the base coordinate order.
    fn reversals(&self) -> usize {
        self.couplings.len().saturating_sub(1)
    }

    fn reverse<'g>(&self, x: Var<'g>) -> Var<'g> {
        let k = self.dim();
        x.gather(&(0..k).rev().collect::<Vec<_>>(), &[k])
    }

    /// Pushes a base point through the couplings and the squashing.
    pub fn forward_var<'g>(&self, g: &'g Graph, z0: Var<'g>, logp0: Var<'g>, e: Var<'g>) -> Draw<'g> {
        let mut x = z0;
        let mut logp = logp0;
        for layer in 0..self.couplings.len() {
            if layer > 0 {
                x = self.reverse(x);
            }
            let (y, ld) = self.coupling(layer, g, x, e, false);
            x = y;
            logp = logp - ld;
        }
        if self.reversals() % 2 == 1 {
            x = self.reverse(x);
        }
        let tld = tanh_log_det(x);
        Draw { z0, t: x.tanh(), logp: logp - tld, tanh_log_det: tld }
    }

    pub fn sample_var<'g>(&self, g: &'g Graph, e: Var<'g>, rng: &mut impl Rng, mode: SampleMode) -> Draw<'g> {
        let (z0, logp0) = self.base_sample_var(g, e, rng, mode);
        self.forward_var(g, z0, logp0, e)
    }

    /// Inverts the flow at `t` (all `|t_i| < 1`), returning the base point
    /// and the log-density of `t`.
    pub fn inverse_var<'g>(&self, g: &'g Graph, t: Var<'g>, e: Var<'g>) -> (Var<'g>, Var<'g>) {
        let tv = t.value();
        let t = if tv.iter().any(|v| v.abs() > ATANH_CLAMP) {
            let factors: Vec<f64> = tv.iter().map(|v| if v.abs() > ATANH_CLAMP { ATANH_CLAMP / v.abs() } else { 1.0 }).collect();
            t * g.constant(vec![factors.len()], factors)
        } else {
            t
        };
        let mut x = t.atanh();
        let mut log_det = tanh_log_det(x);
        if self.reversals() % 2 == 1 {
            x = self.reverse(x);
        }
        for layer in (0..self.couplings.len()).rev() {
            let (y, ld) = self.coupling(layer, g, x, e, true);
            x = y;
            log_det = log_det + ld;
            if layer > 0 {
                x = self.reverse(x);
            }
        }
        let logp0 = self.base_log_prob_var(g, x, e);
        (x, logp0 - log_det)
    }

    pub fn log_prob_var<'g>(&self, g: &'g Graph, t: Var<'g>, e: Var<'g>) -> Var<'g> {
        self.inverse_var(g, t, e).1
    }

    fn check_dim(&self, n: usize) -> Result<(), FlowError> {
        if n != self.dim() {
            return Err(FlowError::Dimension { expected: self.dim(), got: n });
        }
        Ok(())
    }

    fn check_interior(&self, t: &[f64]) -> Result<(), FlowError> {
        self.check_dim(t.len())?;
        match t.iter().enumerate().find(|(_, v)| !(v.abs() < 1.0)) {
            Some((index, &value)) => Err(FlowError::Boundary { index, value }),
            None => Ok(()),
        }
    }

    fn to_sample(&self, d: &Draw<'_>) -> FlowSample {
        let spec = self.spec();
        let t = TransformParams::new(d.t.to_vec(), spec.mode, spec.scale).expect("tanh output lies in [-1, 1]");
        FlowSample { t, logp: d.logp.item(), tanh_log_det: d.tanh_log_det.item() }
    }

    pub fn base_sample(&self, e: &Embedding, rng: &mut impl Rng, mode: SampleMode) -> (Vec<f64>, f64) {
        let g = Graph::new();
        let (z0, lp) = self.base_sample_var(&g, e.var(&g), rng, mode);
        (z0.to_vec(), lp.item())
    }

    pub fn base_log_prob(&self, z0: &[f64], e: &Embedding) -> Result<f64, FlowError> {
        self.check_dim(z0.len())?;
        let g = Graph::new();
        Ok(self.base_log_prob_var(&g, g.constant(vec![z0.len()], z0.to_vec()), e.var(&g)).item())
    }

    pub fn flow_forward(&self, z0: &[f64], e: &Embedding) -> Result<FlowSample, FlowError> {
        self.check_dim(z0.len())?;
        let g = Graph::new();
        let ev = e.var(&g);
        let z = g.constant(vec![z0.len()], z0.to_vec());
        let d = self.forward_var(&g, z, self.base_log_prob_var(&g, z, ev), ev);
        Ok(self.to_sample(&d))
    }

    pub fn flow_inverse(&self, t: &[f64], e: &Embedding) -> Result<Vec<f64>, FlowError> {
        self.check_interior(t)?;
        let g = Graph::new();
        Ok(self.inverse_var(&g, g.constant(vec![t.len()], t.to_vec()), e.var(&g)).0.to_vec())
    }

    pub fn log_prob(&self, t: &TransformParams, e: &Embedding) -> Result<f64, FlowError> {
        self.log_prob_raw(t.raw(), e)
    }

    pub fn log_prob_raw(&self, t: &[f64], e: &Embedding) -> Result<f64, FlowError> {
        self.check_interior(t)?;
        let g = Graph::new();
        Ok(self.log_prob_var(&g, g.constant(vec![t.len()], t.to_vec()), e.var(&g)).item())
    }

    pub fn sample(&self, e: &Embedding, rng: &mut impl Rng, mode: SampleMode) -> FlowSample {
        let g = Graph::new();
        let d = self.sample_var(&g, e.var(&g), rng, mode);
        self.to_sample(&d)
    }

    pub fn sample_n(&self, e: &Embedding, n: usize, rng: &mut impl Rng, mode: SampleMode) -> Vec<FlowSample> {
        (0..n).map(|_| self.sample(e, rng, mode)).collect()
    }
}

impl Module for ConditionalFlow {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.embedder.params();
        p.extend(self.base.params());
        p.extend(self.couplings.iter().flat_map(Module::params));
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.embedder.params_mut();
        p.extend(self.base.params_mut());
        p.extend(self.couplings.iter_mut().flat_map(Module::params_mut));
        p
    }
}

/// Monte Carlo entropy `-mean(logp)` in nats.
pub fn entropy_estimate(samples: &[FlowSample]) -> Result<f64, FlowError> {
    if samples.is_empty() {
        return Err(FlowError::EmptySamples);
    }
    Ok(-samples.iter().map(|s| s.logp).sum::<f64>() / samples.len() as f64)
}
