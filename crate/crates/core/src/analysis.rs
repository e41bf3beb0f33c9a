//! Read-only analyses of trained models: mean-shift alignment, the
//! total-variation invariance audit, eKLD curves and sample export.

use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::flow::{ConditionalFlow, FlowError, FlowSample, SampleMode};
use crate::training::{substream, Predictor, TrainError};
use crate::transforms::{self, Parametrization, TransformError, TransformSpec};
use crate::Tensor;

/// Probability floor used inside KL divergences.
pub const KL_FLOOR: f64 = 1e-12;

/// Mean-shift aborts once any accumulated coordinate exceeds this multiple of
/// the unit parameter box.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

const TAG_ALIGN: u64 = 11;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("invalid analysis config: {0}")]
    Config(String),
    #[error("mean-shift diverged at iteration {iteration} (‖T‖∞ = {norm})")]
    Diverged { iteration: usize, norm: f64, trajectory: Vec<Vec<f64>> },
    #[error("density grids differ in length: {left} vs {right}")]
    GridMismatch { left: usize, right: usize },
    #[error("grid quadrature supports at most 2 transform parameters, got {0}")]
    Unsupported(usize),
    #[error("no probe angles given")]
    NoProbes,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// A transform density conditioned on an image.
pub trait ConditionalDensity: Sync {
    fn spec(&self) -> &TransformSpec;
    /// `n` raw parameter vectors drawn given `image`.
    fn sample_raw(&self, image: &Tensor, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>, AnalysisError>;
    /// Densities (not logs) at `points`; zero outside the parameter box.
    fn density_at(&self, image: &Tensor, points: &[Vec<f64>]) -> Result<Vec<f64>, AnalysisError>;
}

impl ConditionalDensity for ConditionalFlow {
    fn spec(&self) -> &TransformSpec {
        ConditionalFlow::spec(self)
    }

    fn sample_raw(&self, image: &Tensor, n: usize, mut rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>, AnalysisError> {
        let e = self.embed(image)?;
        Ok(self.sample_n(&e, n, &mut rng, SampleMode::Eval).into_iter().map(|s| s.t.raw().to_vec()).collect())
    }

    fn density_at(&self, image: &Tensor, points: &[Vec<f64>]) -> Result<Vec<f64>, AnalysisError> {
        let e = self.embed(image)?;
        points
            .iter()
            .map(|p| if p.iter().all(|v| v.abs() < 1.0) { Ok(self.log_prob_raw(p, &e)?.exp()) } else { Ok(0.0) })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanShiftConfig {
    pub gamma: f64,
    pub iterations: usize,
    pub n_samples: usize,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        Self { gamma: 0.1, iterations: 50, n_samples: 100 }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.gamma > 0.0) || self.iterations == 0 || self.n_samples == 0 {
            return Err(AnalysisError::Config(format!("mean-shift needs gamma > 0 and non-zero counts, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Accumulated raw parameters; may leave the unit box.
    pub t_final: Vec<f64>,
    pub aligned: Tensor,
    /// `T_0 = 0, T_1, …, T_K`.
    pub trajectory: Vec<Vec<f64>>,
    /// Sample mean drawn at the last iterate.
    pub last_mean: Vec<f64>,
}

fn mean_of(samples: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    for s in samples {
        m.iter_mut().zip(s).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|a| *a /= samples.len().max(1) as f64);
    m
}

/// Iterates `T_k = T_{k-1} + γ·mean(samples | A_{T_{k-1}}(I₀))`, always
/// re-warping the original image.
pub fn mean_shift_align(density: &dyn ConditionalDensity, image: &Tensor, cfg: &MeanShiftConfig, rng: &mut dyn RngCore) -> Result<Alignment, AnalysisError> {
    cfg.validate()?;
    let spec = *density.spec();
    let k = spec.dim();
    let mut t = vec![0.0; k];
    let mut current = image.clone();
    let mut trajectory = vec![t.clone()];
    let mut last_mean = vec![0.0; k];
    for iteration in 1..=cfg.iterations {
        last_mean = mean_of(&density.sample_raw(&current, cfg.n_samples, rng)?, k);
        t.iter_mut().zip(&last_mean).for_each(|(a, m)| *a += cfg.gamma * m);
        trajectory.push(t.clone());
        let norm = t.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !(norm <= DIVERGENCE_FACTOR) {
            return Err(AnalysisError::Diverged { iteration, norm, trajectory });
        }
        current = transforms::warp(image, &spec.affine_unbounded(&t)?);
    }
    Ok(Alignment { t_final: t, aligned: current, trajectory, last_mean })
}

/// Aligns every image on its own RNG substream.
pub fn align_all(density: &dyn ConditionalDensity, images: &[Tensor], cfg: &MeanShiftConfig, seed: u64) -> Result<Vec<Alignment>, AnalysisError> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, im)| mean_shift_align(density, im, cfg, &mut substream(seed, TAG_ALIGN, i as u64, 0)))
        .collect()
}

/// `½·Σ|p − q|·cell`, clamped to `[0, 1]`.
pub fn tv_distance_grid(p: &[f64], q: &[f64], cell_volume: f64) -> Result<f64, AnalysisError> {
    if p.len() != q.len() {
        return Err(AnalysisError::GridMismatch { left: p.len(), right: q.len() });
    }
    let s: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * s * cell_volume).clamp(0.0, 1.0))
}

/// Midpoint grid over `(-1, 1)^k` with `per_dim` points per axis, plus the
/// cell volume.
pub fn parameter_grid(k: usize, per_dim: usize) -> (Vec<Vec<f64>>, f64) {
    let axis = crate::training::grid_points(per_dim);
    let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..k {
        pts = pts.into_iter().flat_map(|p| axis.iter().map(move |&v| [p.as_slice(), &[v]].concat())).collect();
    }
    (pts, (2.0 / per_dim as f64).powi(k as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceAudit {
    /// Largest class probability over the warped grid.
    pub max_prob: f64,
    pub min_prob: f64,
    pub tv: f64,
    /// `2·(max_prob − min_prob)·tv`.
    pub bound: f64,
    /// `|p(C | I) − p(C | I′)|` by grid quadrature.
    pub observed_err: f64,
}

/// A full turn parametrised over the unit box wraps around.
fn is_periodic(spec: &TransformSpec) -> bool {
    spec.mode == Parametrization::Rotation && (spec.scale - std::f64::consts::PI).abs() < 1e-12
}

fn wrap_unit(v: f64) -> f64 {
    let w = (v + 1.0).rem_euclid(2.0) - 1.0;
    if w <= -1.0 { w + 2.0 } else { w }
}

/// Audits `|p(C|I) − p(C|I′)| ≤ 2(M − m)·TV` for `I′ = A_Δ(I)` on a grid of
/// `per_dim` points per parameter.
pub fn invariance_bound(
    density: &dyn ConditionalDensity,
    classifier: &dyn Predictor,
    image: &Tensor,
    delta: &[f64],
    class: usize,
    per_dim: usize,
) -> Result<InvarianceAudit, AnalysisError> {
    let spec = *density.spec();
    let k = spec.dim();
    if k > 2 {
        return Err(AnalysisError::Unsupported(k));
    }
    let shifted_image = transforms::warp(image, &spec.affine_unbounded(delta)?);
    let (grid, cell) = parameter_grid(k, per_dim);
    let class_prob = |im: &Tensor, t: &[f64]| -> Result<f64, AnalysisError> {
        let warped = transforms::warp(im, &spec.affine_unbounded(t)?);
        Ok(classifier.predict(&warped)[class])
    };
    let f_base: Vec<f64> = grid.par_iter().map(|t| class_prob(image, t)).collect::<Result<_, _>>()?;
    let f_shifted: Vec<f64> = grid.par_iter().map(|t| class_prob(&shifted_image, t)).collect::<Result<_, _>>()?;
    let g_base = density.density_at(image, &grid)?;
    let g_shifted = density.density_at(&shifted_image, &grid)?;
    let back: Vec<Vec<f64>> = grid
        .iter()
        .map(|s| s.iter().zip(delta).map(|(a, d)| if is_periodic(&spec) { wrap_unit(a - d) } else { a - d }).collect())
        .collect();
    let g_back = density.density_at(&shifted_image, &back)?;
    let expect = |g: &[f64], f: &[f64]| {
        let z: f64 = g.iter().sum();
        g.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / z
    };
    let observed_err = (expect(&g_base, &f_base) - expect(&g_shifted, &f_shifted)).abs();
    let tv = tv_distance_grid(&g_base, &g_back, cell)?;
    let max_prob = f_base.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_prob = f_base.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(InvarianceAudit { max_prob, min_prob, tv, bound: 2.0 * (max_prob - min_prob) * tv, observed_err })
}

/// `KL(p ‖ q)` in nats with both distributions floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a > 0.0 { a * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln()) } else { 0.0 }).sum::<f64>().max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EkldReport {
    pub angles_deg: Vec<f64>,
    /// `per_class[c][j]`: mean KL at probe `j`; `None` for classes without
    /// examples.
    pub per_class: Vec<Option<Vec<f64>>>,
}

impl EkldReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), AnalysisError> {
        let io = |source| AnalysisError::Io { path: path.to_path_buf(), source };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(out, "class,angle_deg,ekld").map_err(io)?;
        for (c, row) in self.per_class.iter().enumerate() {
            for (j, a) in self.angles_deg.iter().enumerate() {
                match row {
                    Some(r) => writeln!(out, "{c},{a},{}", r[j]),
                    None => writeln!(out, "{c},{a},NA"),
                }
                .map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }
}

/// Mean over class-`c` images of `KL(p(·|I) ‖ p(·|rotate(I, a)))` for each
/// probe angle in degrees.
pub fn ekld(predictor: &dyn Predictor, ds: &Dataset, probe_angles_deg: &[f64]) -> Result<EkldReport, AnalysisError> {
    if probe_angles_deg.is_empty() {
        return Err(AnalysisError::NoProbes);
    }
    let rows: Vec<(usize, Vec<f64>)> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let im = &ds.images[i];
            let p = predictor.predict(im);
            let kls = probe_angles_deg.iter().map(|a| kl_divergence(&p, &predictor.predict(&transforms::rotate(im, a.to_radians())))).collect();
            (ds.labels[i], kls)
        })
        .collect();
    let mut sums = vec![vec![0.0; probe_angles_deg.len()]; ds.classes];
    let mut counts = vec![0usize; ds.classes];
    for (c, kls) in rows {
        counts[c] += 1;
        sums[c].iter_mut().zip(kls).for_each(|(s, v)| *s += v);
    }
    let per_class = sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(EkldReport { angles_deg: probe_angles_deg.to_vec(), per_class })
}

/// Writes `n` flow samples for `image` as CSV rows `t1..tk,logp`.
pub fn distribution_export(flow: &ConditionalFlow, image: &Tensor, n: usize, rng: &mut impl Rng, path: &Path) -> Result<Vec<FlowSample>, AnalysisError> {
    let e = flow.embed(image)?;
    let samples = flow.sample_n(&e, n, rng, SampleMode::Eval);
    let io = |source| AnalysisError::Io { path: path.to_path_buf(), source };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let header: Vec<String> = (1..=flow.dim()).map(|i| format!("t{i}")).chain(["logp".to_string()]).collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for s in &samples {
        let row: Vec<String> = s.t.raw().iter().chain([&s.logp]).map(f64::to_string).collect();
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(samples)
}

/// Reads back a file written by [`distribution_export`] as `(t, logp)` rows.
pub fn read_distribution_csv(path: &Path) -> Result<Vec<(Vec<f64>, f64)>, AnalysisError> {
    let file = std::fs::File::open(path).map_err(|source| AnalysisError::Io { path: path.to_path_buf(), source })?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AnalysisError::Io { path: path.to_path_buf(), source })?;
        if i == 0 {
            continue;
        }
        let parse = |v: &str| v.parse::<f64>().map_err(|e| AnalysisError::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() });
        let mut vals: Vec<f64> = line.split(',').map(parse).collect::<Result<_, _>>()?;
        let lp = vals.pop().ok_or_else(|| AnalysisError::Parse { path: path.to_path_buf(), line: i + 1, msg: "empty row".into() })?;
        rows.push((vals, lp));
    }
    Ok(rows)
}

/// Circular standard deviation `√(−2 ln R)` of angles in radians.
pub fn circular_std(angles: &[f64]) -> f64 {
    let n = angles.len() as f64;
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    let r = ((s / n).powi(2) + (c / n).powi(2)).sqrt().min(1.0);
    (-2.0 * r.ln()).sqrt()
}

/// Linear-interpolated percentile, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Local maxima of a von Mises kernel density over a 1° circular grid:
/// `(angle in degrees, fraction of the samples nearest to that peak)`,
/// strongest first. Peaks below `min_height` of the maximum are dropped.
pub fn circular_density_peaks(angles_deg: &[f64], bandwidth_deg: f64, min_height: f64) -> Vec<(f64, f64)> {
    let kappa = 1.0 / bandwidth_deg.to_radians().powi(2);
    let dens: Vec<f64> = (0..360)
        .map(|g| {
            let x = (g as f64 - 180.0).to_radians();
            angles_deg.iter().map(|a| (kappa * ((x - a.to_radians()).cos() - 1.0)).exp()).sum::<f64>()
        })
        .collect();
    let top = dens.iter().copied().fold(0.0, f64::max);
    let peaks: Vec<f64> = (0..360)
        .filter(|&g| dens[g] >= min_height * top && dens[g] > dens[(g + 359) % 360] && dens[g] >= dens[(g + 1) % 360])
        .map(|g| g as f64 - 180.0)
        .collect();
    let ang_dist = |a: f64, b: f64| (a - b + 540.0).rem_euclid(360.0) - 180.0;
    let mut mass = vec![0usize; peaks.len()];
    for a in angles_deg {
        if let Some((i, _)) = peaks.iter().enumerate().min_by(|x, y| ang_dist(*a, *x.1).abs().total_cmp(&ang_dist(*a, *y.1).abs())) {
            mass[i] += 1;
        }
    }
    let mut out: Vec<(f64, f64, f64)> =
        peaks.iter().zip(mass).map(|(&p, m)| (p, m as f64 / angles_deg.len() as f64, dens[(p + 180.0) as usize])).collect();
    out.sort_by(|a, b| b.2.total_cmp(&a.2));
    out.into_iter().map(|(p, m, _)| (p, m)).collect()
}
