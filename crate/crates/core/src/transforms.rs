//! Transform parametrizations, affine image warping and the rotation
//! deviation metric.
//!
//! Affine matrices act on homogeneous normalized output coordinates
//! `(x, y, 1)` and return the input location to read (inverse warping), so
//! `warp(I, A)(p) = I(A p)` and `warp(warp(I, A), B) = warp(I, A·B)`.

use serde::{Deserialize, Serialize};

use crate::numerics::{matexp, Graph, Scalar, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TransformError {
    #[error("{mode:?} expects {expected} parameters, got {got}")]
    Arity { mode: Parametrization, expected: usize, got: usize },
    #[error("parameter {index} = {value} lies outside [-1, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("crop parameters must go through crop_to_affine")]
    MisroutedCrop,
    #[error("crop limits require 0 < llim <= ulim <= 1, got [{llim}, {ulim}]")]
    CropLimits { llim: f64, ulim: f64 },
    #[error("matrix is not affine: {0}")]
    NotAffine(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    /// Planar rotation, one parameter.
    Rotation,
    /// Exponential of a full affine generator `[[a,b,c],[d,e,f],[0,0,0]]`.
    Lie6,
    /// Crop window `(center_x, center_y, width, height)`.
    Crop,
    /// Exponential of a pure translation generator, two parameters.
    Translation,
}

impl Parametrization {
    pub fn arity(self) -> usize {
        match self {
            Parametrization::Rotation => 1,
            Parametrization::Lie6 => 6,
            Parametrization::Crop => 4,
            Parametrization::Translation => 2,
        }
    }
}

/// Size limits for crop windows, as a fraction of the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropLimits {
    pub llim: f64,
    pub ulim: f64,
}

impl CropLimits {
    pub fn new(llim: f64, ulim: f64) -> Result<Self, TransformError> {
        if !(llim > 0.0 && llim <= ulim && ulim <= 1.0) {
            return Err(TransformError::CropLimits { llim, ulim });
        }
        Ok(Self { llim, ulim })
    }
}

impl Default for CropLimits {
    fn default() -> Self {
        Self { llim: 0.7, ulim: 1.0 }
    }
}

/// How a bounded parameter vector becomes an affine matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSpec {
    pub mode: Parametrization,
    /// Range multiplier: radians per unit for rotations, generator entries
    /// per unit for `lie6` and `translation`. Unused by crops.
    pub scale: f64,
    pub crop: CropLimits,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self { mode: Parametrization::Rotation, scale: std::f64::consts::PI, crop: CropLimits::default() }
    }
}

impl TransformSpec {
    pub fn rotation(scale: f64) -> Self {
        Self { mode: Parametrization::Rotation, scale, ..Self::default() }
    }

    pub fn lie6(scale: f64) -> Self {
        Self { mode: Parametrization::Lie6, scale, ..Self::default() }
    }

    pub fn translation(scale: f64) -> Self {
        Self { mode: Parametrization::Translation, scale, ..Self::default() }
    }

    pub fn crop(limits: CropLimits) -> Self {
        Self { mode: Parametrization::Crop, scale: 1.0, crop: limits }
    }

    pub fn dim(&self) -> usize {
        self.mode.arity()
    }

    pub fn params(&self, raw: Vec<f64>) -> Result<TransformParams, TransformError> {
        TransformParams::new(raw, self.mode, self.scale)
    }

    /// Affine matrix for `raw`, routing crops through their limits.
    pub fn affine(&self, p: &TransformParams) -> Result<AffineMatrix, TransformError> {
        match self.mode {
            Parametrization::Crop => crop_to_affine(p, self.crop.llim, self.crop.ulim),
            _ => to_affine(p),
        }
    }

    /// Affine matrix for an arity-checked parameter vector that may lie
    /// outside the unit box, e.g. an accumulated alignment.
    pub fn affine_unbounded(&self, raw: &[f64]) -> Result<AffineMatrix, TransformError> {
        if raw.len() != self.dim() {
            return Err(TransformError::Arity { mode: self.mode, expected: self.dim(), got: raw.len() });
        }
        let g = Graph::<f64>::new();
        AffineMatrix::from_row_major(&affine_var(g.constant(vec![raw.len()], raw.to_vec()), self).to_vec())
    }
}

/// Parameter vector in `[-1, 1]^k` tagged with its parametrization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    raw: Vec<f64>,
    mode: Parametrization,
    scale: f64,
}

impl TransformParams {
    pub fn new(raw: Vec<f64>, mode: Parametrization, scale: f64) -> Result<Self, TransformError> {
        if raw.len() != mode.arity() {
            return Err(TransformError::Arity { mode, expected: mode.arity(), got: raw.len() });
        }
        if let Some((index, &value)) = raw.iter().enumerate().find(|(_, v)| !(v.abs() <= 1.0)) {
            return Err(TransformError::OutOfRange { index, value });
        }
        Ok(Self { raw, mode, scale })
    }

    /// Rotation by `angle` radians under a rotation range of `scale` radians.
    pub fn rotation(angle: f64, scale: f64) -> Result<Self, TransformError> {
        Self::new(vec![angle / scale], Parametrization::Rotation, scale)
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn mode(&self) -> Parametrization {
        self.mode
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn norm(&self) -> f64 {
        self.raw.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// 3×3 affine matrix with last row `[0, 0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMatrix {
    m: [[f64; 3]; 3],
}

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix = AffineMatrix { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self, TransformError> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TransformError::NotAffine("non-finite entry"));
        }
        if m[2] != [0.0, 0.0, 1.0] {
            return Err(TransformError::NotAffine("last row must be [0, 0, 1]"));
        }
        Ok(Self { m })
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self, TransformError> {
        if v.len() != 9 {
            return Err(TransformError::NotAffine("expected 9 entries"));
        }
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.m.iter().flatten().copied().collect()
    }

    /// Matrix product `self · rhs`.
    pub fn compose(&self, rhs: &AffineMatrix) -> AffineMatrix {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        m[2] = [0.0, 0.0, 1.0];
        AffineMatrix { m }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.m[0][0] * x + self.m[0][1] * y + self.m[0][2], self.m[1][0] * x + self.m[1][1] * y + self.m[1][2])
    }
}

/// Generator-based affine matrix for `rotation` and `lie6` parameters.
pub fn to_affine(p: &TransformParams) -> Result<AffineMatrix, TransformError> {
    if p.mode == Parametrization::Crop {
        return Err(TransformError::MisroutedCrop);
    }
    let g = Graph::<f64>::new();
    let raw = g.constant(vec![p.raw.len()], p.raw.clone());
    AffineMatrix::from_row_major(&generator_affine(raw, p.mode, p.scale).to_vec())
}

/// Scale-and-translate matrix for a crop window kept inside the image.
pub fn crop_to_affine(p: &TransformParams, llim: f64, ulim: f64) -> Result<AffineMatrix, TransformError> {
    let limits = CropLimits::new(llim, ulim)?;
    if p.mode != Parametrization::Crop {
        return Err(TransformError::Arity { mode: Parametrization::Crop, expected: 4, got: p.raw.len() });
    }
    let g = Graph::<f64>::new();
    let raw = g.constant(vec![4], p.raw.clone());
    AffineMatrix::from_row_major(&crop_affine(raw, limits).to_vec())
}

/// Differentiable affine matrix `[3, 3]` for a parameter vector node.
pub fn affine_var<'g, S: Scalar>(raw: Var<'g, S>, spec: &TransformSpec) -> Var<'g, S> {
    match spec.mode {
        Parametrization::Crop => crop_affine(raw, spec.crop),
        mode => generator_affine(raw, mode, spec.scale),
    }
}

fn generator_affine<'g, S: Scalar>(raw: Var<'g, S>, mode: Parametrization, scale: f64) -> Var<'g, S> {
    let g = raw.graph();
    assert_eq!(raw.numel(), mode.arity(), "{mode:?} expects {} parameters", mode.arity());
    let scaled = raw.reshape(&[mode.arity()]).mul_scalar(S::lit(scale));
    let zero = g.constant(vec![1], vec![S::zero()]);
    let generator = match mode {
        Parametrization::Rotation => {
            // [0, r, -r] -> [[0, r, 0], [-r, 0, 0], [0, 0, 0]]
            let v = g.concat(&[zero, scaled, scaled.neg()]);
            v.gather(&[0, 1, 0, 2, 0, 0, 0, 0, 0], &[3, 3])
        }
        Parametrization::Lie6 => {
            let v = g.concat(&[zero, scaled]);
            v.gather(&[1, 2, 3, 4, 5, 6, 0, 0, 0], &[3, 3])
        }
        Parametrization::Translation => {
            let v = g.concat(&[zero, scaled]);
            v.gather(&[0, 0, 1, 0, 0, 2, 0, 0, 0], &[3, 3])
        }
        Parametrization::Crop => unreachable!("crop has no generator"),
    };
    matexp(generator)
}

fn crop_affine<'g, S: Scalar>(raw: Var<'g, S>, limits: CropLimits) -> Var<'g, S> {
    assert_eq!(raw.numel(), 4, "crop expects 4 parameters");
    let g = raw.graph();
    let raw = raw.reshape(&[4]);
    let span = S::lit(limits.ulim - limits.llim);
    // size = llim + (t + 1)/2 · (ulim - llim); center = t_c · (1 - size)
    let sizes = raw.gather(&[2, 3], &[2]).add_scalar(S::one()).mul_scalar(span * S::lit(0.5)).add_scalar(S::lit(limits.llim));
    let centers = raw.gather(&[0, 1], &[2]) * sizes.neg().add_scalar(S::one());
    let consts = g.constant(vec![2], vec![S::zero(), S::one()]);
    let v = g.concat(&[consts, sizes, centers]);
    v.gather(&[2, 0, 4, 0, 3, 5, 0, 0, 1], &[3, 3])
}

/// Homogeneous normalized coordinates of every pixel centre, row-major.
fn pixel_grid<S: Scalar>(h: usize, w: usize) -> Vec<S> {
    let norm = |i: usize, n: usize| {
        if n > 1 {
            S::lit(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
        } else {
            S::zero()
        }
    };
    let mut grid = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            grid.extend_from_slice(&[norm(c, w), norm(r, h), S::one()]);
        }
    }
    grid
}

/// Inverse-warps an `[H, W, C]` image node through a `[3, 3]` matrix node.
pub fn warp_var<'g, S: Scalar>(image: Var<'g, S>, a: Var<'g, S>) -> Var<'g, S> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "warp expects an [H, W, C] image, got {shape:?}");
    assert_eq!(a.shape(), [3, 3], "warp expects a 3x3 matrix");
    assert!(a.value().iter().all(|v| v.is_finite()), "warp: non-finite matrix");
    let (h, w) = (shape[0], shape[1]);
    let g = image.graph();
    let grid = g.constant(vec![h * w, 3], pixel_grid::<S>(h, w));
    // coords[n] = A_top · p_n for the first two rows of A.
    let a_top_t = a.gather(&[0, 3, 1, 4, 2, 5], &[3, 2]);
    let coords = grid.matmul(a_top_t);
    image.bilinear_sample(coords).reshape(&shape)
}

/// Value-level warp of an image tensor.
pub fn warp(image: &Tensor<f64>, a: &AffineMatrix) -> Tensor<f64> {
    let g = Graph::<f64>::new();
    let im = g.constant(image.shape().to_vec(), image.values().to_vec());
    let m = g.constant(vec![3, 3], a.to_row_major());
    Tensor::new(image.shape().to_vec(), warp_var(im, m).to_vec()).expect("warp output is finite")
}

/// Rotates an image by `angle` radians about its centre.
pub fn rotate(image: &Tensor<f64>, angle: f64) -> Tensor<f64> {
    let (s, c) = angle.sin_cos();
    let a = AffineMatrix { m: [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]] };
    warp(image, &a)
}

/// Frobenius distance from the upper-left 2×2 block to its nearest proper
/// rotation; the translation column is ignored. A zero block is √2 away
/// from every rotation.
pub fn rotation_deviation(a: &AffineMatrix) -> f64 {
    let [[p, q, _], [r, s, _], _] = a.m;
    // Nearest R(φ) = [[cos φ, sin φ], [-sin φ, cos φ]] maximises tr(Rᵀ A₂).
    let phi = (q - r).atan2(p + s);
    let (sn, cs) = phi.sin_cos();
    ((p - cs).powi(2) + (q - sn).powi(2) + (r + sn).powi(2) + (s - cs).powi(2)).sqrt()
}
