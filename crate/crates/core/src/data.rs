//! Procedural image datasets and IDX persistence.
//!
//! Glyphs and digits are rendered from stroke segments with an anti-aliased
//! distance field, then rotated through [`transforms::rotate`] so dataset
//! geometry matches the augmentation warp exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::transforms;
use crate::Tensor;

pub const MIN_SIZE: usize = 16;
const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("image size {0} is below the minimum of {MIN_SIZE} pixels")]
    TooSmall(usize),
    #[error("rotation range must lie in (0, 180] degrees, got {0}")]
    Range(f64),
    #[error("{n_modes} arcs of {width}° overlap on the circle")]
    OverlappingArcs { n_modes: usize, width: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    Magic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("class {class} has {available} examples, {requested} requested")]
    NotEnough { class: usize, available: usize, requested: usize },
}

/// Generator parameters recorded alongside a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    TwoGlyph { range_deg: f64, n_per_class: usize, size: usize, seed: u64 },
    Multimodal { n_modes: usize, mode_width_deg: f64, n_per_class: usize, size: usize, seed: u64 },
    Digits { classes: Vec<usize>, range_deg: f64, n_per_class: usize, size: usize, seed: u64 },
    Loaded { images: PathBuf, labels: PathBuf },
}

impl DataSpec {
    /// Generates or loads the dataset this spec describes.
    pub fn build(&self) -> Result<Dataset, DataError> {
        match self {
            DataSpec::TwoGlyph { range_deg, n_per_class, size, seed } => make_two_glyph(*range_deg, *n_per_class, *size, *seed),
            DataSpec::Multimodal { n_modes, mode_width_deg, n_per_class, size, seed } => {
                make_multimodal(*n_modes, *mode_width_deg, *n_per_class, *size, *seed)
            }
            DataSpec::Digits { classes, range_deg, n_per_class, size, seed } => make_digits(classes, *range_deg, *n_per_class, *size, *seed),
            DataSpec::Loaded { images, labels } => load_idx(images, labels, None),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[H, W, 1]` images with values in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Rotation applied to each prototype, in degrees; hidden ground truth.
    pub true_angles: Option<Vec<f64>>,
    /// Arc index for multimodal data.
    pub modes: Option<Vec<usize>>,
    pub classes: usize,
    pub spec: DataSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.first().map(Tensor::shape).unwrap_or(&[0, 0, 1]);
        [s[0], s[1], s[2]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Keeps the listed positions, in order.
    pub fn subset(&self, keep: &[usize]) -> Dataset {
        Dataset {
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            true_angles: self.true_angles.as_ref().map(|a| keep.iter().map(|&i| a[i]).collect()),
            modes: self.modes.as_ref().map(|m| keep.iter().map(|&i| m[i]).collect()),
            classes: self.classes,
            spec: self.spec.clone(),
        }
    }

    /// Deterministic shuffled split into `(first, rest)` with `first` of size `n`.
    pub fn split(&self, n: usize, seed: u64) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let (mut a, mut b) = (order[..n].to_vec(), order[n..].to_vec());
        a.sort_unstable();
        b.sort_unstable();
        (self.subset(&a), self.subset(&b))
    }
}

type Segment = [(f64, f64); 2];

/// Glyph strokes in normalized coordinates (x right, y down).
const F_STROKES: [Segment; 3] = [[(-0.35, -0.7), (-0.35, 0.7)], [(-0.35, -0.7), (0.45, -0.7)], [(-0.35, 0.0), (0.25, 0.0)]];
const STROKE_HALF_WIDTH: f64 = 0.12;

fn segment_distance(p: (f64, f64), s: &Segment) -> f64 {
    let [(ax, ay), (bx, by)] = *s;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 { (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p.0 - ax - u * dx).powi(2) + (p.1 - ay - u * dy).powi(2)).sqrt()
}

/// Anti-aliased stroke rendering with roughly one pixel of edge ramp.
pub fn render_strokes(strokes: &[Segment], size: usize) -> Result<Tensor, DataError> {
    if size < MIN_SIZE {
        return Err(DataError::TooSmall(size));
    }
    let px = 2.0 / (size - 1) as f64;
    let mut v = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let p = (-1.0 + c as f64 * px, -1.0 + r as f64 * px);
            let d = strokes.iter().map(|s| segment_distance(p, s)).fold(f64::INFINITY, f64::min);
            v.push((0.5 - (d - STROKE_HALF_WIDTH) / px).clamp(0.0, 1.0));
        }
    }
    Ok(Tensor::new(vec![size, size, 1], v).expect("finite pixels"))
}

/// Upright glyph prototype; class 1 is its 180° rotation.
pub fn glyph_prototype(class: usize, size: usize) -> Result<Tensor, DataError> {
    let base = render_strokes(&F_STROKES, size)?;
    Ok(if class == 0 { base } else { transforms::rotate(&base, std::f64::consts::PI) })
}

/// Seven-segment strokes: a top, b upper-right, c lower-right, d bottom,
/// e lower-left, f upper-left, g middle. `1` is a centred bar so 0, 1, 2, 5
/// and 8 are symmetric under a half turn while 6 and 9 swap.
pub fn digit_strokes(digit: usize) -> Vec<Segment> {
    const X: f64 = 0.4;
    const Y: f64 = 0.7;
    let seg = |c: char| -> Segment {
        match c {
            'a' => [(-X, -Y), (X, -Y)],
            'b' => [(X, -Y), (X, 0.0)],
            'c' => [(X, 0.0), (X, Y)],
            'd' => [(-X, Y), (X, Y)],
            'e' => [(-X, 0.0), (-X, Y)],
            'f' => [(-X, -Y), (-X, 0.0)],
            'g' => [(-X, 0.0), (X, 0.0)],
            _ => unreachable!(),
        }
    };
    let on = match digit {
        0 => "abcdef",
        1 => return vec![[(0.0, -Y), (0.0, Y)]],
        2 => "abged",
        3 => "abgcd",
        4 => "fgbc",
        5 => "afgcd",
        6 => "afgedc",
        7 => "abc",
        8 => "abcdefg",
        9 => "abcdfg",
        _ => panic!("digit {digit} out of range"),
    };
    on.chars().map(seg).collect()
}

fn uniform_angle(range_deg: f64, rng: &mut impl Rng) -> f64 {
    rng.random_range(-range_deg..=range_deg)
}

fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 { 180.0 } else { w }
}

fn check_range(range_deg: f64) -> Result<(), DataError> {
    if !(range_deg > 0.0 && range_deg <= 180.0) {
        return Err(DataError::Range(range_deg));
    }
    Ok(())
}

/// Upright and half-turned glyph classes, each sample rotated uniformly in
/// `±range_deg`. Samples alternate between classes.
pub fn make_two_glyph(range_deg: f64, n_per_class: usize, size: usize, seed: u64) -> Result<Dataset, DataError> {
    check_range(range_deg)?;
    let protos = [glyph_prototype(0, size)?, glyph_prototype(1, size)?];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = empty(2, DataSpec::TwoGlyph { range_deg, n_per_class, size, seed });
    let angles = ds.true_angles.as_mut().expect("angles");
    for _ in 0..n_per_class {
        for (class, proto) in protos.iter().enumerate() {
            let a = uniform_angle(range_deg, &mut rng);
            ds.images.push(transforms::rotate(proto, a.to_radians()));
            ds.labels.push(class);
            angles.push(a);
        }
    }
    Ok(ds)
}

fn empty(classes: usize, spec: DataSpec) -> Dataset {
    Dataset { images: Vec::new(), labels: Vec::new(), true_angles: Some(Vec::new()), modes: None, classes, spec }
}

/// Two-glyph data whose rotations come from `n_modes` equally spaced arcs of
/// width `mode_width_deg`, the first centred at 0°.
pub fn make_multimodal(n_modes: usize, mode_width_deg: f64, n_per_class: usize, size: usize, seed: u64) -> Result<Dataset, DataError> {
    if n_modes == 0 || !(mode_width_deg > 0.0) {
        return Err(DataError::Invalid(format!("need at least one arc of positive width, got {n_modes} × {mode_width_deg}°")));
    }
    if mode_width_deg * n_modes as f64 > 360.0 {
        return Err(DataError::OverlappingArcs { n_modes, width: mode_width_deg });
    }
    let protos = [glyph_prototype(0, size)?, glyph_prototype(1, size)?];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = empty(2, DataSpec::Multimodal { n_modes, mode_width_deg, n_per_class, size, seed });
    let mut modes = Vec::new();
    let half = mode_width_deg / 2.0;
    for _ in 0..n_per_class {
        for (class, proto) in protos.iter().enumerate() {
            let m = rng.random_range(0..n_modes);
            let a = wrap_deg(m as f64 * 360.0 / n_modes as f64 + rng.random_range(-half..=half));
            ds.images.push(transforms::rotate(proto, a.to_radians()));
            ds.labels.push(class);
            ds.true_angles.as_mut().expect("angles").push(a);
            modes.push(m);
        }
    }
    ds.modes = Some(modes);
    Ok(ds)
}

/// Seven-segment digits relabelled `0..classes.len()` in the given order,
/// each rotated uniformly in `±range_deg`.
pub fn make_digits(classes: &[usize], range_deg: f64, n_per_class: usize, size: usize, seed: u64) -> Result<Dataset, DataError> {
    check_range(range_deg)?;
    if classes.is_empty() || classes.iter().any(|&d| d > 9) {
        return Err(DataError::Invalid(format!("digit classes must be a non-empty subset of 0..=9, got {classes:?}")));
    }
    let protos: Vec<Tensor> = classes.iter().map(|&d| render_strokes(&digit_strokes(d), size)).collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = empty(classes.len(), DataSpec::Digits { classes: classes.to_vec(), range_deg, n_per_class, size, seed });
    for _ in 0..n_per_class {
        for (label, proto) in protos.iter().enumerate() {
            let a = uniform_angle(range_deg, &mut rng);
            ds.images.push(transforms::rotate(proto, a.to_radians()));
            ds.labels.push(label);
            ds.true_angles.as_mut().expect("angles").push(a);
        }
    }
    Ok(ds)
}

/// Exponentially decaying class sizes `n_max · rho^(-c/(C-1))`, with
/// `n_max` the class-0 count. Kept examples preserve their original order.
pub fn long_tail_sizes(n_max: usize, classes: usize, rho: f64) -> Vec<usize> {
    (0..classes)
        .map(|c| if classes == 1 { n_max } else { (n_max as f64 * rho.powf(-(c as f64) / (classes - 1) as f64)).round() as usize })
        .collect()
}

pub fn make_long_tail(ds: &Dataset, rho: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(rho >= 1.0) {
        return Err(DataError::Invalid(format!("imbalance ratio must be ≥ 1, got {rho}")));
    }
    let counts = ds.class_counts();
    let sizes = long_tail_sizes(counts.first().copied().unwrap_or(0), ds.classes, rho);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (class, &want) in sizes.iter().enumerate() {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if want > members.len() {
            return Err(DataError::NotEnough { class, available: members.len(), requested: want });
        }
        keep.extend(index::sample(&mut rng, members.len(), want).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated { path: path.to_path_buf(), detail: format!("header ends at byte {}", bytes.len()) })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::Magic { path: path.to_path_buf(), found, expected });
    }
    Ok(())
}

/// Writes images (quantized to `u8`) and labels as an IDX pair.
pub fn write_idx(images_path: &Path, labels_path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let [h, w, c] = ds.image_shape();
    if c != 1 {
        return Err(DataError::Invalid(format!("IDX images must have one channel, got {c}")));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * h * w);
    for v in [IMAGE_MAGIC, ds.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for im in &ds.images {
        img.extend(im.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        let l = u8::try_from(l).map_err(|_| DataError::Invalid(format!("label {l} does not fit in a byte")))?;
        lab.push(l);
    }
    fs::write(images_path, img).map_err(io_err(images_path))?;
    fs::write(labels_path, lab).map_err(io_err(labels_path))
}

/// Reads an IDX pair, scaling pixels to `[0, 1]`. With `keep` set, only
/// those labels survive and are renumbered by their position in `keep`.
pub fn load_idx(images_path: &Path, labels_path: &Path, keep: Option<&[usize]>) -> Result<Dataset, DataError> {
    let img = fs::read(images_path).map_err(io_err(images_path))?;
    let lab = fs::read(labels_path).map_err(io_err(labels_path))?;
    check_magic(&img, IMAGE_MAGIC, images_path)?;
    check_magic(&lab, LABEL_MAGIC, labels_path)?;
    let n = read_u32(&img, 4, images_path)? as usize;
    let (h, w) = (read_u32(&img, 8, images_path)? as usize, read_u32(&img, 12, images_path)? as usize);
    let n_labels = read_u32(&lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch { images: n, labels: n_labels });
    }
    let need = 16 + n * h * w;
    if img.len() < need {
        return Err(DataError::Truncated { path: images_path.to_path_buf(), detail: format!("{} of {need} bytes", img.len()) });
    }
    if lab.len() < 8 + n {
        return Err(DataError::Truncated { path: labels_path.to_path_buf(), detail: format!("{} of {} bytes", lab.len(), 8 + n) });
    }
    let raw_labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        true_angles: None,
        modes: None,
        classes: keep.map_or_else(|| raw_labels.iter().max().map_or(0, |m| m + 1), <[usize]>::len),
        spec: DataSpec::Loaded { images: images_path.to_path_buf(), labels: labels_path.to_path_buf() },
    };
    for (i, &raw) in raw_labels.iter().enumerate() {
        let label = match keep {
            Some(k) => match k.iter().position(|&c| c == raw) {
                Some(p) => p,
                None => continue,
            },
            None => raw,
        };
        let px = &img[16 + i * h * w..16 + (i + 1) * h * w];
        ds.images.push(Tensor::new(vec![h, w, 1], px.iter().map(|&b| b as f64 / 255.0).collect()).expect("finite pixels"));
        ds.labels.push(label);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mass(t: &Tensor) -> f64 {
        t.values().iter().sum()
    }

    #[test]
    fn angles_stay_in_range() {
        for range in [45.0, 90.0] {
            let ds = make_two_glyph(range, 200, 16, 1).unwrap();
            assert_eq!(ds.len(), 400);
            assert!(ds.true_angles.as_ref().unwrap().iter().all(|a| a.abs() <= range));
            assert_eq!(ds.class_counts(), vec![200, 200]);
        }
        assert!(matches!(make_two_glyph(0.0, 1, 16, 0), Err(DataError::Range(_))));
        assert!(matches!(make_two_glyph(45.0, 1, 12, 0), Err(DataError::TooSmall(12))));
    }

    #[test]
    fn angles_are_uniform_by_kolmogorov_smirnov() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a: Vec<f64> = (0..10_000).map(|_| uniform_angle(45.0, &mut rng)).collect();
        a.sort_by(f64::total_cmp);
        let n = a.len() as f64;
        let ks = a
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x + 45.0) / 90.0;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "{ks}");
    }

    #[test]
    fn generators_are_reproducible() {
        assert_eq!(make_two_glyph(45.0, 10, 16, 5).unwrap(), make_two_glyph(45.0, 10, 16, 5).unwrap());
        assert_ne!(make_two_glyph(45.0, 10, 16, 5).unwrap().images, make_two_glyph(45.0, 10, 16, 6).unwrap().images);
        assert_eq!(make_multimodal(3, 30.0, 5, 16, 2).unwrap(), make_multimodal(3, 30.0, 5, 16, 2).unwrap());
    }

    #[test]
    fn glyph_is_not_rotation_symmetric() {
        let up = glyph_prototype(0, 16).unwrap();
        let down = glyph_prototype(1, 16).unwrap();
        let diff: f64 = up.values().iter().zip(down.values()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.3 * mass(&up));
        assert!((mass(&up) - mass(&down)).abs() < 0.05 * mass(&up));
    }

    #[test]
    fn template_matching_recovers_angles() {
        let ds = make_two_glyph(45.0, 100, 16, 9).unwrap();
        let grid: Vec<f64> = (-45..=45).map(f64::from).collect();
        let templates: Vec<Vec<Tensor>> = (0..2)
            .map(|c| grid.iter().map(|a| transforms::rotate(&glyph_prototype(c, 16).unwrap(), a.to_radians())).collect())
            .collect();
        let angles = ds.true_angles.as_ref().unwrap();
        let hits = (0..ds.len())
            .filter(|&i| {
                let best = templates[ds.labels[i]]
                    .iter()
                    .map(|t| t.values().iter().zip(ds.images[i].values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                (grid[best] - angles[i]).abs() <= 5.0
            })
            .count();
        assert!(hits as f64 >= 0.99 * ds.len() as f64, "{hits}");
    }

    #[test]
    fn multimodal_arcs() {
        let ds = make_multimodal(3, 30.0, 5_000, 16, 4).unwrap();
        let (angles, modes) = (ds.true_angles.as_ref().unwrap(), ds.modes.as_ref().unwrap());
        for (a, &m) in angles.iter().zip(modes) {
            assert!(wrap_deg(a - m as f64 * 120.0).abs() <= 15.0 + 1e-9);
        }
        for m in 0..3 {
            let frac = modes.iter().filter(|&&x| x == m).count() as f64 / modes.len() as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.02);
        }
        assert!(matches!(make_multimodal(4, 100.0, 1, 16, 0), Err(DataError::OverlappingArcs { .. })));
    }

    #[test]
    fn single_arc_matches_two_glyph_support() {
        let ds = make_multimodal(1, 90.0, 200, 16, 4).unwrap();
        assert!(ds.true_angles.unwrap().iter().all(|a| a.abs() <= 45.0));
    }

    #[test]
    fn six_and_nine_swap_under_a_half_turn() {
        let render = |d| render_strokes(&digit_strokes(d), 16).unwrap();
        let close = |a: &Tensor, b: &Tensor| a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) < 1e-9;
        let half = |t: &Tensor| transforms::rotate(t, std::f64::consts::PI);
        assert!(close(&half(&render(6)), &render(9)));
        for d in [0, 1, 5] {
            assert!(close(&half(&render(d)), &render(d)), "digit {d}");
        }
        assert!(!close(&render(6), &render(9)));
    }

    #[test]
    fn long_tail_profile() {
        assert_eq!(long_tail_sizes(1000, 2, 10.0), vec![1000, 100]);
        assert_eq!(long_tail_sizes(50, 4, 1.0), vec![50; 4]);
        let sizes = long_tail_sizes(10_000, 10, 10.0);
        let ratio = 10f64.powf(1.0 / 9.0);
        for w in sizes.windows(2) {
            assert!((w[0] as f64 / w[1] as f64 - ratio).abs() < 0.01);
        }
        assert_eq!((sizes[0], sizes[9]), (10_000, 1_000));
    }

    #[test]
    fn long_tail_is_a_subset() {
        let ds = make_digits(&[0, 1, 2, 3], 180.0, 40, 16, 0).unwrap();
        let lt = make_long_tail(&ds, 10.0, 1).unwrap();
        assert_eq!(lt.class_counts(), vec![40, 19, 9, 4]);
        for (img, l) in lt.images.iter().zip(&lt.labels) {
            assert!(ds.images.iter().zip(&ds.labels).any(|(i, m)| i == img && m == l));
        }
        assert_eq!(make_long_tail(&ds, 1.0, 1).unwrap().class_counts(), vec![40; 4]);
        let mut lopsided = ds.clone();
        lopsided.labels.iter_mut().filter(|l| **l == 3).take(35).for_each(|l| *l = 0);
        assert!(matches!(make_long_tail(&lopsided, 1.0, 0), Err(DataError::NotEnough { class: 1, available: 40, requested: 75 })));
    }

    #[test]
    fn idx_round_trip_and_filtering() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        let ds = make_digits(&[0, 1, 5, 6, 9, 3], 30.0, 4, 16, 2).unwrap();
        write_idx(&ip, &lp, &ds).unwrap();
        let bytes = fs::read(&ip).unwrap();
        let back = load_idx(&ip, &lp, None).unwrap();
        assert_eq!(back.labels, ds.labels);
        let (ip2, lp2) = (dir.path().join("img2.idx"), dir.path().join("lab2.idx"));
        write_idx(&ip2, &lp2, &back).unwrap();
        assert_eq!(fs::read(&ip2).unwrap(), bytes);
        let again = load_idx(&ip2, &lp2, None).unwrap();
        assert_eq!(again.images, back.images);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
        let filtered = load_idx(&ip, &lp, Some(&[0, 1, 2, 3, 4])).unwrap();
        assert!(filtered.labels.iter().all(|&l| l < 5));
        assert_eq!(filtered.len(), 20);
    }

    #[test]
    fn idx_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        let ds = make_two_glyph(45.0, 2, 16, 0).unwrap();
        write_idx(&ip, &lp, &ds).unwrap();
        let err = load_idx(&lp, &ip, None).unwrap_err();
        assert!(matches!(err, DataError::Magic { .. }));
        assert!(err.to_string().contains("lab.idx"));
        let mut bytes = fs::read(&ip).unwrap();
        bytes.truncate(100);
        fs::write(&ip, bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp, None), Err(DataError::Truncated { .. })));
    }
}
