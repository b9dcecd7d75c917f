//! Labeled point sets on the radius-√d sphere.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, RNG_NAME};

/// Relative tolerance for the ‖x_i‖ = √d invariant.
pub const NORM_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    SphereUniform,
    GaussianNormalized,
    OrthogonalBasis,
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// Independent fair coin per point.
    Uniform,
    /// +1, −1, +1, … in index order.
    BalancedAlternating,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Array2<f64>,
    labels: Array1<f64>,
    seed: u64,
    source: DatasetSource,
}

impl Dataset {
    /// Builds a dataset from an `m × d` point matrix and ±1 labels, checking
    /// the sphere-norm and label invariants.
    pub fn new(
        points: Array2<f64>,
        labels: Vec<f64>,
        seed: u64,
        source: DatasetSource,
    ) -> Result<Self> {
        let (m, d) = points.dim();
        if m == 0 || d == 0 {
            return Err(Error::invalid(format!("dataset needs m >= 1 and d >= 1, got m={m}, d={d}")));
        }
        if labels.len() != m {
            return Err(Error::invalid(format!("{} labels for {m} points", labels.len())));
        }
        if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::invalid(format!("label {i} is {} (must be ±1)", labels[i])));
        }
        let radius = (d as f64).sqrt();
        for (i, row) in points.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !norm.is_finite() || ((norm - radius) / radius).abs() > NORM_RTOL {
                return Err(Error::invalid(format!(
                    "point {i} has norm {norm}, expected sqrt(d) = {radius}"
                )));
            }
        }
        Ok(Dataset {
            points,
            labels: Array1::from(labels),
            seed,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source(&self) -> DatasetSource {
        self.source
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    pub fn labels(&self) -> ArrayView1<'_, f64> {
        self.labels.view()
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y > 0.0).count()
    }

    /// Same points with every label negated.
    pub fn with_flipped_labels(&self) -> Dataset {
        Dataset {
            labels: self.labels.mapv(|y| -y),
            ..self.clone()
        }
    }

    /// Rows selected by `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {i} out of range for m={}", self.len())));
        }
        let points = self.points.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(points, labels, self.seed, self.source)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DatasetFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Dataset> {
        let file: DatasetFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::from_json(&fs::read_to_string(path)?)
    }
}

/// On-disk `.ds.json` layout: points are row-major, `m·d` doubles.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    d: usize,
    m: usize,
    seed: u64,
    source: DatasetSource,
    #[serde(default)]
    rng: Option<String>,
    labels: Vec<i8>,
    points: Vec<f64>,
}

impl From<&Dataset> for DatasetFile {
    fn from(ds: &Dataset) -> Self {
        DatasetFile {
            d: ds.dim(),
            m: ds.len(),
            seed: ds.seed,
            source: ds.source,
            rng: Some(RNG_NAME.to_string()),
            labels: ds.labels.iter().map(|&y| if y > 0.0 { 1 } else { -1 }).collect(),
            points: ds.points.iter().copied().collect(),
        }
    }
}

impl TryFrom<DatasetFile> for Dataset {
    type Error = Error;

    fn try_from(f: DatasetFile) -> Result<Dataset> {
        if f.points.len() != f.m * f.d {
            return Err(Error::invalid(format!(
                "points array has {} entries, expected m*d = {}",
                f.points.len(),
                f.m * f.d
            )));
        }
        let points = Array2::from_shape_vec((f.m, f.d), f.points)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let labels = f.labels.iter().map(|&y| y as f64).collect();
        Dataset::new(points, labels, f.seed, f.source)
    }
}

/// `m` i.i.d. points uniform on the radius-√d sphere: a standard normal
/// vector, normalized and scaled by √d.
pub fn sample_sphere(m: usize, d: usize, seed: u64, rule: LabelRule) -> Result<Dataset> {
    if m == 0 || d == 0 {
        return Err(Error::invalid(format!("sample_sphere needs m, d >= 1 (m={m}, d={d})")));
    }
    let mut rng = rng_from_seed(seed);
    let radius = (d as f64).sqrt();
    let mut points = Array2::<f64>::zeros((m, d));
    let mut labels = Vec::with_capacity(m);
    for (i, mut row) in points.outer_iter_mut().enumerate() {
        loop {
            row.mapv_inplace(|_| rng.sample(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|x| x * (radius / norm));
                break;
            }
        }
        let y = match rule {
            LabelRule::Uniform => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            LabelRule::BalancedAlternating => {
                if i % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        labels.push(y);
    }
    Dataset::new(points, labels, seed, DatasetSource::SphereUniform)
}

/// `x_i = √d·e_i` for `i = 1..d`, labels +1 on the first half and −1 on the second.
pub fn orthogonal_dataset(d: usize) -> Result<Dataset> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::invalid(format!("orthogonal_dataset needs an even d >= 2, got {d}")));
    }
    let points = Array2::from_diag_elem(d, (d as f64).sqrt());
    let labels = (0..d).map(|i| if i < d / 2 { 1.0 } else { -1.0 }).collect();
    Dataset::new(points, labels, 0, DatasetSource::OrthogonalBasis)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    /// max_{i≠j} |⟨x_i, x_j⟩|; 0 when m = 1.
    pub p_max: f64,
    pub p_max_unit: f64,
    /// Pair attaining `p_max`.
    pub argmax: Option<(usize, usize)>,
    pub balance_c: f64,
    pub c_prime: f64,
}

pub fn correlation_stats(ds: &Dataset) -> CorrelationStats {
    let (p_max, argmax) = max_abs_inner(ds, None);
    let m = ds.len();
    let d = ds.dim() as f64;
    let pos = ds.positives();
    CorrelationStats {
        p_max,
        p_max_unit: p_max / d,
        argmax,
        balance_c: pos.min(m - pos) as f64 / m as f64,
        c_prime: m as f64 * (p_max + 1.0) / (d + 1.0),
    }
}

/// Largest |⟨x_i, x_j⟩| over distinct pairs drawn from `subset` (or all points).
pub(crate) fn max_abs_inner(ds: &Dataset, subset: Option<&[usize]>) -> (f64, Option<(usize, usize)>) {
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => s,
        None => {
            all = (0..ds.len()).collect();
            &all
        }
    };
    let mut best = 0.0;
    let mut arg = None;
    for (a, &i) in idx.iter().enumerate() {
        let xi = ds.point(i);
        for &j in &idx[a + 1..] {
            let v = xi.dot(&ds.point(j)).abs();
            if arg.is_none() || v > best {
                best = v;
                arg = Some((i, j));
            }
        }
    }
    (best, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn one_dimensional_sphere_is_two_points() {
        let ds = sample_sphere(5, 1, 3, LabelRule::Uniform).unwrap();
        for i in 0..5 {
            assert_eq!(ds.point(i)[0].abs(), 1.0);
        }
    }

    #[test]
    fn sphere_norms() {
        let ds = sample_sphere(50, 300, 7, LabelRule::Uniform).unwrap();
        let r = 300f64.sqrt();
        for row in ds.points().outer_iter() {
            assert!((row.dot(&row).sqrt() - r).abs() <= 1e-10 * r);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_sphere(8, 13, 99, LabelRule::Uniform).unwrap();
        let b = sample_sphere(8, 13, 99, LabelRule::Uniform).unwrap();
        assert_eq!(a, b);
        let c = sample_sphere(8, 13, 100, LabelRule::Uniform).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn alternating_labels() {
        let ds = sample_sphere(5, 4, 1, LabelRule::BalancedAlternating).unwrap();
        assert_eq!(ds.labels().to_vec(), vec![1.0, -1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(matches!(sample_sphere(0, 3, 1, LabelRule::Uniform), Err(Error::InvalidArgument(_))));
        assert!(matches!(sample_sphere(3, 0, 1, LabelRule::Uniform), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn orthogonal_d4() {
        let ds = orthogonal_dataset(4).unwrap();
        assert_eq!(ds.len(), 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(ds.point(i)[j], if i == j { 2.0 } else { 0.0 });
            }
        }
        assert_eq!(ds.labels().to_vec(), vec![1.0, 1.0, -1.0, -1.0]);
        let st = correlation_stats(&ds);
        assert_eq!(st.p_max, 0.0);
        assert_eq!(st.balance_c, 0.5);
        assert_relative_eq!(st.c_prime, 0.8, max_relative = 1e-15);
    }

    #[test]
    fn orthogonal_d2() {
        let ds = orthogonal_dataset(2).unwrap();
        let r = 2f64.sqrt();
        assert_eq!(ds.point(0).to_vec(), vec![r, 0.0]);
        assert_eq!(ds.point(1).to_vec(), vec![0.0, r]);
        assert_eq!(ds.labels().to_vec(), vec![1.0, -1.0]);
    }

    #[test]
    fn orthogonal_odd_rejected() {
        assert!(matches!(orthogonal_dataset(5), Err(Error::InvalidArgument(_))));
        assert!(matches!(orthogonal_dataset(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn duplicated_point_has_full_correlation() {
        let base = sample_sphere(3, 9, 5, LabelRule::Uniform).unwrap();
        let mut pts = base.points().to_owned();
        let first = pts.row(0).to_owned();
        pts.row_mut(2).assign(&first);
        let ds = Dataset::new(pts, base.labels().to_vec(), 0, DatasetSource::Explicit).unwrap();
        assert_relative_eq!(correlation_stats(&ds).p_max, 9.0, max_relative = 1e-14);
    }

    #[test]
    fn single_point_stats() {
        let ds = sample_sphere(1, 4, 0, LabelRule::Uniform).unwrap();
        let st = correlation_stats(&ds);
        assert_eq!(st.p_max, 0.0);
        assert_eq!(st.balance_c, 0.0);
        assert!(st.argmax.is_none());
    }

    #[test]
    fn bad_norm_or_label_rejected() {
        let pts = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        assert!(Dataset::new(pts, vec![1.0], 0, DatasetSource::Explicit).is_err());
        let pts = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        assert!(Dataset::new(pts, vec![0.5], 0, DatasetSource::Explicit).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let ds = sample_sphere(4, 6, 21, LabelRule::Uniform).unwrap();
        let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn json_shape_mismatch_rejected() {
        let text = r#"{"d":2,"m":2,"seed":0,"source":"explicit","labels":[1,-1],"points":[1.0,1.0]}"#;
        assert!(Dataset::from_json(text).is_err());
    }
}
