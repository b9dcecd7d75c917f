//! Universal perturbations along `z = Σ_{i∈I} y_i x_i`.
//!
//! `I` is the margin set: examples whose margin is within a multiplicative
//! slack of the smallest one. The empirical mode measures the smallest
//! step along `ẑ = z/‖z‖` that flips each example in `I`; the theoretical
//! mode evaluates the closed-form scaling `η₁ + η₂` that drives every
//! example past the opposite margin at a KKT point.

use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::{max_abs_inner, Dataset};
use crate::error::{Error, Result};
use crate::network::NetworkParams;

pub const DEFAULT_SLACK: f64 = 1.1;

/// First probe of the flip scan, in units of √d.
const SCAN_START: f64 = 1e-3;
/// Relative width of the final bisection bracket.
const BISECT_RTOL: f64 = 1e-4;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub margins: Vec<f64>,
    pub i_marg: usize,
    pub slack: f64,
    pub margin_set: Vec<usize>,
    pub i_plus: Vec<usize>,
    pub i_minus: Vec<usize>,
    /// min(|I⁺|, |I⁻|) / |I|
    pub balance_c: f64,
    /// max over distinct i, j ∈ I of |⟨x_i, x_j⟩|
    pub p_margin: f64,
    /// |I|(p_margin + 1)/(d + 1)
    pub c_prime_margin: f64,
}

impl MarginReport {
    pub fn margin_min(&self) -> f64 {
        self.margins[self.i_marg]
    }

    pub fn ratio(&self) -> f64 {
        self.margin_set.len() as f64 / self.margins.len() as f64
    }
}

pub fn margin_set(params: &NetworkParams, ds: &Dataset, slack: f64) -> Result<MarginReport> {
    let margins = params.margins(ds)?;
    margin_set_from_margins(ds, margins.as_slice().unwrap_or(&margins.to_vec()), slack)
}

/// Margin-set extraction from precomputed margins `y_i N(x_i)`.
pub fn margin_set_from_margins(ds: &Dataset, margins: &[f64], slack: f64) -> Result<MarginReport> {
    if margins.len() != ds.len() {
        return Err(Error::invalid(format!("{} margins for {} examples", margins.len(), ds.len())));
    }
    if !(slack >= 1.0) {
        return Err(Error::invalid(format!("slack must be >= 1, got {slack}")));
    }
    let bad: Vec<usize> = (0..margins.len()).filter(|&i| !(margins[i] > 0.0)).collect();
    if !bad.is_empty() {
        return Err(Error::NotInterpolated { indices: bad });
    }
    let i_marg = (0..margins.len())
        .min_by(|&a, &b| margins[a].total_cmp(&margins[b]))
        .expect("nonempty dataset");
    let cut = slack * margins[i_marg];
    let set: Vec<usize> = (0..margins.len()).filter(|&i| margins[i] <= cut).collect();
    let (i_plus, i_minus): (Vec<usize>, Vec<usize>) = set.iter().partition(|&&i| ds.label(i) > 0.0);
    let p_margin = max_abs_inner(ds, Some(&set)).0;
    let n = set.len();
    Ok(MarginReport {
        margins: margins.to_vec(),
        i_marg,
        slack,
        balance_c: i_plus.len().min(i_minus.len()) as f64 / n as f64,
        c_prime_margin: n as f64 * (p_margin + 1.0) / (ds.dim() as f64 + 1.0),
        p_margin,
        margin_set: set,
        i_plus,
        i_minus,
    })
}

fn check_indices(ds: &Dataset, set: &[usize]) -> Result<()> {
    if set.is_empty() {
        return Err(Error::invalid("empty index set"));
    }
    match set.iter().find(|&&i| i >= ds.len()) {
        Some(i) => Err(Error::invalid(format!("index {i} out of range for m={}", ds.len()))),
        None => Ok(()),
    }
}

/// Returns `(ẑ, z)` with `z = Σ_{i∈I} y_i x_i` and `ẑ = z/‖z‖`.
pub fn universal_direction(ds: &Dataset, set: &[usize]) -> Result<(Array1<f64>, Array1<f64>)> {
    check_indices(ds, set)?;
    let mut raw = Array1::zeros(ds.dim());
    for &i in set {
        raw.scaled_add(ds.label(i), &ds.point(i));
    }
    let norm = raw.dot(&raw).sqrt();
    if !(norm >= DEGENERATE_NORM) {
        return Err(Error::DegenerateDirection { norm });
    }
    Ok((&raw / norm, raw))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    /// Smallest flipping step per example of `I` (same order); `None` if
    /// no flip was found up to `c_max`.
    pub per_example: Vec<Option<f64>>,
    /// Largest per-example step, or `None` if any example never flipped.
    pub joint: Option<f64>,
    pub c_max: f64,
}

pub fn default_c_max(d: usize) -> f64 {
    4.0 * (d as f64).sqrt()
}

/// Minimal `c` such that `y_i N(x_i − y_i c ẑ) < 0`, per example of `I`.
///
/// Each search doubles `c` from `1e-3·√d` until the predicate holds (or
/// `c_max` is reached), then bisects the last bracket to a relative width
/// of 1e-4. The first sign change found is reported; later re-crossings of
/// the piecewise-linear path are ignored.
pub fn min_flip_size(
    params: &NetworkParams,
    ds: &Dataset,
    set: &[usize],
    z_hat: ArrayView1<f64>,
    c_max: f64,
) -> Result<FlipReport> {
    check_indices(ds, set)?;
    if z_hat.len() != ds.dim() || params.dim() != ds.dim() {
        return Err(Error::invalid("direction, network and dataset dimensions differ"));
    }
    if !(c_max > 0.0) {
        return Err(Error::invalid(format!("c_max must be positive, got {c_max}")));
    }
    let bad: Vec<usize> = set
        .iter()
        .copied()
        .filter(|&i| !(ds.label(i) * params.forward_unchecked(ds.point(i)) > 0.0))
        .collect();
    if !bad.is_empty() {
        return Err(Error::NotInterpolated { indices: bad });
    }

    let start = SCAN_START * (ds.dim() as f64).sqrt();
    let per_example: Vec<Option<f64>> = set
        .iter()
        .map(|&i| {
            let (x, y) = (ds.point(i), ds.label(i));
            let flipped = |c: f64| {
                let probe = &x - &(&z_hat * (y * c));
                y * params.forward_unchecked(probe.view()) < 0.0
            };
            first_crossing(flipped, start, c_max)
        })
        .collect();
    let joint = per_example
        .iter()
        .try_fold(0.0f64, |acc, c| c.map(|c| acc.max(c)));
    Ok(FlipReport {
        per_example,
        joint,
        c_max,
    })
}

fn first_crossing(flipped: impl Fn(f64) -> bool, start: f64, c_max: f64) -> Option<f64> {
    let mut lo = 0.0;
    let mut c = start.min(c_max);
    let mut hi = loop {
        if flipped(c) {
            break c;
        }
        if c >= c_max {
            return None;
        }
        lo = c;
        c = (2.0 * c).min(c_max);
    };
    while hi - lo > BISECT_RTOL * hi {
        let mid = 0.5 * (lo + hi);
        if flipped(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationMode {
    Empirical,
    Theoretical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub mode: PerturbationMode,
    pub margin_set: Vec<usize>,
    pub z_hat: Vec<f64>,
    pub raw_sum: Vec<f64>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    /// (η₁ + η₂)·raw_sum
    pub z_theoretical: Option<Vec<f64>>,
    /// ‖z_theoretical‖ in theoretical mode, ‖raw_sum‖ in empirical mode.
    pub z_norm: f64,
    /// 18√(2d)/(c√m)
    pub norm_bound: Option<f64>,
    pub per_example_flip: Vec<Option<f64>>,
    pub joint_flip_size: Option<f64>,
}

impl PerturbationReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PerturbationReport> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Fills the flip columns by scanning along `z_hat`.
    pub fn with_flips(mut self, params: &NetworkParams, ds: &Dataset, c_max: f64) -> Result<Self> {
        let z_hat = Array1::from(self.z_hat.clone());
        let flips = min_flip_size(params, ds, &self.margin_set, z_hat.view(), c_max)?;
        self.per_example_flip = flips.per_example;
        self.joint_flip_size = flips.joint;
        Ok(self)
    }
}

/// Margin set, universal direction and flip sizes in one pass.
pub fn empirical_perturbation(
    params: &NetworkParams,
    ds: &Dataset,
    slack: f64,
    c_max: f64,
) -> Result<(MarginReport, PerturbationReport)> {
    let margins = margin_set(params, ds, slack)?;
    let (z_hat, raw) = universal_direction(ds, &margins.margin_set)?;
    let flips = min_flip_size(params, ds, &margins.margin_set, z_hat.view(), c_max)?;
    let report = PerturbationReport {
        mode: PerturbationMode::Empirical,
        margin_set: margins.margin_set.clone(),
        z_norm: raw.dot(&raw).sqrt(),
        z_hat: z_hat.to_vec(),
        raw_sum: raw.to_vec(),
        eta1: None,
        eta2: None,
        z_theoretical: None,
        norm_bound: None,
        per_example_flip: flips.per_example,
        joint_flip_size: flips.joint,
    };
    Ok((margins, report))
}

/// Closed-form perturbation for a KKT point whose margin set is `I`.
///
/// With `m = |I|`, `p = max_{i≠j∈I} |⟨x_i,x_j⟩|`, `c` the class balance of
/// `I` and `c′ = m(p+1)/(d+1) ≤ 1/3`:
/// `η₁ = (p+1)/(d−mp)`, `η₂ = 2(cc′+1)(d+1)/(mc(d−mp))`, and
/// `z = (η₁+η₂)·Σ_{i∈I} y_i x_i` with `‖z‖ ≤ 18√(2d)/(c√m)`.
pub fn theoretical_perturbation(ds: &Dataset, set: &[usize]) -> Result<PerturbationReport> {
    check_indices(ds, set)?;
    let m = set.len();
    let pos = set.iter().filter(|&&i| ds.label(i) > 0.0).count();
    if m < 2 || pos == 0 || pos == m {
        return Err(Error::invalid(format!(
            "theoretical perturbation needs both classes in I (|I| = {m}, |I+| = {pos})"
        )));
    }
    let d = ds.dim();
    let df = d as f64;
    let radius = df.sqrt();
    for &i in set {
        let x = ds.point(i);
        let norm = x.dot(&x).sqrt();
        if ((norm - radius) / radius).abs() > crate::dataset::NORM_RTOL {
            return Err(Error::invalid(format!("point {i} is off the radius-sqrt(d) sphere")));
        }
    }
    let mf = m as f64;
    let p = max_abs_inner(ds, Some(set)).0;
    let c = pos.min(m - pos) as f64 / mf;
    let c_prime = mf * (p + 1.0) / (df + 1.0);
    if c_prime > 1.0 / 3.0 {
        return Err(Error::HypothesisViolated { m, p, d, c_prime });
    }
    let gap = df - mf * p;
    if !(gap > 0.0) {
        return Err(Error::Internal(format!("d - m*p = {gap} <= 0 although c' <= 1/3")));
    }
    let eta1 = (p + 1.0) / gap;
    let eta2 = 2.0 * (c * c_prime + 1.0) * (df + 1.0) / (mf * c * gap);
    let (z_hat, raw) = universal_direction(ds, set)?;
    let eta = eta1 + eta2;
    let z = raw.mapv(|r| eta * r);
    let z_norm = z.dot(&z).sqrt();
    let norm_bound = 18.0 * (2.0 * df).sqrt() / (c * mf.sqrt());
    if z_norm > norm_bound {
        return Err(Error::Internal(format!("|z| = {z_norm} exceeds the bound {norm_bound}")));
    }
    Ok(PerturbationReport {
        mode: PerturbationMode::Theoretical,
        margin_set: set.to_vec(),
        z_hat: z_hat.to_vec(),
        raw_sum: raw.to_vec(),
        eta1: Some(eta1),
        eta2: Some(eta2),
        z_theoretical: Some(z.to_vec()),
        z_norm,
        norm_bound: Some(norm_bound),
        per_example_flip: Vec::new(),
        joint_flip_size: None,
    })
}

/// `N(x_i − y_i z)` for each `i` in `set`: the output after pushing every
/// example toward the opposite class by the same vector.
pub fn perturbed_outputs(
    params: &NetworkParams,
    ds: &Dataset,
    set: &[usize],
    z: ArrayView1<f64>,
) -> Result<Vec<f64>> {
    check_indices(ds, set)?;
    set.iter()
        .map(|&i| {
            let probe = &ds.point(i) - &(&z * ds.label(i));
            params.forward(probe.view())
        })
        .collect()
}
