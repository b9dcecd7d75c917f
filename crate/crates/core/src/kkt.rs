//! Distance of a network from a KKT point of
//! `min ½‖θ‖²  s.t.  y_i N_θ(x_i) ≥ 1`.
//!
//! At a KKT point there are multipliers `λ ≥ 0`, supported on the examples
//! with margin exactly 1, such that for every neuron
//!
//! ```text
//! w_j = Σ_i λ_i y_i v_j σ′_ij x_i
//! b_j = Σ_i λ_i y_i v_j σ′_ij
//! v_j = Σ_i λ_i y_i σ(w_j·x_i + b_j)
//! ```
//!
//! where `σ′_ij` is 1 or 0 away from the kink and anywhere in [0, 1] on it.
//! `kkt_residual` fits `λ` (and the kink values) to the first two equations
//! by nonnegative least squares and reports how far all three are from
//! holding.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetSource};
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::nnls::nnls_gram;

pub const DEFAULT_ACTIVATION_TOL: f64 = 1e-8;

/// Weight of the rows tying each kink coefficient to `λ_i`, relative to the
/// largest stationarity column norm.
const TIE_WEIGHT: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// One entry per example; zero outside `margin_set`.
    pub lambdas: Vec<f64>,
    pub margin_set: Vec<usize>,
    pub stationarity_residual_w: f64,
    pub stationarity_residual_b: f64,
    pub stationarity_residual_v: f64,
    pub complementarity_residual: f64,
    pub feasibility_min_margin: f64,
    /// (example, neuron) pairs whose preactivation fell inside the kink band.
    pub band_entries: usize,
    pub nnls_iterations: usize,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity_residual_w
            .max(self.stationarity_residual_b)
            .max(self.stationarity_residual_v)
            .max(self.complementarity_residual)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Rescales `θ` by `(min margin)^{-1/2}` so that the smallest margin is 1.
pub fn normalize_to_margin(params: &NetworkParams, ds: &Dataset) -> Result<NetworkParams> {
    let margins = params.margins(ds)?;
    let bad: Vec<usize> = (0..margins.len()).filter(|&i| !(margins[i] > 0.0)).collect();
    if !bad.is_empty() {
        return Err(Error::NotInterpolated { indices: bad });
    }
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 1.0 {
        return Ok(params.clone());
    }
    Ok(params.scaled(min.powf(-0.5)))
}

pub fn kkt_residual(
    params: &NetworkParams,
    ds: &Dataset,
    set: &[usize],
    activation_tol: f64,
) -> Result<KktReport> {
    if set.is_empty() || set.iter().any(|&i| i >= ds.len()) {
        return Err(Error::invalid("margin set must be a nonempty list of example indices"));
    }
    if !(activation_tol >= 0.0) {
        return Err(Error::invalid("activation_tol must be nonnegative"));
    }
    let margins = params.margins(ds)?;
    let n = set.len();
    let k = params.width();
    let x = ds.points().select(Axis(0), set);
    let y: Vec<f64> = set.iter().map(|&i| ds.label(i)).collect();
    let v = params.v();
    let mut pre = x.dot(&params.w().t());
    pre += &params.b();

    // hard ReLU derivatives and the in-band entries left free
    let mut hard = Array2::<f64>::zeros((n, k));
    let mut band: Vec<(usize, usize)> = Vec::new();
    for r in 0..n {
        for j in 0..k {
            let z = pre[[r, j]];
            if z > activation_tol {
                hard[[r, j]] = 1.0;
            } else if z >= -activation_tol && v[j] != 0.0 {
                band.push((r, j));
            }
        }
    }
    let nb = band.len();

    // kernel of the stacked (w_j, b_j) rows: ⟨x_i, x_i'⟩ + 1
    let mut kern = x.dot(&x.t());
    kern += 1.0;
    let v2 = v.mapv(|a| a * a);
    let q = hard.dot(&Array2::from_diag(&v2)).dot(&hard.t());

    let dim = n + 2 * nb;
    let mut g = DMatrix::<f64>::zeros(dim, dim);
    let mut h = DVector::<f64>::zeros(dim);
    for a in 0..n {
        for c in 0..n {
            g[(a, c)] = y[a] * y[c] * kern[[a, c]] * q[[a, c]];
        }
        h[a] = y[a] * (0..k).map(|j| v[j] * hard[[a, j]] * pre[[a, j]]).sum::<f64>();
    }
    for (e, &(r, j)) in band.iter().enumerate() {
        let col = n + e;
        for a in 0..n {
            let val = y[a] * y[r] * v2[j] * hard[[a, j]] * kern[[a, r]];
            g[(a, col)] = val;
            g[(col, a)] = val;
        }
        for (f, &(r2, j2)) in band.iter().enumerate() {
            if j2 == j {
                g[(col, n + f)] = y[r] * y[r2] * v2[j] * kern[[r, r2]];
            }
        }
        h[col] = y[r] * v[j] * pre[[r, j]];
    }
    if nb > 0 {
        // rows ρ(λ_r − μ_e − s_e) = 0 keep each kink coefficient μ_e = λ_r σ′ ≤ λ_r
        let rho2 = TIE_WEIGHT * TIE_WEIGHT * g.diagonal().amax().max(f64::MIN_POSITIVE);
        for (e, &(r, _)) in band.iter().enumerate() {
            let (mu, s) = (n + e, n + nb + e);
            for (p, sp) in [(r, 1.0), (mu, -1.0), (s, -1.0)] {
                for (qv, sq) in [(r, 1.0), (mu, -1.0), (s, -1.0)] {
                    g[(p, qv)] += rho2 * sp * sq;
                }
            }
        }
    }
    let sol = nnls_gram(&g, &h)?;

    let lambda_set: Vec<f64> = sol.x[..n].to_vec();
    let mut deriv = hard;
    for (e, &(r, j)) in band.iter().enumerate() {
        let lam = lambda_set[r];
        deriv[[r, j]] = if lam > 0.0 { (sol.x[n + e] / lam).clamp(0.0, 1.0) } else { 0.0 };
    }
    // C_ij = λ_i y_i v_j σ′_ij
    let mut coef = deriv;
    for r in 0..n {
        let ly = lambda_set[r] * y[r];
        for j in 0..k {
            coef[[r, j]] *= ly * v[j];
        }
    }
    let w_fit = coef.t().dot(&x);
    let b_fit = coef.sum_axis(Axis(0));
    let ly = Array1::from_iter((0..n).map(|r| lambda_set[r] * y[r]));
    let v_fit = pre.mapv(|z| z.max(0.0)).t().dot(&ly);

    let rel = |diff: f64, scale: f64| if scale > 0.0 { diff / scale } else { diff };
    let res_w = rel(frob(&(&params.w() - &w_fit)), frob(&params.w().to_owned()));
    let res_b = rel(l2(&(&params.b() - &b_fit)), l2(&params.b().to_owned()));
    let res_v = rel(l2(&(&params.v() - &v_fit)), l2(&params.v().to_owned()));

    let mut lambdas = vec![0.0; ds.len()];
    for (r, &i) in set.iter().enumerate() {
        lambdas[i] = lambda_set[r];
    }
    let complementarity = set
        .iter()
        .map(|&i| (lambdas[i] * (margins[i] - 1.0)).abs())
        .fold(0.0, f64::max);
    Ok(KktReport {
        lambdas,
        margin_set: set.to_vec(),
        stationarity_residual_w: res_w,
        stationarity_residual_b: res_b,
        stationarity_residual_v: res_v,
        complementarity_residual: complementarity,
        feasibility_min_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
        band_entries: nb,
        nnls_iterations: sol.iterations,
    })
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2(a: &Array1<f64>) -> f64 {
    a.dot(a).sqrt()
}

/// An exact KKT point: data `{(x, +1), (−x, −1)}` with `x = √d·e_1` and a
/// width-2 network `w = ±a·x`, `b = a`, `v = ±(d+1)^{-1/4}` where
/// `a = (d+1)^{-3/4}`. Both margins are 1 and `λ = ((d+1)^{-1/2}, (d+1)^{-1/2})`.
pub fn antipodal_kkt_fixture(d: usize) -> Result<(NetworkParams, Dataset, Vec<f64>)> {
    if d < 2 {
        return Err(Error::invalid(format!("antipodal fixture needs d >= 2, got {d}")));
    }
    let df = d as f64;
    let root = df.sqrt();
    let mut points = Array2::zeros((2, d));
    points[[0, 0]] = root;
    points[[1, 0]] = -root;
    let ds = Dataset::new(points, vec![1.0, -1.0], 0, DatasetSource::Explicit)?;

    let a = (df + 1.0).powf(-0.75);
    let out = (df + 1.0).powf(-0.25);
    let mut w = Array2::zeros((2, d));
    w[[0, 0]] = a * root;
    w[[1, 0]] = -a * root;
    let params = NetworkParams::new(w, Array1::from(vec![a, a]), Array1::from(vec![out, -out]))?;
    let lam = (df + 1.0).powf(-0.5);
    Ok((params, ds, vec![lam, lam]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{sample_sphere, LabelRule};

    #[test]
    fn fixture_values_d3() {
        let (net, ds, lam) = antipodal_kkt_fixture(3).unwrap();
        assert!((net.b()[0] - 0.353553390593).abs() < 1e-12);
        // 4^{-1/4} = sqrt(1/2)
        assert!((net.v()[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(lam, vec![0.5, 0.5]);
        let m = net.margins(&ds).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15 && (m[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fixture_residuals_vanish() {
        for d in [2usize, 3, 10, 64] {
            let (net, ds, lam) = antipodal_kkt_fixture(d).unwrap();
            let rep = kkt_residual(&net, &ds, &[0, 1], DEFAULT_ACTIVATION_TOL).unwrap();
            assert!(rep.stationarity_residual_w < 1e-10, "{rep:?}");
            assert!(rep.stationarity_residual_b < 1e-10);
            assert!(rep.stationarity_residual_v < 1e-10);
            assert!(rep.complementarity_residual < 1e-12);
            for (a, b) in rep.lambdas.iter().zip(&lam) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalize_min_margin_four() {
        let (net, ds, _) = antipodal_kkt_fixture(5).unwrap();
        let big = net.scaled(2.0);
        let m = big.margins(&ds).unwrap();
        assert!((m[0] - 4.0).abs() < 1e-14);
        let back = normalize_to_margin(&big, &ds).unwrap();
        let m = back.margins(&ds).unwrap();
        assert!((m.iter().copied().fold(f64::INFINITY, f64::min) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn normalize_identity_at_margin_one() {
        let ds = crate::dataset::orthogonal_dataset(4).unwrap();
        let net = NetworkParams::new(ds.points().mapv(|x| x / 4.0), Array1::zeros(4), ds.labels().to_owned())
            .unwrap();
        assert_eq!(normalize_to_margin(&net, &ds).unwrap(), net);
    }

    #[test]
    fn normalize_round_trip() {
        let (net, ds, _) = antipodal_kkt_fixture(7).unwrap();
        let back = normalize_to_margin(&net.scaled(3.0), &ds).unwrap();
        for (a, b) in back.flatten().iter().zip(net.flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn normalize_rejects_misclassified() {
        let (net, ds, _) = antipodal_kkt_fixture(4).unwrap();
        let flipped = ds.with_flipped_labels();
        assert!(matches!(normalize_to_margin(&net, &flipped), Err(Error::NotInterpolated { .. })));
    }

    #[test]
    fn lambda_zero_outside_set() {
        let (net, ds, _) = antipodal_kkt_fixture(4).unwrap();
        let rep = kkt_residual(&net, &ds, &[0], DEFAULT_ACTIVATION_TOL).unwrap();
        assert_eq!(rep.lambdas[1], 0.0);
        assert!(rep.lambdas[0] > 0.0);
        // dropping the negative example leaves neuron 2 unexplained
        assert!(rep.stationarity_residual_w > 0.5);
    }

    #[test]
    fn random_network_is_far_from_kkt() {
        let cfg = crate::TrainConfig {
            init_seed: 17,
            ..Default::default()
        };
        let net = crate::init_params(20, 30, &cfg).unwrap();
        let net = NetworkParams::new(
            net.w().to_owned(),
            Array1::from_iter((0..30).map(|j| 0.05 * (j as f64 - 15.0) / 15.0)),
            net.v().to_owned(),
        )
        .unwrap();
        let probe = sample_sphere(12, 20, 4, LabelRule::Uniform).unwrap();
        let labels: Vec<f64> = (0..12)
            .map(|i| if net.forward(probe.point(i)).unwrap() >= 0.0 { 1.0 } else { -1.0 })
            .collect();
        let ds = Dataset::new(probe.points().to_owned(), labels, 0, DatasetSource::Explicit).unwrap();
        let net = normalize_to_margin(&net, &ds).unwrap();
        let set = crate::attack::margin_set(&net, &ds, 1.1).unwrap().margin_set;
        let rep = kkt_residual(&net, &ds, &set, DEFAULT_ACTIVATION_TOL).unwrap();
        assert!(rep.stationarity_residual_w > 0.2, "{}", rep.stationarity_residual_w);
    }

    #[test]
    fn band_entries_are_fit() {
        // A neuron sitting exactly on its kink at the positive example: the
        // fit may choose σ′ in [0, 1], and σ′ = 1/2 is exact here.
        let d = 4usize;
        let (net, ds, _) = antipodal_kkt_fixture(d).unwrap();
        let (w, b, v) = net.into_parts();
        let mut w2 = Array2::zeros((3, d));
        w2.slice_mut(ndarray::s![..2, ..]).assign(&w);
        let mut b2 = b.to_vec();
        let mut v2 = v.to_vec();
        // neuron 3: w = t·x, b = −t·d at x gives preactivation 0 on example 0
        let lam = (d as f64 + 1.0).powf(-0.5);
        let vt = 0.3;
        let t = 0.5 * lam * vt;
        w2[[2, 0]] = t * (d as f64).sqrt();
        b2.push(-t * d as f64);
        v2.push(vt);
        // w = λ v σ′ x requires σ′ = t/(λ v) = 1/2, but then b should be +t
        // while it is −t·d, so only the w equation can be satisfied.
        let net = NetworkParams::new(w2, Array1::from(b2), Array1::from(v2)).unwrap();
        let rep = kkt_residual(&net, &ds, &[0, 1], DEFAULT_ACTIVATION_TOL).unwrap();
        assert_eq!(rep.band_entries, 1);
        assert!(rep.lambdas.iter().all(|&l| l >= 0.0));
    }
}
