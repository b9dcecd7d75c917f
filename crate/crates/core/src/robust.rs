//! A width-m network that is provably robust on nearly orthogonal data, and
//! an attack harness that tries to falsify its certified radius.
//!
//! Neuron `j` is a bump around `x_j`: `w_j = 2x_j/(d(1−c))`,
//! `b_j = −(1+c)/(1−c)`, `v_j = y_j`. At `x_i` its own neuron has
//! preactivation exactly 1 and every other neuron sits at or below −1, so
//! flipping the sign needs a perturbation longer than `(1−c)√d/4`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{correlation_stats, Dataset};
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::rng::rng_from_seed;

/// Gradient steps taken by the projected-descent attack.
const PGD_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustCertificate {
    pub margin_min: f64,
    /// (1 − c)·√d/4
    pub claimed_radius: f64,
    pub c_used: f64,
    pub width_k: usize,
}

pub fn build_robust(ds: &Dataset, c: f64, k: usize) -> Result<(NetworkParams, RobustCertificate)> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::invalid(format!("c must lie in [0, 1), got {c}")));
    }
    let (m, d) = (ds.len(), ds.dim());
    if k < m {
        return Err(Error::invalid(format!("width {k} is smaller than the {m} examples")));
    }
    let df = d as f64;
    let stats = correlation_stats(ds);
    let bound = c * df;
    if stats.p_max > bound * (1.0 + 1e-12) + 1e-12 {
        let (i, j) = stats.argmax.expect("p_max > 0 needs a pair");
        return Err(Error::PreconditionViolation {
            i,
            j,
            inner: stats.p_max,
            bound,
        });
    }
    let scale = 2.0 / (df * (1.0 - c));
    let bias = -(1.0 + c) / (1.0 - c);
    let mut w = Array2::zeros((k, d));
    w.slice_mut(ndarray::s![..m, ..]).assign(&ds.points().mapv(|x| scale * x));
    let mut b = Array1::zeros(k);
    b.slice_mut(ndarray::s![..m]).fill(bias);
    let mut v = Array1::zeros(k);
    v.slice_mut(ndarray::s![..m]).assign(&ds.labels());
    let params = NetworkParams::new(w, b, v)?;
    let margin_min = params.margins(ds)?.iter().copied().fold(f64::INFINITY, f64::min);
    let cert = RobustCertificate {
        margin_min,
        claimed_radius: (1.0 - c) * df.sqrt() / 4.0,
        c_used: c,
        width_k: k,
    };
    Ok((params, cert))
}

/// Uses the smallest admissible `c = p_max/d` for the dataset.
pub fn build_robust_tight(ds: &Dataset, k: usize) -> Result<(NetworkParams, RobustCertificate)> {
    let c = correlation_stats(ds).p_max / ds.dim() as f64;
    if c >= 1.0 {
        return Err(Error::invalid("dataset has a repeated or antipodal pair (p_max = d)"));
    }
    build_robust(ds, c, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub radius: f64,
    /// Number of (example, attack) pairs whose perturbed margin went negative.
    pub flips_found: usize,
    /// Smallest margin `y_i N(x')` seen over every attacked point.
    pub worst_margin_after: f64,
    pub trials: usize,
    pub flipped_examples: Vec<usize>,
}

/// Tries to flip every example inside the ball of the given radius.
///
/// Attacks per example: `attack_budget` random directions (shared by all
/// examples and drawn from `seed`), the directions toward and away from each
/// point of the other class, the input-gradient direction, a projected
/// gradient descent on the margin, and both signs of any `extra_directions`.
/// Along every direction the margin is minimized exactly over the segment
/// `[0, radius]`, so a flip found at radius `r` is found again at any larger
/// radius.
pub fn certify_radius(
    params: &NetworkParams,
    ds: &Dataset,
    radius: f64,
    attack_budget: usize,
    seed: u64,
) -> Result<CertifyReport> {
    certify_radius_with(params, ds, radius, attack_budget, seed, &[])
}

pub fn certify_radius_with(
    params: &NetworkParams,
    ds: &Dataset,
    radius: f64,
    attack_budget: usize,
    seed: u64,
    extra_directions: &[Array1<f64>],
) -> Result<CertifyReport> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("radius must be a finite nonnegative number, got {radius}")));
    }
    let d = ds.dim();
    if params.dim() != d || extra_directions.iter().any(|u| u.len() != d) {
        return Err(Error::invalid("attack dimensions do not match the dataset"));
    }
    let mut rng = rng_from_seed(seed);
    let random_dirs: Vec<Array1<f64>> = (0..attack_budget)
        .map(|_| loop {
            let u = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
            if let Some(u) = unit(u) {
                break u;
            }
        })
        .collect();
    let extras: Vec<Array1<f64>> = extra_directions
        .iter()
        .filter_map(|u| unit(u.clone()))
        .flat_map(|u| [-&u, u])
        .collect();

    let mut report = CertifyReport {
        radius,
        flips_found: 0,
        worst_margin_after: f64::INFINITY,
        trials: 0,
        flipped_examples: Vec::new(),
    };
    for i in 0..ds.len() {
        let (x, y) = (ds.point(i), ds.label(i));
        let mut dirs: Vec<Array1<f64>> = Vec::new();
        for j in (0..ds.len()).filter(|&j| ds.label(j) != y) {
            if let Some(u) = unit(&ds.point(j) - &x) {
                dirs.push(-&u);
                dirs.push(u);
            }
        }
        if let Some(u) = unit(-margin_gradient(params, x, y)) {
            dirs.push(u);
        }
        let pgd = pgd_attack(params, x, y, radius);
        if let Some(u) = unit(&pgd - &x) {
            dirs.push(u);
        }

        let mut flipped = false;
        for u in random_dirs.iter().chain(&extras).chain(&dirs) {
            let worst = min_margin_on_segment(params, x, y, u.view(), radius);
            report.trials += 1;
            report.worst_margin_after = report.worst_margin_after.min(worst);
            if worst < 0.0 {
                report.flips_found += 1;
                flipped = true;
            }
        }
        // the descent iterate itself, which may lie strictly inside the ball
        let at_pgd = y * params.forward_unchecked(pgd.view());
        report.trials += 1;
        report.worst_margin_after = report.worst_margin_after.min(at_pgd);
        if at_pgd < 0.0 {
            report.flips_found += 1;
            flipped = true;
        }
        if flipped {
            report.flipped_examples.push(i);
        }
    }
    Ok(report)
}

fn unit(u: Array1<f64>) -> Option<Array1<f64>> {
    let n = u.dot(&u).sqrt();
    (n > 1e-300 && n.is_finite()).then(|| u / n)
}

/// ∇ₓ of `y·N(x)` (ReLU derivative 0 at the kink).
fn margin_gradient(params: &NetworkParams, x: ArrayView1<f64>, y: f64) -> Array1<f64> {
    let pre = params.w().dot(&x) + params.b();
    let mut g = Array1::zeros(x.len());
    for (j, &z) in pre.iter().enumerate() {
        if z > 0.0 {
            g.scaled_add(y * params.v()[j], &params.w().row(j));
        }
    }
    g
}

/// Normalized-gradient descent on the margin, projected onto the ball.
fn pgd_attack(params: &NetworkParams, x: ArrayView1<f64>, y: f64, radius: f64) -> Array1<f64> {
    let mut cur = x.to_owned();
    if radius == 0.0 {
        return cur;
    }
    let step = 2.5 * radius / PGD_STEPS as f64;
    for _ in 0..PGD_STEPS {
        let Some(g) = unit(margin_gradient(params, cur.view(), y)) else {
            break;
        };
        cur.scaled_add(-step, &g);
        let delta = &cur - &x;
        let n = delta.dot(&delta).sqrt();
        if n > radius {
            cur = &x + &(delta * (radius / n));
        }
    }
    cur
}

/// Exact minimum of `y·N(x + s·u)` over `s ∈ [0, radius]`.
///
/// Along the ray every preactivation is affine in `s`, so the output is
/// piecewise linear with kinks where a preactivation crosses zero; the
/// minimum sits at an endpoint or a kink.
pub fn min_margin_on_segment(
    params: &NetworkParams,
    x: ArrayView1<f64>,
    y: f64,
    u: ArrayView1<f64>,
    radius: f64,
) -> f64 {
    let a = params.w().dot(&x) + params.b();
    let slope = params.w().dot(&u);
    let v = params.v().mapv(|v| y * v);
    let start: f64 = a.iter().zip(v.iter()).map(|(&a, &v)| v * a.max(0.0)).sum();
    let mut best = start;

    // neurons active just after s = 0
    let (mut lin, mut rate) = (0.0, 0.0);
    let mut active = vec![false; a.len()];
    let mut kinks = Vec::new();
    for j in 0..a.len() {
        if a[j] > 0.0 || (a[j] == 0.0 && slope[j] > 0.0) {
            active[j] = true;
            lin += v[j] * a[j];
            rate += v[j] * slope[j];
        }
        if slope[j] != 0.0 {
            let s = -a[j] / slope[j];
            if s > 0.0 && s < radius {
                kinks.push((s, j));
            }
        }
    }
    kinks.sort_by(|p, q| p.0.total_cmp(&q.0));
    for (s, j) in kinks {
        best = best.min(lin + s * rate);
        let sign = if active[j] { -1.0 } else { 1.0 };
        active[j] = !active[j];
        lin += sign * v[j] * a[j];
        rate += sign * v[j] * slope[j];
    }
    best.min(lin + radius * rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::universal_direction;
    use crate::dataset::{orthogonal_dataset, sample_sphere, LabelRule};

    #[test]
    fn orthogonal_construction_matches_closed_form() {
        let ds = orthogonal_dataset(4).unwrap();
        let (net, cert) = build_robust(&ds, 0.0, 4).unwrap();
        for j in 0..4 {
            for t in 0..4 {
                assert_eq!(net.w()[[j, t]], if j == t { 1.0 } else { 0.0 });
            }
            assert_eq!(net.b()[j], -1.0);
            assert_eq!(net.v()[j], ds.label(j));
        }
        assert_eq!(net.margins(&ds).unwrap().to_vec(), vec![1.0; 4]);
        assert_eq!(cert.margin_min, 1.0);
        assert_eq!(cert.claimed_radius, 0.5);
    }

    #[test]
    fn zero_neurons_are_inert() {
        let ds = orthogonal_dataset(4).unwrap();
        let (narrow, _) = build_robust(&ds, 0.0, 4).unwrap();
        let (wide, cert) = build_robust(&ds, 0.0, 6).unwrap();
        assert_eq!(cert.width_k, 6);
        for j in 4..6 {
            assert!(wide.w().row(j).iter().all(|&x| x == 0.0));
            assert_eq!((wide.b()[j], wide.v()[j]), (0.0, 0.0));
        }
        let probes = sample_sphere(20, 4, 3, LabelRule::Uniform).unwrap();
        for i in 0..20 {
            let x = probes.point(i);
            assert_eq!(narrow.forward(x).unwrap(), wide.forward(x).unwrap());
        }
    }

    #[test]
    fn precondition_names_pair() {
        let ds = sample_sphere(10, 20, 4, LabelRule::Uniform).unwrap();
        let st = correlation_stats(&ds);
        match build_robust(&ds, 0.5 * st.p_max / 20.0, 10) {
            Err(Error::PreconditionViolation { i, j, .. }) => assert_eq!(Some((i, j)), st.argmax),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn width_and_c_checked() {
        let ds = orthogonal_dataset(4).unwrap();
        assert!(matches!(build_robust(&ds, 0.0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_robust(&ds, 1.0, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_robust(&ds, -0.1, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn one_neuron_active_per_example() {
        let ds = sample_sphere(20, 100, 8, LabelRule::Uniform).unwrap();
        let (net, cert) = build_robust_tight(&ds, 20).unwrap();
        assert!((cert.margin_min - 1.0).abs() < 1e-10);
        for i in 0..20 {
            let pre = net.preactivations(ds.point(i)).unwrap();
            for (j, &z) in pre.iter().enumerate() {
                if j == i {
                    assert!((z - 1.0).abs() < 1e-10);
                } else {
                    assert!(z <= -1.0 + 1e-10, "pre[{i},{j}] = {z}");
                }
            }
        }
    }

    #[test]
    fn zero_radius_never_flips() {
        let ds = sample_sphere(6, 10, 1, LabelRule::Uniform).unwrap();
        let net = crate::trainer::init_params(10, 8, &Default::default()).unwrap();
        let margins = net.margins(&ds).unwrap();
        let keep: Vec<usize> = (0..6).filter(|&i| margins[i] > 0.0).collect();
        let ds = ds.subset(&keep).unwrap();
        let rep = certify_radius(&net, &ds, 0.0, 50, 2).unwrap();
        assert_eq!(rep.flips_found, 0);
    }

    #[test]
    fn segment_minimum_matches_dense_scan() {
        let ds = sample_sphere(1, 6, 5, LabelRule::Uniform).unwrap();
        let net = crate::trainer::init_params(6, 12, &crate::TrainConfig {
            init_seed: 9,
            init_scale_w: Some(1.0),
            ..Default::default()
        })
        .unwrap();
        let net = NetworkParams::new(
            net.w().to_owned(),
            Array1::linspace(-1.0, 1.0, 12),
            net.v().to_owned(),
        )
        .unwrap();
        let u = unit(Array1::from(vec![0.3, -1.0, 0.2, 0.5, -0.4, 0.9])).unwrap();
        let x = ds.point(0);
        let exact = min_margin_on_segment(&net, x, -1.0, u.view(), 5.0);
        let scan = (0..=200_000)
            .map(|t| {
                let s = 5.0 * t as f64 / 200_000.0;
                -net.forward((&x + &(&u * s)).view()).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(exact <= scan + 1e-12);
        assert!(scan - exact < 1e-4, "{exact} vs {scan}");
    }

    #[test]
    fn n_prime_is_broken_by_universal_direction() {
        let ds = orthogonal_dataset(4).unwrap();
        let net = NetworkParams::new(ds.points().mapv(|x| x / 4.0), Array1::zeros(4), ds.labels().to_owned())
            .unwrap();
        let (z_hat, _) = universal_direction(&ds, &[0, 1, 2, 3]).unwrap();
        let rep = certify_radius_with(&net, &ds, 3.0, 10, 0, &[z_hat]).unwrap();
        assert!(rep.flips_found >= 1);
    }
}
