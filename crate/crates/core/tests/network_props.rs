use marginlab::attack::{default_c_max, min_flip_size, universal_direction};
use marginlab::dataset::{sample_sphere, Dataset, LabelRule};
use marginlab::{correlation_stats, LossKind, NetworkParams, TrainConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn random_net(k: usize, d: usize, seed: u64) -> NetworkParams {
    let mut rng = marginlab::rng::rng_from_seed(seed);
    let mut g = || rng.sample::<f64, _>(StandardNormal);
    let w = Array2::from_shape_simple_fn((k, d), &mut g);
    let b = Array1::from_shape_simple_fn(k, &mut g);
    let v = Array1::from_shape_simple_fn(k, &mut g);
    NetworkParams::new(w, b, v).unwrap()
}

#[test]
fn corr3_fixture_inner_products() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/corr3.ds.json");
    let ds = Dataset::load(path).unwrap();
    assert_eq!((ds.len(), ds.dim()), (3, 3));
    let s3 = 3f64.sqrt();
    // hand-computed: <x0,x1> = 0, <x0,x2> = √3, <x1,x2> = √3
    let dots = [
        ds.point(0).dot(&ds.point(1)),
        ds.point(0).dot(&ds.point(2)),
        ds.point(1).dot(&ds.point(2)),
    ];
    assert_eq!(dots[0], 0.0);
    assert!((dots[1] - s3).abs() < 1e-15 && (dots[2] - s3).abs() < 1e-15);
    let stats = correlation_stats(&ds);
    assert!((stats.p_max - s3).abs() < 1e-15);
    assert!((stats.p_max_unit - s3 / 3.0).abs() < 1e-15);
    assert!((stats.balance_c - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn output_order_survives_scaling() {
    let net = random_net(16, 8, 1);
    let probe = sample_sphere(40, 8, 2, LabelRule::Uniform).unwrap();
    let order = |n: &NetworkParams| {
        let out: Vec<f64> = (0..probe.len()).map(|i| n.forward(probe.point(i)).unwrap()).collect();
        let mut idx: Vec<usize> = (0..out.len()).collect();
        idx.sort_by(|&a, &b| out[a].total_cmp(&out[b]));
        idx
    };
    assert_eq!(order(&net), order(&net.scaled(3.7)));
    assert_eq!(order(&net), order(&net.scaled(0.01)));
}

#[test]
fn flip_sizes_invariant_under_scaling() {
    let net = random_net(20, 10, 5);
    let ds = relabel_by_sign(&net, &sample_sphere(12, 10, 4, LabelRule::Uniform).unwrap());
    let set: Vec<usize> = (0..ds.len()).collect();
    let (z_hat, _) = universal_direction(&ds, &set).unwrap();
    let base = min_flip_size(&net, &ds, &set, z_hat.view(), default_c_max(10)).unwrap();
    assert!(base.per_example.iter().any(Option::is_some));
    // power-of-two factors scale every intermediate exactly
    for alpha in [2.0, 0.5, 8.0] {
        let scaled = min_flip_size(&net.scaled(alpha), &ds, &set, z_hat.view(), default_c_max(10)).unwrap();
        assert_eq!(base, scaled, "alpha = {alpha}");
    }
    let other = min_flip_size(&net.scaled(3.3), &ds, &set, z_hat.view(), default_c_max(10)).unwrap();
    for (a, b) in base.per_example.iter().zip(&other.per_example) {
        match (a, b) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 2e-4 * a),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn direction_ignores_parameters() {
    let ds = sample_sphere(9, 7, 8, LabelRule::Uniform).unwrap();
    let set = [0usize, 2, 3, 7];
    let (a, _) = universal_direction(&ds, &set).unwrap();
    let (b, _) = universal_direction(&ds, &set).unwrap();
    assert_eq!(a, b);
    assert!((a.dot(&a) - 1.0).abs() < 1e-12);
}

#[test]
fn bracketing_soundness() {
    let d = 10;
    let ds = sample_sphere(15, d, 11, LabelRule::Uniform).unwrap();
    let net = random_net(24, d, 12);
    let ds = relabel_by_sign(&net, &ds);
    let set: Vec<usize> = (0..ds.len()).collect();
    let (z_hat, _) = universal_direction(&ds, &set).unwrap();
    let rep = min_flip_size(&net, &ds, &set, z_hat.view(), default_c_max(d)).unwrap();
    let flipped = |i: usize, c: f64| {
        let probe = &ds.point(i) - &(&z_hat * (ds.label(i) * c));
        ds.label(i) * net.forward(probe.view()).unwrap() < 0.0
    };
    let mut checked = 0;
    for (&i, c) in set.iter().zip(&rep.per_example) {
        let Some(c) = *c else { continue };
        checked += 1;
        assert!(flipped(i, c), "example {i} not flipped at its reported size {c}");
        // no sign change on the scanned prefix well below the crossing
        let below = (c - 1e-3 * (d as f64).sqrt()).max(0.0);
        let steps = 200;
        for s in 0..=steps {
            let t = below * s as f64 / steps as f64;
            assert!(!flipped(i, t), "example {i} flips at {t} < {c}");
        }
    }
    assert!(checked > 0);
}

fn relabel_by_sign(net: &NetworkParams, ds: &Dataset) -> Dataset {
    let labels: Vec<f64> = (0..ds.len())
        .map(|i| if net.forward(ds.point(i)).unwrap() >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    Dataset::new(ds.points().to_owned(), labels, ds.seed(), ds.source()).unwrap()
}

fn kink_distance(net: &NetworkParams, ds: &Dataset) -> f64 {
    (0..ds.len())
        .flat_map(|i| net.preactivations(ds.point(i)).unwrap().to_vec())
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn homogeneity(seed in 0u64..10_000, alpha in 0.01f64..100.0) {
        let net = random_net(7, 5, seed);
        let probe = sample_sphere(6, 5, seed ^ 0xabc, LabelRule::Uniform).unwrap();
        let scaled = net.scaled(alpha);
        for i in 0..probe.len() {
            let a = net.forward(probe.point(i)).unwrap();
            let b = scaled.forward(probe.point(i)).unwrap();
            let want = alpha * alpha * a;
            prop_assert!((b - want).abs() <= 1e-12 * want.abs().max(f64::MIN_POSITIVE) + 1e-300,
                "alpha {} got {} want {}", alpha, b, want);
        }
    }

    #[test]
    fn neuron_permutation(seed in 0u64..10_000, shift in 1usize..9) {
        let net = random_net(9, 4, seed);
        let mut perm: Vec<usize> = (0..9).map(|j| (j * 2 + shift) % 9).collect();
        perm.reverse();
        let p = net.permuted(&perm).unwrap();
        let probe = sample_sphere(5, 4, seed + 1, LabelRule::Uniform).unwrap();
        for i in 0..probe.len() {
            prop_assert_eq!(net.forward(probe.point(i)).unwrap(), p.forward(probe.point(i)).unwrap());
        }
    }

    #[test]
    fn gradient_matches_finite_differences(seed in 0u64..10_000, logistic in any::<bool>()) {
        let (d, m, k) = (6, 4, 5);
        let ds = sample_sphere(m, d, seed, LabelRule::Uniform).unwrap();
        let net = marginlab::init_params(d, k, &TrainConfig { init_seed: seed + 7, ..Default::default() }).unwrap();
        let net = NetworkParams::new(net.w().to_owned(), Array1::from_elem(k, 0.05), net.v().to_owned()).unwrap();
        let h = 1e-6;
        // stay away from ReLU kinks so that the central difference is smooth
        prop_assume!(kink_distance(&net, &ds) > 1e-3);
        let loss = if logistic { LossKind::Logistic } else { LossKind::Exponential };
        let (_, grad) = net.loss_and_gradient(&ds, loss).unwrap();
        let g = grad.flatten();
        let base = net.flatten();
        let rebuild = |theta: &[f64]| {
            let w = Array2::from_shape_vec((k, d), theta[..k * d].to_vec()).unwrap();
            let b = Array1::from(theta[k * d..k * d + k].to_vec());
            let v = Array1::from(theta[k * d + k..].to_vec());
            NetworkParams::new(w, b, v).unwrap()
        };
        let mut fd = vec![0.0; base.len()];
        for t in 0..base.len() {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[t] += h;
            dn[t] -= h;
            let lu = rebuild(&up).loss_and_gradient(&ds, loss).unwrap().0;
            let ld = rebuild(&dn).loss_and_gradient(&ds, loss).unwrap().0;
            fd[t] = (lu - ld) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }
}
