use marginlab::dataset::{sample_sphere, LabelRule};
use marginlab::kkt::DEFAULT_ACTIVATION_TOL;
use marginlab::{
    antipodal_kkt_fixture, correlation_stats, kkt_residual, margin_set, normalize_to_margin, train,
    TrainConfig,
};

#[test]
fn antipodal_fixture_all_dims() {
    for d in 2..=64 {
        let (net, ds, lam) = antipodal_kkt_fixture(d).unwrap();
        let rep = kkt_residual(&net, &ds, &[0, 1], DEFAULT_ACTIVATION_TOL).unwrap();
        assert!(rep.max_residual() < 1e-10, "d = {d}: {rep:?}");
        for (a, b) in rep.lambdas.iter().zip(&lam) {
            assert!((a - b).abs() < 1e-10, "d = {d}");
        }
    }
}

#[test]
fn residuals_invariant_under_rescaling() {
    let ds = sample_sphere(8, 12, 4, LabelRule::Uniform).unwrap();
    let cfg = TrainConfig {
        init_seed: 4,
        stop_loss: 1e-8,
        ..Default::default()
    };
    let net = train(&ds, 16, &cfg).unwrap().final_params;
    let base = normalize_to_margin(&net, &ds).unwrap();
    let set = margin_set(&base, &ds, 1.1).unwrap().margin_set;
    let r0 = kkt_residual(&base, &ds, &set, DEFAULT_ACTIVATION_TOL).unwrap();
    for alpha in [0.3, 2.0, 17.0] {
        let other = normalize_to_margin(&net.scaled(alpha), &ds).unwrap();
        let r = kkt_residual(&other, &ds, &set, DEFAULT_ACTIVATION_TOL).unwrap();
        assert!((r.stationarity_residual_w - r0.stationarity_residual_w).abs() < 1e-8);
        assert!((r.stationarity_residual_b - r0.stationarity_residual_b).abs() < 1e-8);
        assert!((r.stationarity_residual_v - r0.stationarity_residual_v).abs() < 1e-8);
        assert!((r.complementarity_residual - r0.complementarity_residual).abs() < 1e-8);
    }
}

#[test]
fn lambdas_vanish_off_the_set() {
    let (net, ds, _) = antipodal_kkt_fixture(5).unwrap();
    let rep = kkt_residual(&net, &ds, &[1], DEFAULT_ACTIVATION_TOL).unwrap();
    assert_eq!(rep.lambdas[0], 0.0);
}

#[test]
fn sampled_points_on_sphere() {
    for seed in 0..5 {
        let ds = sample_sphere(30, 17, seed, LabelRule::Uniform).unwrap();
        for i in 0..ds.len() {
            let n = ds.point(i).dot(&ds.point(i)).sqrt();
            assert!((n - 17f64.sqrt()).abs() <= 1e-10 * 17f64.sqrt());
        }
    }
}

#[test]
fn near_orthogonality_second_claim() {
    // m = ⌈√2000⌉ = 45; fraction of seeds with max unit inner product above ln(d)/√d
    let d = 2000usize;
    let m = (d as f64).sqrt().ceil() as usize;
    let bound = (d as f64).ln() / (d as f64).sqrt();
    let seeds = 50;
    let exceed = (0..seeds)
        .filter(|&s| correlation_stats(&sample_sphere(m, d, s, LabelRule::Uniform).unwrap()).p_max_unit > bound)
        .count();
    assert!(exceed as f64 <= 0.2 * seeds as f64, "{exceed} of {seeds} seeds exceed {bound}");
}
