//! Gradient descent with a geometrically growing step size.
//!
//! With an exponentially tailed loss the gradient shrinks like the loss
//! itself, so reaching losses near 1e-30 needs the step to grow: the step at
//! iteration `t` is `lr0 · lr_growth^⌊t / lr_period⌋`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{EvalBuffers, LossKind, NetworkParams};
use crate::rng::rng_from_seed;

/// Maximum number of points kept in `TrainReport::loss_trace`.
pub const TRACE_POINTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr0: f64,
    pub lr_growth: f64,
    pub lr_period: usize,
    pub batch_size: usize,
    pub stop_loss: f64,
    pub max_iters: usize,
    pub init_seed: u64,
    /// Std of the first-layer weights; `None` means 1/√d.
    pub init_scale_w: Option<f64>,
    /// Std of the second-layer weights; `None` means 1/√k.
    pub init_scale_v: Option<f64>,
    /// Losses at which to keep a copy of the parameters (first crossing).
    pub snapshot_losses: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Exponential,
            lr0: 1e-5,
            lr_growth: 1.1,
            lr_period: 100,
            batch_size: 5000,
            stop_loss: 1e-30,
            max_iters: 1_000_000,
            init_seed: 0,
            init_scale_w: None,
            init_scale_v: None,
            snapshot_losses: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("train config: {what}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_growth > 1.0 && self.lr_growth.is_finite()) {
            return bad("lr_growth must exceed 1");
        }
        if self.lr_period == 0 {
            return bad("lr_period must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.stop_loss > 0.0) {
            return bad("stop_loss must be positive");
        }
        if self.init_scale_w.is_some_and(|s| !(s >= 0.0)) || self.init_scale_v.is_some_and(|s| !(s >= 0.0)) {
            return bad("init scales must be nonnegative");
        }
        Ok(())
    }
}

pub fn lr_at(cfg: &TrainConfig, t: usize) -> f64 {
    let steps = (t / cfg.lr_period) as i32;
    cfg.lr0 * cfg.lr_growth.powi(steps)
}

/// Gaussian first-layer and output weights, zero biases.
pub fn init_params(d: usize, k: usize, cfg: &TrainConfig) -> Result<NetworkParams> {
    if d == 0 || k == 0 {
        return Err(Error::invalid(format!("init_params needs d, k >= 1 (d={d}, k={k})")));
    }
    let sw = cfg.init_scale_w.unwrap_or(1.0 / (d as f64).sqrt());
    let sv = cfg.init_scale_v.unwrap_or(1.0 / (k as f64).sqrt());
    let mut rng = rng_from_seed(cfg.init_seed);
    let w = Array2::from_shape_simple_fn((k, d), || sw * rng.sample::<f64, _>(StandardNormal));
    let v = Array1::from_shape_simple_fn(k, || sv * rng.sample::<f64, _>(StandardNormal));
    NetworkParams::new(w, Array1::zeros(k), v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub threshold: f64,
    pub iteration: usize,
    pub loss: f64,
    pub params: NetworkParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_params: NetworkParams,
    pub final_loss: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub loss_trace: Vec<(usize, f64)>,
    /// First iteration at which every margin was positive.
    pub interpolated_at: Option<usize>,
    pub init_norm: f64,
    pub snapshots: Vec<Snapshot>,
}

impl TrainReport {
    pub fn snapshot(&self, threshold: f64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.threshold == threshold)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainReport> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn train(ds: &Dataset, k: usize, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let params = init_params(ds.dim(), k, cfg)?;
    train_from(ds, params, cfg)
}

/// Runs the descent loop from explicit starting parameters.
pub fn train_from(ds: &Dataset, mut params: NetworkParams, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let m = ds.len();
    let all: Vec<usize> = (0..m).collect();
    let batches: Vec<&[usize]> = all.chunks(cfg.batch_size).collect();
    let init_norm = params.norm();

    let mut trace = Vec::new();
    let mut interpolated_at = None;
    let mut pending: Vec<f64> = cfg.snapshot_losses.clone();
    let mut snapshots = Vec::new();

    let mut full = EvalBuffers::new(ds, None, params.width());
    let mut batch_bufs: Vec<EvalBuffers> = if batches.len() > 1 {
        batches.iter().map(|rows| EvalBuffers::new(ds, Some(rows), params.width())).collect()
    } else {
        Vec::new()
    };

    let mut t = 0usize;
    loop {
        let loss = match params.evaluate_into(cfg.loss, &mut full) {
            Ok(l) if l.is_finite() => l,
            _ => {
                return Err(Error::Divergence {
                    iteration: t,
                    last_params: Box::new(params),
                })
            }
        };
        trace.push((t, loss));
        if interpolated_at.is_none() && full.margins.iter().all(|&q| q > 0.0) {
            interpolated_at = Some(t);
        }
        pending.retain(|&thr| {
            if loss < thr {
                snapshots.push(Snapshot {
                    threshold: thr,
                    iteration: t,
                    loss,
                    params: params.clone(),
                });
                false
            } else {
                true
            }
        });

        let converged = loss < cfg.stop_loss;
        if converged || t >= cfg.max_iters {
            return Ok(TrainReport {
                final_params: params,
                final_loss: loss,
                iterations_used: t,
                converged,
                loss_trace: downsample(&trace, TRACE_POINTS),
                interpolated_at,
                init_norm,
                snapshots,
            });
        }

        let grad = if batch_bufs.is_empty() {
            &full.grad
        } else {
            let nb = batch_bufs.len();
            let buf = &mut batch_bufs[t % nb];
            if params.evaluate_into(cfg.loss, buf).is_err() {
                return Err(Error::Divergence {
                    iteration: t,
                    last_params: Box::new(params),
                });
            }
            &buf.grad
        };
        let lr = lr_at(cfg, t);
        if !params.step_is_finite(-lr, grad) {
            return Err(Error::Divergence {
                iteration: t + 1,
                last_params: Box::new(params),
            });
        }
        params.add_scaled(-lr, grad);
        t += 1;
    }
}

/// Keeps at most `n` evenly spaced entries, always including the first and last.
fn downsample(trace: &[(usize, f64)], n: usize) -> Vec<(usize, f64)> {
    if trace.len() <= n {
        return trace.to_vec();
    }
    let last = trace.len() - 1;
    let mut out: Vec<(usize, f64)> = (0..n)
        .map(|i| trace[(i * last + (n - 1) / 2) / (n - 1)])
        .collect();
    out.dedup_by_key(|e| e.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{sample_sphere, LabelRule};

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 1e-5);
        assert_eq!(lr_at(&cfg, 99), 1e-5);
        assert!((lr_at(&cfg, 250) - 1.21e-5).abs() < 1e-18);
        // 1.1^10 = 2.5937424601
        assert!((lr_at(&cfg, 1000) - 2.5937424601e-5).abs() < 1e-16);
    }

    #[test]
    fn zero_scales_give_zero_params() {
        let cfg = TrainConfig {
            init_scale_w: Some(0.0),
            init_scale_v: Some(0.0),
            ..Default::default()
        };
        assert_eq!(init_params(5, 3, &cfg).unwrap(), NetworkParams::zeros(3, 5));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = TrainConfig {
            init_seed: 42,
            ..Default::default()
        };
        assert_eq!(init_params(7, 9, &cfg).unwrap(), init_params(7, 9, &cfg).unwrap());
    }

    #[test]
    fn init_std_matches_scale() {
        let p = init_params(100, 1000, &TrainConfig::default()).unwrap();
        let w = p.w();
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.1).abs() < 0.01, "std {}", var.sqrt());
        assert!(p.b().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_iterations() {
        let ds = sample_sphere(4, 3, 1, LabelRule::Uniform).unwrap();
        let cfg = TrainConfig {
            max_iters: 0,
            init_seed: 3,
            ..Default::default()
        };
        let rep = train(&ds, 5, &cfg).unwrap();
        let init = init_params(3, 5, &cfg).unwrap();
        assert_eq!(rep.final_params, init);
        assert_eq!(rep.final_loss, init.loss_and_gradient(&ds, cfg.loss).unwrap().0);
        assert_eq!(rep.iterations_used, 0);
        assert!(!rep.converged);
    }

    #[test]
    fn invalid_config_rejected() {
        let ds = sample_sphere(2, 2, 1, LabelRule::Uniform).unwrap();
        let cfg = TrainConfig {
            lr_growth: 1.0,
            ..Default::default()
        };
        assert!(matches!(train(&ds, 2, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn huge_step_diverges() {
        let ds = sample_sphere(6, 4, 2, LabelRule::Uniform).unwrap();
        let cfg = TrainConfig {
            lr0: 1e200,
            max_iters: 50,
            ..Default::default()
        };
        match train(&ds, 4, &cfg) {
            Err(Error::Divergence { last_params, .. }) => assert!(last_params.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn downsample_bounds() {
        let trace: Vec<(usize, f64)> = (0..5000).map(|t| (t, t as f64)).collect();
        let ds = downsample(&trace, 1000);
        assert!(ds.len() <= 1000);
        assert_eq!(ds.first().unwrap().0, 0);
        assert_eq!(ds.last().unwrap().0, 4999);
        assert_eq!(downsample(&trace[..10], 1000).len(), 10);
    }
}
