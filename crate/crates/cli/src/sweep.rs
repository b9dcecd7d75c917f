//! Sweep runner: generate → train → margin set → flip size → optional
//! theoretical z and robust baseline → KKT residual, for every point of
//! `dims × alpha_list × widths × seeds`.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use marginlab::attack::{default_c_max, empirical_perturbation};
use marginlab::kkt::DEFAULT_ACTIVATION_TOL;
use marginlab::rng::{hash64, RNG_NAME};
use marginlab::robust::{build_robust_tight, min_margin_on_segment};
use marginlab::{
    correlation_stats, kkt_residual, normalize_to_margin, sample_sphere, theoretical_perturbation,
    train, Error, LabelRule, TrainConfig,
};
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SweepConfig;
use crate::error::{CliError, CliResult};
use crate::svg;

pub const CSV_HEADER: [&str; 17] = [
    "seed",
    "d",
    "m",
    "alpha",
    "width",
    "final_loss",
    "iterations",
    "margin_min",
    "margin_set_size",
    "margin_ratio",
    "joint_flip_size",
    "flip_over_sqrtd",
    "p_max",
    "balance_c",
    "theoretical_z_norm",
    "kkt_residual_w",
    "status",
];

/// Offset added to the replicate index when a diverged run is retried.
pub const RETRY_OFFSET: u64 = 1000;

pub const STATUS_OK: &str = "ok";
pub const STATUS_AGGREGATE: &str = "aggregate";

/// Numeric columns that are averaged in the aggregate rows, in CSV order.
const STAT_COLUMNS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Base seed for data rows, `mean` or `std` for aggregate rows.
    pub seed: String,
    pub d: usize,
    pub m: usize,
    pub alpha: f64,
    pub width: usize,
    pub final_loss: Option<f64>,
    pub iterations: Option<f64>,
    pub margin_min: Option<f64>,
    pub margin_set_size: Option<f64>,
    pub margin_ratio: Option<f64>,
    pub joint_flip_size: Option<f64>,
    pub flip_over_sqrtd: Option<f64>,
    pub p_max: Option<f64>,
    pub balance_c: Option<f64>,
    pub theoretical_z_norm: Option<f64>,
    pub kkt_residual_w: Option<f64>,
    pub status: String,
}

impl SweepRow {
    fn empty(seed: String, d: usize, m: usize, alpha: f64, width: usize, status: &str) -> Self {
        SweepRow {
            seed,
            d,
            m,
            alpha,
            width,
            final_loss: None,
            iterations: None,
            margin_min: None,
            margin_set_size: None,
            margin_ratio: None,
            joint_flip_size: None,
            flip_over_sqrtd: None,
            p_max: None,
            balance_c: None,
            theoretical_z_norm: None,
            kkt_residual_w: None,
            status: status.to_string(),
        }
    }

    pub fn is_aggregate(&self) -> bool {
        self.status == STATUS_AGGREGATE
    }

    fn stats(&self) -> [Option<f64>; STAT_COLUMNS] {
        [
            self.final_loss,
            self.iterations,
            self.margin_min,
            self.margin_set_size,
            self.margin_ratio,
            self.joint_flip_size,
            self.flip_over_sqrtd,
            self.p_max,
            self.balance_c,
            self.theoretical_z_norm,
            self.kkt_residual_w,
        ]
    }

    fn set_stats(&mut self, s: [Option<f64>; STAT_COLUMNS]) {
        [
            self.final_loss,
            self.iterations,
            self.margin_min,
            self.margin_set_size,
            self.margin_ratio,
            self.joint_flip_size,
            self.flip_over_sqrtd,
            self.p_max,
            self.balance_c,
            self.theoretical_z_norm,
            self.kkt_residual_w,
        ] = s;
    }

    pub fn to_record(&self) -> Vec<String> {
        let mut rec = vec![
            self.seed.clone(),
            self.d.to_string(),
            self.m.to_string(),
            fmt_num(self.alpha),
            self.width.to_string(),
        ];
        rec.extend(self.stats().iter().map(|v| v.map(fmt_num).unwrap_or_default()));
        rec.push(self.status.clone());
        rec
    }

    pub fn from_record(rec: &csv::StringRecord) -> CliResult<SweepRow> {
        if rec.len() != CSV_HEADER.len() {
            return Err(CliError::Audit(format!("row has {} fields", rec.len())));
        }
        let int = |i: usize| {
            rec[i]
                .parse::<usize>()
                .map_err(|e| CliError::Audit(format!("column {}: {e}", CSV_HEADER[i])))
        };
        let num = |i: usize| -> CliResult<Option<f64>> {
            if rec[i].is_empty() {
                return Ok(None);
            }
            rec[i]
                .parse::<f64>()
                .map(Some)
                .map_err(|e| CliError::Audit(format!("column {}: {e}", CSV_HEADER[i])))
        };
        let mut row = SweepRow::empty(
            rec[0].to_string(),
            int(1)?,
            int(2)?,
            num(3)?.unwrap_or(f64::NAN),
            int(4)?,
            &rec[16],
        );
        let mut s = [None; STAT_COLUMNS];
        for (c, slot) in s.iter_mut().enumerate() {
            *slot = num(5 + c)?;
        }
        row.set_stats(s);
        Ok(row)
    }
}

/// Integers without a fractional part, tiny or huge values in exponent
/// form, everything else in shortest round-trip decimal.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else if x != 0.0 && (x.abs() < 1e-4 || x.abs() >= 1e15) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub base_seed: u64,
    pub d: usize,
    pub alpha_index: usize,
    pub alpha: f64,
    pub width: usize,
}

impl RunKey {
    pub fn m(&self) -> usize {
        SweepConfig::sample_size(self.d, self.alpha)
    }

    /// Seed of the training data; independent of the width so that every
    /// width in a sweep sees the same samples.
    pub fn dataset_seed(&self) -> u64 {
        hash64(&[self.base_seed, self.d as u64, self.alpha_index as u64, 0])
    }

    pub fn init_seed(&self, replicate: u64) -> u64 {
        hash64(&[
            self.base_seed,
            self.d as u64,
            self.alpha_index as u64,
            self.width as u64,
            replicate,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustCheck {
    pub claimed_radius: f64,
    /// Budget along the universal direction (the trained net's joint flip size).
    pub budget: f64,
    /// Smallest margin of the robust network over `x_i − y_i s ẑ`, `s ∈ [0, budget]`, `i ∈ I`.
    pub min_margin: f64,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub key: RunKey,
    pub dataset_seed: u64,
    pub init_seed: u64,
    pub attempts: Vec<String>,
    pub converged: bool,
    pub interpolated_at: Option<usize>,
    pub robust_baseline: Option<RobustCheck>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Data rows in config order, each group followed by its aggregate rows.
    pub rows: Vec<SweepRow>,
    pub details: Vec<RunDetail>,
    pub csv_path: PathBuf,
}

impl SweepOutcome {
    pub fn data_rows(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| !r.is_aggregate())
    }

    pub fn any_failed(&self) -> bool {
        self.data_rows().any(|r| r.status != STATUS_OK)
    }

    pub fn exit_code(&self) -> i32 {
        if self.any_failed() {
            4
        } else {
            0
        }
    }
}

pub fn run_keys(cfg: &SweepConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &d in &cfg.dims {
        for (alpha_index, &alpha) in cfg.alpha_list.iter().enumerate() {
            for &width in &cfg.widths {
                for &base_seed in &cfg.seeds {
                    keys.push(RunKey {
                        base_seed,
                        d,
                        alpha_index,
                        alpha,
                        width,
                    });
                }
            }
        }
    }
    keys
}

fn error_status(e: &Error) -> String {
    let kind = match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::PreconditionViolation { .. } => "precondition",
        Error::NumericOverflow { .. } => "overflow",
        Error::Divergence { .. } => "diverged",
        Error::NotInterpolated { .. } => "not_interpolated",
        Error::DegenerateDirection { .. } => "degenerate_direction",
        Error::HypothesisViolated { .. } => "hypothesis_violated",
        Error::NnlsNoConvergence { .. } => "nnls_no_convergence",
        Error::Internal(_) => "internal",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    };
    kind.to_string()
}

/// Runs one sweep point. Failures are reported through the row status.
pub fn run_one(cfg: &SweepConfig, key: RunKey) -> (SweepRow, RunDetail) {
    let m = key.m();
    let mut row = SweepRow::empty(key.base_seed.to_string(), key.d, m, key.alpha, key.width, STATUS_OK);
    let mut detail = RunDetail {
        key,
        dataset_seed: key.dataset_seed(),
        init_seed: key.init_seed(0),
        attempts: Vec::new(),
        converged: false,
        interpolated_at: None,
        robust_baseline: None,
        notes: Vec::new(),
    };
    if let Err(e) = pipeline(cfg, key, &mut row, &mut detail) {
        row.status = error_status(&e);
        detail.notes.push(e.to_string());
    }
    (row, detail)
}

fn pipeline(cfg: &SweepConfig, key: RunKey, row: &mut SweepRow, detail: &mut RunDetail) -> marginlab::Result<()> {
    let d = key.d;
    let ds = sample_sphere(row.m, d, detail.dataset_seed, LabelRule::Uniform)?;
    let stats = correlation_stats(&ds);
    row.p_max = Some(stats.p_max);
    row.balance_c = Some(stats.balance_c);
    if cfg.mode_flags.run_theoretical {
        let all: Vec<usize> = (0..ds.len()).collect();
        match theoretical_perturbation(&ds, &all) {
            Ok(rep) => row.theoretical_z_norm = Some(rep.z_norm),
            Err(e) => detail.notes.push(format!("theoretical: {e}")),
        }
    }

    let mut report = None;
    for replicate in [0, RETRY_OFFSET] {
        let train_cfg = TrainConfig {
            init_seed: key.init_seed(replicate),
            ..cfg.train.clone()
        };
        detail.init_seed = train_cfg.init_seed;
        match train(&ds, key.width, &train_cfg) {
            Ok(rep) => {
                detail.attempts.push(format!("replicate {replicate}: ok"));
                report = Some(rep);
                break;
            }
            Err(e @ Error::Divergence { .. }) => {
                detail.attempts.push(format!("replicate {replicate}: {e}"));
                if replicate == RETRY_OFFSET {
                    return Err(e);
                }
            }
            Err(e) => return Err(e),
        }
    }
    let rep = report.expect("loop returns or sets a report");
    detail.converged = rep.converged;
    detail.interpolated_at = rep.interpolated_at;
    row.final_loss = Some(rep.final_loss);
    row.iterations = Some(rep.iterations_used as f64);
    let net = rep.final_params;

    let (margins, pert) = empirical_perturbation(&net, &ds, cfg.slack, default_c_max(d))?;
    row.margin_min = Some(margins.margin_min());
    row.margin_set_size = Some(margins.margin_set.len() as f64);
    row.margin_ratio = Some(margins.ratio());
    row.joint_flip_size = pert.joint_flip_size;
    row.flip_over_sqrtd = pert.joint_flip_size.map(|c| c / (d as f64).sqrt());

    if cfg.mode_flags.run_robust_baseline {
        if let Some(budget) = pert.joint_flip_size {
            match build_robust_tight(&ds, ds.len()) {
                Ok((robust, cert)) => {
                    let z_hat = Array1::from(pert.z_hat.clone());
                    let min_margin = margins
                        .margin_set
                        .iter()
                        .map(|&i| {
                            let y = ds.label(i);
                            let u = z_hat.mapv(|z| -y * z);
                            min_margin_on_segment(&robust, ds.point(i), y, u.view(), budget)
                        })
                        .fold(f64::INFINITY, f64::min);
                    detail.robust_baseline = Some(RobustCheck {
                        claimed_radius: cert.claimed_radius,
                        budget,
                        min_margin,
                        flipped: min_margin < 0.0,
                    });
                }
                Err(e) => detail.notes.push(format!("robust baseline: {e}")),
            }
        }
    }

    match normalize_to_margin(&net, &ds)
        .and_then(|n| kkt_residual(&n, &ds, &margins.margin_set, DEFAULT_ACTIVATION_TOL))
    {
        Ok(k) => row.kkt_residual_w = Some(k.stationarity_residual_w),
        Err(e) => detail.notes.push(format!("kkt: {e}")),
    }

    if !rep.converged {
        row.status = "not_converged".into();
    } else if pert.joint_flip_size.is_none() {
        row.status = "no_flip".into();
    }
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
fn sample_std(values: &[f64]) -> f64 {
    let mu = mean(values);
    let ss = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Mean row, plus a sample-standard-deviation row when the group has at
/// least two runs, over the `ok` rows of one group. A column is left empty
/// when too few `ok` rows carry a value for it.
pub fn aggregate(group: &[&SweepRow]) -> Vec<SweepRow> {
    let first = group[0];
    let blank = |seed: &str| SweepRow::empty(seed.into(), first.d, first.m, first.alpha, first.width, STATUS_AGGREGATE);
    let ok: Vec<&&SweepRow> = group.iter().filter(|r| r.status == STATUS_OK).collect();
    let mut means = [None; STAT_COLUMNS];
    let mut stds = [None; STAT_COLUMNS];
    for c in 0..STAT_COLUMNS {
        let vals: Vec<f64> = ok.iter().filter_map(|r| r.stats()[c]).collect();
        if !vals.is_empty() {
            means[c] = Some(mean(&vals));
        }
        if vals.len() >= 2 {
            stds[c] = Some(sample_std(&vals));
        }
    }
    let mut out = vec![blank("mean")];
    out[0].set_stats(means);
    if group.len() >= 2 {
        let mut std = blank("std");
        std.set_stats(stds);
        out.push(std);
    }
    out
}

fn group_key(r: &SweepRow) -> (usize, u64, usize) {
    (r.d, r.alpha.to_bits(), r.width)
}

/// Appends the aggregate rows after each (d, alpha, width) group of data rows.
pub fn with_aggregates(data: Vec<SweepRow>) -> Vec<SweepRow> {
    let mut out = Vec::with_capacity(data.len() + 2);
    let mut start = 0;
    while start < data.len() {
        let key = group_key(&data[start]);
        let end = start + data[start..].iter().take_while(|r| group_key(r) == key).count();
        let group: Vec<&SweepRow> = data[start..end].iter().collect();
        let agg = aggregate(&group);
        out.extend(data[start..end].iter().cloned());
        out.extend(agg);
        start = end;
    }
    out
}

pub fn write_csv(path: &Path, rows: &[SweepRow]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> CliResult<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(CliError::Audit(format!("unexpected header {header:?}")));
    }
    rd.records().map(|r| SweepRow::from_record(&r?)).collect()
}

/// Re-reads the CSV and recomputes every aggregate row from the data rows.
pub fn audit(path: &Path) -> CliResult<()> {
    let rows = read_csv(path)?;
    let data: Vec<SweepRow> = rows.iter().filter(|r| !r.is_aggregate()).cloned().collect();
    let expect = with_aggregates(data);
    if expect.len() != rows.len() {
        return Err(CliError::Audit(format!("{} rows on disk, {} recomputed", rows.len(), expect.len())));
    }
    for (got, want) in rows.iter().zip(&expect) {
        if got.to_record() != want.to_record() {
            return Err(CliError::Audit(format!(
                "row {:?} differs from recomputed {:?}",
                got.to_record(),
                want.to_record()
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Meta<'a> {
    created_unix: u64,
    rng: &'a str,
    seed_hash: &'a str,
    config: &'a SweepConfig,
}

pub const CSV_NAME: &str = "sweep.csv";
pub const DETAILS_NAME: &str = "runs.json";
pub const META_NAME: &str = "sweep.meta.json";

pub fn run_sweep(cfg: &SweepConfig) -> CliResult<SweepOutcome> {
    run_sweep_with_progress(cfg, |_| {})
}

pub fn run_sweep_with_progress(cfg: &SweepConfig, progress: impl Fn(&SweepRow) + Sync) -> CliResult<SweepOutcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let csv_path = dir.join(CSV_NAME);
    // fail on an unwritable directory before any training starts
    File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;

    let keys = run_keys(cfg);
    let work = || -> Vec<(SweepRow, RunDetail)> {
        keys.par_iter()
            .map(|&k| {
                let out = run_one(cfg, k);
                progress(&out.0);
                out
            })
            .collect()
    };
    let results = match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    let (data, details): (Vec<SweepRow>, Vec<RunDetail>) = results.into_iter().unzip();
    let rows = with_aggregates(data);
    write_csv(&csv_path, &rows)?;
    audit(&csv_path)?;

    let details_path = dir.join(DETAILS_NAME);
    write_json(&details_path, &details)?;
    let meta = Meta {
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        rng: RNG_NAME,
        seed_hash: "dataset_seed = hash64([seed, d, alpha_index, 0]); init_seed = hash64([seed, d, alpha_index, width, replicate])",
        config: cfg,
    };
    write_json(&dir.join(META_NAME), &meta)?;
    if cfg.plot {
        svg::write_plots(dir, cfg, &rows)?;
    }
    Ok(SweepOutcome {
        rows,
        details,
        csv_path,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}
