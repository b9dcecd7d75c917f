use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use marginlab::attack::{default_c_max, perturbed_outputs, DEFAULT_SLACK};
use marginlab::kkt::DEFAULT_ACTIVATION_TOL;
use marginlab::robust::{build_robust_tight, certify_radius};
use marginlab::{
    antipodal_kkt_fixture, build_robust, correlation_stats, empirical_perturbation, kkt_residual,
    margin_set, normalize_to_margin, orthogonal_dataset, sample_sphere, theoretical_perturbation,
    train, Dataset, LabelRule, LossKind, NetworkParams, TrainConfig,
};
use ndarray::Array1;

use crate::config::SweepConfig;
use crate::error::{CliError, CliResult};
use crate::sweep::run_sweep_with_progress;

#[derive(Debug, Parser)]
#[command(name = "marginlab", version, about = "Max-margin ReLU networks and universal perturbations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset on the radius-√d sphere (or the scaled standard basis).
    Gen(GenArgs),
    /// Train a depth-2 ReLU network with exponential or logistic loss.
    Train(TrainArgs),
    /// Measure the universal perturbation of a trained network.
    Attack(AttackArgs),
    /// Build the robust reference network and attack it.
    Robust(RobustArgs),
    /// Fit KKT multipliers and report the residuals.
    Kkt(KktArgs),
    /// Run a grid of experiments and write CSV results.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Labels {
    Uniform,
    Balanced,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Loss {
    Exponential,
    Logistic,
}

impl From<Loss> for LossKind {
    fn from(l: Loss) -> Self {
        match l {
            Loss::Exponential => LossKind::Exponential,
            Loss::Logistic => LossKind::Logistic,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub d: usize,
    /// Number of samples (ignored with --orthogonal).
    #[arg(long, required_unless_present = "orthogonal")]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// x_i = √d·e_i with the first half labelled +1.
    #[arg(long)]
    pub orthogonal: bool,
    #[arg(long, value_enum, default_value = "uniform")]
    pub labels: Labels,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub loss: Option<Loss>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long, visible_alias = "lr_growth")]
    pub lr_growth: Option<f64>,
    #[arg(long, visible_alias = "lr_period")]
    pub lr_period: Option<usize>,
    #[arg(long, visible_alias = "batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long, visible_alias = "stop_loss")]
    pub stop_loss: Option<f64>,
    #[arg(long, visible_alias = "max_iters")]
    pub max_iters: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(l) = self.loss {
            cfg.loss = l.into();
        }
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
        }
        if let Some(v) = self.lr_growth {
            cfg.lr_growth = v;
        }
        if let Some(v) = self.lr_period {
            cfg.lr_period = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.stop_loss {
            cfg.stop_loss = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub ds: PathBuf,
    #[arg(long)]
    pub width: usize,
    /// Training configuration JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, visible_alias = "init_seed")]
    pub init_seed: Option<u64>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Report file, conventionally `*.train.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Final parameters; defaults to the report path with `.net.json`.
    #[arg(long)]
    pub net_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub ds: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SLACK)]
    pub slack: f64,
    /// Largest step searched; defaults to 4√d.
    #[arg(long)]
    pub c_max: Option<f64>,
    /// Closed-form scaling instead of the measured flip size.
    #[arg(long)]
    pub theoretical: bool,
    /// Output, conventionally `*.pert.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RobustArgs {
    #[arg(long)]
    pub ds: PathBuf,
    /// Correlation constant; defaults to p_max/d.
    #[arg(long)]
    pub c: Option<f64>,
    /// Width; defaults to the number of samples.
    #[arg(long)]
    pub width: Option<usize>,
    /// Attack radius as a multiple of the certified radius.
    #[arg(long, default_value_t = 0.9)]
    pub radius_factor: f64,
    #[arg(long, default_value_t = 1000)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Fixture {
    Antipodal,
}

#[derive(Debug, Args)]
pub struct KktArgs {
    #[arg(long, conflicts_with_all = ["net", "ds"])]
    pub fixture: Option<Fixture>,
    /// Dimension of the fixture.
    #[arg(long, requires = "fixture")]
    pub d: Option<usize>,
    #[arg(long, required_unless_present = "fixture", requires = "ds")]
    pub net: Option<PathBuf>,
    #[arg(long, required_unless_present = "fixture")]
    pub ds: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SLACK)]
    pub slack: f64,
    #[arg(long, default_value_t = DEFAULT_ACTIVATION_TOL)]
    pub activation_tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long, visible_alias = "alpha_list", value_delimiter = ',')]
    pub alpha_list: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub slack: Option<f64>,
    #[arg(long, visible_alias = "output_dir")]
    pub output_dir: Option<PathBuf>,
    #[arg(long, visible_alias = "run_theoretical")]
    pub run_theoretical: Option<bool>,
    #[arg(long, visible_alias = "run_robust_baseline")]
    pub run_robust_baseline: Option<bool>,
    #[arg(long)]
    pub plot: Option<bool>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Suppress the per-run progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

impl SweepArgs {
    pub fn resolve(&self) -> CliResult<SweepConfig> {
        let mut cfg = match &self.config {
            Some(p) => SweepConfig::load(p)?,
            None => SweepConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { cfg.$f = v.clone(); })*};
        }
        set!(dims, alpha_list, widths, seeds, slack, output_dir, plot);
        if self.jobs.is_some() {
            cfg.jobs = self.jobs;
        }
        if let Some(v) = self.run_theoretical {
            cfg.mode_flags.run_theoretical = v;
        }
        if let Some(v) = self.run_robust_baseline {
            cfg.mode_flags.run_robust_baseline = v;
        }
        self.train.apply(&mut cfg.train);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Executes one command and returns the process exit code.
pub fn run(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Robust(a) => cmd_robust(&a),
        Command::Kkt(a) => cmd_kkt(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn load_ds(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(Dataset::load(path)?)
}

fn load_net(path: &Path) -> CliResult<NetworkParams> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(NetworkParams::load(path)?)
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<i32> {
    let ds = if a.orthogonal {
        orthogonal_dataset(a.d)?
    } else {
        let rule = match a.labels {
            Labels::Uniform => LabelRule::Uniform,
            Labels::Balanced => LabelRule::BalancedAlternating,
        };
        sample_sphere(a.m.unwrap_or(0), a.d, a.seed, rule)?
    };
    ds.save(&a.out)?;
    let s = correlation_stats(&ds);
    println!(
        "gen: wrote {} (m={}, d={}, p_max={}, c'={})",
        a.out.display(),
        ds.len(),
        ds.dim(),
        s.p_max,
        s.c_prime
    );
    Ok(0)
}

fn net_path_for(report: &Path) -> PathBuf {
    let name = report.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    let stem = name.strip_suffix(".train.json").unwrap_or(name);
    report.with_file_name(format!("{stem}.net.json"))
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<i32> {
    let ds = load_ds(&a.ds)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.init_seed {
        cfg.init_seed = s;
    }
    a.overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let rep = train(&ds, a.width, &cfg)?;
    rep.save(&a.out)?;
    let net_out = a.net_out.clone().unwrap_or_else(|| net_path_for(&a.out));
    rep.final_params.save(&net_out)?;
    println!(
        "train: loss {:e} after {} iterations (converged: {}), wrote {} and {}",
        rep.final_loss,
        rep.iterations_used,
        rep.converged,
        a.out.display(),
        net_out.display()
    );
    Ok(0)
}

pub fn cmd_attack(a: &AttackArgs) -> CliResult<i32> {
    let ds = load_ds(&a.ds)?;
    let net = load_net(&a.net)?;
    let c_max = a.c_max.unwrap_or_else(|| default_c_max(ds.dim()));
    if a.theoretical {
        let normalized = normalize_to_margin(&net, &ds)?;
        let margins = margin_set(&normalized, &ds, a.slack)?;
        let rep = theoretical_perturbation(&ds, &margins.margin_set)?.with_flips(&normalized, &ds, c_max)?;
        let z = Array1::from(rep.z_theoretical.clone().unwrap_or_default());
        let worst = perturbed_outputs(&normalized, &ds, &rep.margin_set, z.view())?
            .iter()
            .zip(&rep.margin_set)
            .map(|(o, &i)| ds.label(i) * o)
            .fold(f64::NEG_INFINITY, f64::max);
        rep.save(&a.out)?;
        println!(
            "attack (theoretical): |I|={}, |z|={} (bound {}), largest y_i N(x_i - y_i z) = {}, wrote {}",
            rep.margin_set.len(),
            rep.z_norm,
            rep.norm_bound.unwrap_or(f64::NAN),
            worst,
            a.out.display()
        );
    } else {
        let (_, rep) = empirical_perturbation(&net, &ds, a.slack, c_max)?;
        rep.save(&a.out)?;
        let joint = rep.joint_flip_size.map_or("none".to_string(), |c| c.to_string());
        println!(
            "attack: |I|={}, joint flip size {}, wrote {}",
            rep.margin_set.len(),
            joint,
            a.out.display()
        );
    }
    Ok(0)
}

pub fn cmd_robust(a: &RobustArgs) -> CliResult<i32> {
    let ds = load_ds(&a.ds)?;
    let k = a.width.unwrap_or(ds.len());
    let (net, cert) = match a.c {
        Some(c) => build_robust(&ds, c, k)?,
        None => build_robust_tight(&ds, k)?,
    };
    if let Some(out) = &a.out {
        net.save(out)?;
    }
    let radius = a.radius_factor * cert.claimed_radius;
    let rep = certify_radius(&net, &ds, radius, a.budget, a.seed)?;
    println!(
        "robust: c={}, margin_min={}, claimed radius {}, attacked at {}: {} flips in {} trials (worst margin {})",
        cert.c_used, cert.margin_min, cert.claimed_radius, radius, rep.flips_found, rep.trials, rep.worst_margin_after
    );
    Ok(0)
}

pub fn cmd_kkt(a: &KktArgs) -> CliResult<i32> {
    let (net, ds, set) = match a.fixture {
        Some(Fixture::Antipodal) => {
            let (net, ds, _) = antipodal_kkt_fixture(a.d.unwrap_or(3))?;
            (net, ds, vec![0, 1])
        }
        None => {
            let ds = load_ds(a.ds.as_deref().expect("clap requires --ds"))?;
            let net = normalize_to_margin(&load_net(a.net.as_deref().expect("clap requires --net"))?, &ds)?;
            let set = margin_set(&net, &ds, a.slack)?.margin_set;
            (net, ds, set)
        }
    };
    let rep = kkt_residual(&net, &ds, &set, a.activation_tol)?;
    if let Some(out) = &a.out {
        rep.save(out)?;
    }
    println!(
        "kkt: |I|={}, residual w={:e} b={:e} v={:e} complementarity={:e}",
        set.len(),
        rep.stationarity_residual_w,
        rep.stationarity_residual_b,
        rep.stationarity_residual_v,
        rep.complementarity_residual
    );
    Ok(0)
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<i32> {
    let cfg = a.resolve()?;
    let quiet = a.quiet;
    let out = run_sweep_with_progress(&cfg, |r| {
        if !quiet {
            eprintln!(
                "sweep: d={} m={} k={} seed={} -> {} (flip {})",
                r.d,
                r.m,
                r.width,
                r.seed,
                r.status,
                r.joint_flip_size.map_or("-".into(), |c| c.to_string())
            );
        }
    })?;
    let failed = out.data_rows().filter(|r| r.status != "ok").count();
    println!(
        "sweep: {} runs ({} not ok), wrote {}",
        out.data_rows().count(),
        failed,
        out.csv_path.display()
    );
    Ok(out.exit_code())
}
