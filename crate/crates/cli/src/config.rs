//! Sweep configuration: a JSON file whose fields can be overridden from the
//! command line.

use std::fs;
use std::path::{Path, PathBuf};

use marginlab::attack::DEFAULT_SLACK;
use marginlab::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeFlags {
    pub run_theoretical: bool,
    pub run_robust_baseline: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        ModeFlags {
            run_theoretical: true,
            run_robust_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub dims: Vec<usize>,
    /// Sample-size exponents: `m = round(d^alpha)`.
    pub alpha_list: Vec<f64>,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub slack: f64,
    pub mode_flags: ModeFlags,
    pub output_dir: PathBuf,
    /// Write SVG line charts next to the CSV.
    pub plot: bool,
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            dims: vec![50, 100, 200],
            alpha_list: vec![0.5],
            widths: vec![512],
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            slack: DEFAULT_SLACK,
            mode_flags: ModeFlags::default(),
            output_dir: PathBuf::from("sweep-out"),
            plot: false,
            jobs: None,
        }
    }
}

impl SweepConfig {
    pub fn load(path: &Path) -> CliResult<SweepConfig> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
        if self.dims.is_empty() || self.alpha_list.is_empty() || self.widths.is_empty() || self.seeds.is_empty() {
            return bad("dims, alpha_list, widths and seeds must all be nonempty");
        }
        if self.dims.contains(&0) {
            return bad("dims must be positive");
        }
        if self.widths.contains(&0) {
            return bad("widths must be positive");
        }
        if self.alpha_list.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("alpha_list entries must be finite and nonnegative");
        }
        if !(self.slack >= 1.0 && self.slack.is_finite()) {
            return bad("slack must be a finite number >= 1");
        }
        if self.jobs == Some(0) {
            return bad("jobs must be positive");
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn sample_size(d: usize, alpha: f64) -> usize {
        ((d as f64).powf(alpha).round() as usize).max(1)
    }
}
