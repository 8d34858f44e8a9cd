//! Flat JSON configuration shared by every subcommand. Each key has a flag of
//! the same name (underscores become dashes); flags win over the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Deserializer};
use unitary_mesh::{Architecture, CrosstalkModel, GradientMode, LbfgsConfig, LossKind, TrialConfig};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SWEEP_DELTAS: [&str; 5] = ["2^-6", "2^-9", "2^-12", "2^-15", "2^-18"];
pub const DEFAULT_DELTA_EXPONENT: i32 = 10;
pub const JOBS_ENV: &str = "UNITARY_MESH_JOBS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ArchArg {
    Mplc,
    Clements,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Frobenius,
    #[serde(alias = "phase-insensitive")]
    #[value(name = "phase_insensitive", alias = "phase-insensitive")]
    PhaseInsensitive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GradArg {
    Analytic,
    Fd,
}

/// A finite-difference step written either as a number or as `2^-k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Delta(pub f64);

impl FromStr for Delta {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let value = match s.strip_prefix("2^") {
            Some(exp) => exp
                .parse::<i32>()
                .map(|k| 2f64.powi(k))
                .map_err(|_| format!("bad exponent in `{s}`, expected 2^-k"))?,
            None => s
                .parse::<f64>()
                .map_err(|_| format!("`{s}` is neither a number nor 2^-k"))?,
        };
        if !(value > 0.0 && value.is_finite()) {
            return Err(format!("finite-difference step must be positive, got `{s}`"));
        }
        Ok(Delta(value))
    }
}

impl fmt::Display for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = -self.0.log2();
        if k.fract() == 0.0 && 2f64.powi(-(k as i32)) == self.0 {
            write!(f, "2^{}", -(k as i32))
        } else {
            write!(f, "{:e}", self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Delta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Delta::from_str(&v.to_string()),
            Raw::Text(s) => Delta::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Comma-separated list of steps; an empty list is kept so it can be rejected
/// with a clear message.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaList(pub Vec<Delta>);

impl FromStr for DeltaList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Delta::from_str)
            .collect::<Result<_, _>>()
            .map(DeltaList)
    }
}

impl<'de> Deserialize<'de> for DeltaList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Vec::<Delta>::deserialize(d).map(DeltaList)
    }
}

/// Every configurable knob, all optional so a file and the command line can
/// be layered.
#[derive(Clone, Debug, Default, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    /// Device architecture
    #[arg(long)]
    pub arch: Option<ArchArg>,
    /// Number of modes N
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of layers m (default N+1)
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub loss: Option<LossArg>,
    /// Gradient source; `fd` is a forward difference with step --delta
    #[arg(long)]
    pub grad: Option<GradArg>,
    /// Forward-difference step, e.g. 2^-10 or 0.001 (implies --grad fd)
    #[arg(long)]
    pub delta: Option<Delta>,
    /// Apply the 0.1/0.5/1/0.5/0.1 neighbor crosstalk kernel
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub crosstalk: Option<bool>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Base seed; drawn at random and recorded when absent
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Concurrent trials (default: logical cores); UNITARY_MESH_JOBS overrides
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Stop when the gradient infinity norm reaches this value
    #[arg(long)]
    pub grad_tol: Option<f64>,
    /// L-BFGS curvature pairs kept
    #[arg(long)]
    pub history_size: Option<usize>,
    /// Only accept iterates that lower the loss (default: on for analytic
    /// gradients, off for finite differences)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub strict_decrease: Option<bool>,
    /// Keep parameter snapshots for `landscape`
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub record_history: Option<bool>,
    /// Keep every k-th parameter snapshot
    #[arg(long)]
    pub history_stride: Option<usize>,
    /// Draw a separate target for each trial
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub vary_target: Option<bool>,
    /// Keep the MPLC output phase array (default: off for the
    /// phase-insensitive loss)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub output_phases: Option<bool>,
    /// Only read by `sweep`; its --deltas flag takes precedence
    #[arg(skip)]
    pub deltas: Option<DeltaList>,
}

macro_rules! layer {
    ($top:expr, $base:expr, $($field:ident),* $(,)?) => {
        FlatConfig { $($field: $top.$field.or($base.$field)),* }
    };
}

impl FlatConfig {
    /// Reads a config file, reporting the line and column of any problem.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Loads the optional file and lays the flags over it.
    pub fn resolve(file: Option<&Path>, flags: FlatConfig) -> CliResult<Self> {
        match file {
            Some(p) => Ok(flags.over(Self::from_file(p)?)),
            None => Ok(flags),
        }
    }

    /// Fields set in `self` win over those in `base`.
    pub fn over(self, base: FlatConfig) -> FlatConfig {
        layer!(
            self, base, arch, n, m, loss, grad, delta, crosstalk, trials, seed, out, jobs,
            max_iterations, grad_tol, history_size, strict_decrease, record_history,
            history_stride, vary_target, output_phases, deltas,
        )
    }

    pub fn gradient(&self) -> CliResult<GradientMode> {
        match (self.grad, self.delta) {
            (Some(GradArg::Analytic), Some(_)) => Err(CliError::Usage(
                "delta only applies to finite-difference gradients (grad = fd)".into(),
            )),
            (Some(GradArg::Analytic), None) | (None, None) => Ok(GradientMode::Analytic),
            (_, Some(d)) => Ok(GradientMode::forward_difference(d.0)?),
            (Some(GradArg::Fd), None) => Ok(GradientMode::bits(DEFAULT_DELTA_EXPONENT)),
        }
    }

    /// Builds the effective trial configuration. `seed` replaces an absent
    /// seed so callers decide how it is drawn.
    pub fn trial_config(&self, gradient: GradientMode, seed: u64) -> CliResult<TrialConfig> {
        let n = self.n.unwrap_or(8);
        let architecture = match self.arch.unwrap_or(ArchArg::Mplc) {
            ArchArg::Mplc => Architecture::Mplc,
            ArchArg::Clements => Architecture::Clements,
        };
        let loss = match self.loss.unwrap_or(LossArg::Frobenius) {
            LossArg::Frobenius => LossKind::FrobeniusNormalized,
            LossArg::PhaseInsensitive => LossKind::PhaseInsensitive,
        };
        let mut cfg = TrialConfig::new(architecture, n, self.m.unwrap_or(n + 1), loss, gradient);
        cfg.base_seed = self.seed.unwrap_or(seed);
        if let Some(t) = self.trials {
            cfg.n_trials = t;
        }
        if self.crosstalk == Some(true) {
            cfg.crosstalk = Some(CrosstalkModel::default());
        }
        cfg.vary_target = self.vary_target.unwrap_or(false);
        cfg.include_output_phases = self.output_phases;
        cfg.record_param_history = self.record_history.unwrap_or(false);

        let o: &mut LbfgsConfig = &mut cfg.optimizer;
        if let Some(v) = self.max_iterations {
            o.max_iterations = v;
        }
        if let Some(v) = self.grad_tol {
            o.grad_tol = v;
        }
        if let Some(v) = self.history_size {
            o.history_size = v;
        }
        if let Some(v) = self.strict_decrease {
            o.strict_decrease = v;
        }
        if let Some(v) = self.history_stride {
            o.history_stride = v;
        }
        o.record_history = cfg.record_param_history;

        cfg.validate()?;
        Ok(cfg)
    }

    /// Worker count: the environment variable, then the config, then the
    /// thread pool default.
    pub fn jobs(&self) -> CliResult<Option<usize>> {
        let jobs = match std::env::var(JOBS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                CliError::Usage(format!("{JOBS_ENV} must be a positive integer, got `{v}`"))
            })?),
            Err(_) => self.jobs,
        };
        if jobs == Some(0) {
            return Err(CliError::Usage("jobs must be >= 1".into()));
        }
        Ok(jobs)
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("an output directory is required (--out)".into()))
    }
}
