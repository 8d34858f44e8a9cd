//! Batches of optimization trials and the statistics drawn from them.
//!
//! A batch shares one device and one Haar-random target; only the initial
//! phases differ between trials. Every random draw comes from a named
//! [`RngStream`] derived from the batch seed, so a batch is reproducible
//! bit-for-bit regardless of how many worker threads run it.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::{Architecture, CrosstalkModel, Device, DeviceSpec};
use crate::distances::LossKind;
use crate::error::{Error, Result};
use crate::gradients::{forward_difference, GradientMode, Objective};
use crate::linalg::{haar_random_unitary, RngStream, UnitaryMatrix};
use crate::optimizer::{minimize, Evaluation, LbfgsConfig, OptimResult, Termination};

/// Stream id for the shared device mixers.
pub const STREAM_DEVICE: u64 = 1 << 63;
/// Stream id for the shared target.
pub const STREAM_TARGET: u64 = (1 << 63) + 1;
/// Per-trial targets (when `vary_target` is set) use `STREAM_TRIAL_TARGET + t`.
pub const STREAM_TRIAL_TARGET: u64 = 1 << 62;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub architecture: Architecture,
    pub n_modes: usize,
    pub n_layers: usize,
    pub loss: LossKind,
    pub gradient: GradientMode,
    pub crosstalk: Option<CrosstalkModel>,
    pub n_trials: usize,
    pub base_seed: u64,
    pub optimizer: LbfgsConfig,
    pub record_param_history: bool,
    /// Draw a fresh target per trial instead of sharing one.
    pub vary_target: bool,
    /// `None` keeps the MPLC output phase array except under the
    /// phase-insensitive loss, where it is removed.
    pub include_output_phases: Option<bool>,
}

impl TrialConfig {
    /// Defaults: 64 trials, seed 0, shared target. Forward-difference runs
    /// get an optimizer that keeps following the supplied gradient once it
    /// stops agreeing with the objective values (see
    /// [`LbfgsConfig::strict_decrease`]).
    pub fn new(
        architecture: Architecture,
        n_modes: usize,
        n_layers: usize,
        loss: LossKind,
        gradient: GradientMode,
    ) -> Self {
        let optimizer = LbfgsConfig {
            strict_decrease: matches!(gradient, GradientMode::Analytic),
            ..LbfgsConfig::default()
        };
        Self {
            architecture,
            n_modes,
            n_layers,
            loss,
            gradient,
            crosstalk: None,
            n_trials: 64,
            base_seed: 0,
            optimizer,
            record_param_history: false,
            vary_target: false,
            include_output_phases: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::InvalidArgument("n_trials must be >= 1".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::InvalidArgument("n_layers must be >= 1".into()));
        }
        if self.n_modes == 0 {
            return Err(Error::InvalidArgument("n_modes must be >= 1".into()));
        }
        if self.architecture == Architecture::Clements && !self.n_modes.is_multiple_of(2) {
            return Err(Error::UnsupportedDimension("n_modes must be even".into()));
        }
        if let GradientMode::ForwardDifference { delta } = self.gradient {
            GradientMode::forward_difference(delta)?;
        }
        self.optimizer.validate()
    }

    pub fn output_phases(&self) -> bool {
        match self.architecture {
            Architecture::Clements => true,
            Architecture::Mplc => self
                .include_output_phases
                .unwrap_or(self.loss != LossKind::PhaseInsensitive),
        }
    }

    pub fn device_spec(&self) -> DeviceSpec {
        DeviceSpec {
            architecture: self.architecture,
            n_modes: self.n_modes,
            n_layers: self.n_layers,
            include_output_phases: self.output_phases(),
            crosstalk: self.crosstalk.clone(),
        }
    }

    pub fn build_device(&self) -> Result<Device> {
        self.device_spec()
            .build(RngStream::new(self.base_seed, STREAM_DEVICE))
    }

    pub fn target_for_trial(&self, trial: usize) -> Result<UnitaryMatrix> {
        let stream = if self.vary_target {
            RngStream::new(self.base_seed, STREAM_TRIAL_TARGET + trial as u64)
        } else {
            RngStream::new(self.base_seed, STREAM_TARGET)
        };
        haar_random_unitary(self.n_modes, stream)
    }

    /// Initial phases of trial `t`, uniform on `[0, 2π)`.
    pub fn initial_params(&self, trial: usize, dim: usize) -> Vec<f64> {
        let mut rng = RngStream::new(self.base_seed, trial as u64).rng();
        (0..dim)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect()
    }
}

/// Result of one trial. A failed trial keeps the optimizer error instead of
/// aborting the batch.
#[derive(Debug)]
pub struct TrialOutcome {
    pub trial: usize,
    pub result: Result<OptimResult>,
}

impl TrialOutcome {
    pub fn ok(&self) -> Option<&OptimResult> {
        self.result.as_ref().ok()
    }
}

/// Runs one trial against an already-built device and target.
pub fn run_single(
    cfg: &TrialConfig,
    device: &Device,
    target: &UnitaryMatrix,
    trial: usize,
) -> Result<OptimResult> {
    let obj = Objective::new(device, target, cfg.loss)?;
    let p0 = cfg.initial_params(trial, device.param_count());
    let mut opt = cfg.optimizer.clone();
    opt.record_history = cfg.record_param_history;
    match cfg.gradient {
        GradientMode::Analytic => minimize(
            |p| {
                let (value, gradient) = obj.value_and_gradient(p)?;
                Ok(Evaluation::new(value, gradient))
            },
            &p0,
            &opt,
        ),
        GradientMode::ForwardDifference { delta } => minimize(
            |p| {
                let (value, gradient) = forward_difference(|x| obj.value(x), p, delta)?;
                Ok(Evaluation {
                    value,
                    gradient,
                    cost: p.len() + 1,
                })
            },
            &p0,
            &opt,
        ),
    }
}

/// Runs every trial of `cfg` on the global thread pool.
pub fn run_trials(cfg: &TrialConfig) -> Result<Vec<TrialOutcome>> {
    run_trials_with_jobs(cfg, None)
}

/// Like [`run_trials`], capping concurrency at `jobs` worker threads.
/// Results are ordered by trial index and independent of `jobs`.
pub fn run_trials_with_jobs(cfg: &TrialConfig, jobs: Option<usize>) -> Result<Vec<TrialOutcome>> {
    cfg.validate()?;
    let device = cfg.build_device()?;
    let shared_target = (!cfg.vary_target)
        .then(|| cfg.target_for_trial(0))
        .transpose()?;
    let run = || -> Vec<TrialOutcome> {
        (0..cfg.n_trials)
            .into_par_iter()
            .map(|trial| {
                let result = match &shared_target {
                    Some(u) => run_single(cfg, &device, u, trial),
                    None => cfg
                        .target_for_trial(trial)
                        .and_then(|u| run_single(cfg, &device, &u, trial)),
                };
                TrialOutcome { trial, result }
            })
            .collect()
    };
    match jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(run))
        }
        None => Ok(run()),
    }
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Order statistics of a set of scalars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl Stats {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q25: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q75: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
            count: v.len(),
        })
    }
}

/// Per-iteration order statistics across trials. Shorter traces are
/// extended by repeating their final value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub min: Vec<f64>,
    pub q25: Vec<f64>,
    pub median: Vec<f64>,
    pub q75: Vec<f64>,
    pub max: Vec<f64>,
}

impl QuantileSummary {
    pub fn len(&self) -> usize {
        self.median.len()
    }

    pub fn is_empty(&self) -> bool {
        self.median.is_empty()
    }
}

pub fn summarize<'a>(results: impl IntoIterator<Item = &'a OptimResult>) -> Result<QuantileSummary> {
    let traces: Vec<&[f64]> = results.into_iter().map(|r| r.trace.as_slice()).collect();
    if traces.is_empty() {
        return Err(Error::InvalidArgument("cannot summarize zero results".into()));
    }
    let len = traces.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut s = QuantileSummary {
        min: Vec::with_capacity(len),
        q25: Vec::with_capacity(len),
        median: Vec::with_capacity(len),
        q75: Vec::with_capacity(len),
        max: Vec::with_capacity(len),
    };
    let mut column = Vec::with_capacity(traces.len());
    for i in 0..len {
        column.clear();
        column.extend(traces.iter().filter_map(|t| t.get(i).or(t.last()).copied()));
        column.sort_by(f64::total_cmp);
        s.min.push(column[0]);
        s.q25.push(quantile_sorted(&column, 0.25));
        s.median.push(quantile_sorted(&column, 0.5));
        s.q75.push(quantile_sorted(&column, 0.75));
        s.max.push(column[column.len() - 1]);
    }
    Ok(s)
}

/// A run counts as converged at the first iterate that has covered this
/// fraction of its total decrease in `log10(loss)`.
pub const CONVERGENCE_LOG_FRACTION: f64 = 0.9;

/// `(iteration, cumulative evaluations)` at which `r` converged in the sense
/// of [`CONVERGENCE_LOG_FRACTION`].
pub fn convergence_point(r: &OptimResult) -> (usize, usize) {
    let floor = f64::MIN_POSITIVE;
    let first = r.trace[0].max(floor).log10();
    let last = r.final_loss.max(floor).log10();
    let threshold = last + (1.0 - CONVERGENCE_LOG_FRACTION) * (first - last).max(0.0);
    let k = r
        .trace
        .iter()
        .position(|&v| v.max(floor).log10() <= threshold)
        .unwrap_or(r.trace.len() - 1);
    (k, r.eval_trace[k])
}

/// Everything written to `summary.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrialConfig,
    /// What the loss columns measure.
    pub objective: String,
    pub n_trials: usize,
    pub failed_trials: Vec<FailedTrial>,
    pub quantiles: QuantileSummary,
    pub initial_loss: Stats,
    pub final_loss: Stats,
    pub iterations: Stats,
    pub n_evals: Stats,
    pub iterations_to_convergence: Stats,
    pub evals_to_convergence: Stats,
    pub termination: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailedTrial {
    pub trial: usize,
    pub error: String,
}

impl RunSummary {
    pub fn new(cfg: &TrialConfig, outcomes: &[TrialOutcome]) -> Result<Self> {
        let ok: Vec<&OptimResult> = outcomes.iter().filter_map(TrialOutcome::ok).collect();
        let failed_trials = outcomes
            .iter()
            .filter_map(|o| {
                o.result.as_ref().err().map(|e| FailedTrial {
                    trial: o.trial,
                    error: e.to_string(),
                })
            })
            .collect();
        if ok.is_empty() {
            return Err(Error::AllTrialsFailed);
        }
        let stats = |f: &dyn Fn(&OptimResult) -> f64| {
            Stats::from_values(ok.iter().map(|r| f(r))).expect("non-empty")
        };
        let mut termination = BTreeMap::new();
        for r in &ok {
            let key = match r.termination {
                Termination::GradTol => "grad_tol",
                Termination::MaxIters => "max_iters",
                Termination::LineSearchFailure => "line_search_failure",
            };
            *termination.entry(key.to_string()).or_insert(0) += 1;
        }
        Ok(Self {
            config: cfg.clone(),
            objective: cfg.loss.objective_label().to_string(),
            n_trials: outcomes.len(),
            failed_trials,
            quantiles: summarize(ok.iter().copied())?,
            initial_loss: stats(&|r| r.trace[0]),
            final_loss: stats(&|r| r.final_loss),
            iterations: stats(&|r| r.iterations() as f64),
            n_evals: stats(&|r| r.n_objective_evals as f64),
            iterations_to_convergence: stats(&|r| convergence_point(r).0 as f64),
            evals_to_convergence: stats(&|r| convergence_point(r).1 as f64),
            termination,
        })
    }
}

/// Writes `trial,iteration,loss` rows for every successful trial.
pub fn write_traces_csv<W: Write>(outcomes: &[TrialOutcome], mut w: W) -> std::io::Result<()> {
    writeln!(w, "trial,iteration,loss")?;
    for o in outcomes {
        if let Ok(r) = &o.result {
            for (i, v) in r.trace.iter().enumerate() {
                writeln!(w, "{},{},{:e}", o.trial, i, v)?;
            }
        }
    }
    Ok(())
}

/// Two-dimensional PCA view of an optimization path plus the loss surface
/// over the plane it spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub principal_axes: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    /// Set when the path spans fewer than two directions; the second axis
    /// is then an arbitrary unit vector orthogonal to the first.
    pub degenerate: bool,
    /// Parameter vector at plane coordinates `(0, 0)`: the path mean, moved
    /// off-plane so the plane passes through the final iterate.
    pub anchor: Vec<f64>,
    /// Path coordinates relative to the mean along the two axes.
    pub projected_path: Vec<[f64; 2]>,
    pub grid_x_range: [f64; 2],
    pub grid_y_range: [f64; 2],
    pub grid_resolution: usize,
    /// `log10` loss, row-major with rows along the second axis.
    pub grid_log10_loss: Vec<f64>,
}

impl TrajectoryRecord {
    /// Grid coordinates of node `(row, col)`.
    pub fn grid_point(&self, row: usize, col: usize) -> [f64; 2] {
        let lerp = |r: [f64; 2], k: usize| {
            if self.grid_resolution == 1 {
                0.5 * (r[0] + r[1])
            } else {
                r[0] + (r[1] - r[0]) * k as f64 / (self.grid_resolution - 1) as f64
            }
        };
        [lerp(self.grid_x_range, col), lerp(self.grid_y_range, row)]
    }

    /// Parameter vector at plane coordinates `(a, b)`.
    pub fn lift(&self, coords: [f64; 2]) -> Vec<f64> {
        self.anchor
            .iter()
            .zip(self.principal_axes[0].iter().zip(&self.principal_axes[1]))
            .map(|(c, (u, v))| c + coords[0] * u + coords[1] * v)
            .collect()
    }
}

const GRID_PADDING: f64 = 0.2;

/// Projects `history` onto its two leading principal directions and samples
/// `log10(loss)` on a padded grid over the projected path.
///
/// The grid plane is spanned by the two axes and contains the final iterate,
/// so the landscape around the end of the path is the real one rather than a
/// slice that misses the minimum.
pub fn pca_trajectory<F>(history: &[Vec<f64>], loss: F, grid_resolution: usize) -> Result<TrajectoryRecord>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if history.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 snapshots for a trajectory, got {}",
            history.len()
        )));
    }
    if grid_resolution == 0 {
        return Err(Error::InvalidArgument("grid resolution must be >= 1".into()));
    }
    let dim = history[0].len();
    if dim < 2 || history.iter().any(|h| h.len() != dim) {
        return Err(Error::InvalidArgument(
            "snapshots must share a dimension of at least 2".into(),
        ));
    }
    let t = history.len();
    let center: Vec<f64> = (0..dim)
        .map(|j| history.iter().map(|h| h[j]).sum::<f64>() / t as f64)
        .collect();
    let centered = DMatrix::from_fn(t, dim, |i, j| history[i][j] - center[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let total: f64 = sigma.iter().map(|s| s * s).sum();

    let row = |k: usize| -> Vec<f64> { v_t.row(order[k]).iter().copied().collect() };
    let rank_tol = 1e-12 * sigma[0].max(f64::MIN_POSITIVE);
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    if sigma[0] > 0.0 {
        axes.push(row(0));
    }
    if sigma.len() > 1 && sigma[1] > rank_tol && !axes.is_empty() {
        axes.push(row(1));
    }
    let degenerate = axes.len() < 2;
    while axes.len() < 2 {
        axes.push(orthonormal_complement(&axes, dim));
    }
    for a in &mut axes {
        fix_sign(a);
    }
    let explained = |k: usize| {
        if total > 0.0 && k < sigma.len() {
            sigma[k] * sigma[k] / total
        } else {
            0.0
        }
    };
    let explained_variance = [explained(0), explained(1)];

    let projected_path: Vec<[f64; 2]> = history
        .iter()
        .map(|h| {
            let d: Vec<f64> = h.iter().zip(&center).map(|(a, b)| a - b).collect();
            [dot(&d, &axes[0]), dot(&d, &axes[1])]
        })
        .collect();
    let range = |k: usize| {
        let lo = projected_path.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = projected_path.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo { GRID_PADDING * (hi - lo) } else { 1e-3 };
        [lo - pad, hi + pad]
    };
    let end = &history[t - 1];
    let end_xy = projected_path[t - 1];
    let anchor: Vec<f64> = (0..dim)
        .map(|j| end[j] - end_xy[0] * axes[0][j] - end_xy[1] * axes[1][j])
        .collect();
    let [a0, a1]: [Vec<f64>; 2] = axes.try_into().expect("two axes");
    let (grid_x_range, grid_y_range) = (range(0), range(1));
    let mut record = TrajectoryRecord {
        principal_axes: [a0, a1],
        explained_variance,
        degenerate,
        anchor,
        projected_path,
        grid_x_range,
        grid_y_range,
        grid_resolution,
        grid_log10_loss: Vec::new(),
    };
    let nodes: Vec<(usize, usize)> = (0..grid_resolution)
        .flat_map(|r| (0..grid_resolution).map(move |c| (r, c)))
        .collect();
    record.grid_log10_loss = nodes
        .par_iter()
        .map(|&(r, c)| loss(&record.lift(record.grid_point(r, c))).log10())
        .collect();
    Ok(record)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fix_sign(v: &mut [f64]) {
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// First coordinate direction left over after removing `basis`, normalized.
fn orthonormal_complement(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        for b in basis {
            let c = dot(&e, b);
            e.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&e, &e).sqrt();
        if n > 1e-6 {
            e.iter_mut().for_each(|x| *x /= n);
            return e;
        }
    }
    unreachable!("dimension >= 2 always leaves a complement")
}

/// Final-loss statistics of one probe step in a sweep.
#[derive(Debug)]
pub struct SweepPoint {
    pub delta: f64,
    pub outcomes: Vec<TrialOutcome>,
}

impl SweepPoint {
    pub fn final_loss(&self) -> Option<Stats> {
        Stats::from_values(self.outcomes.iter().filter_map(|o| o.ok().map(|r| r.final_loss)))
    }
}

/// Runs the batch once per probe step `Δ` with forward-difference gradients.
/// The optimizer settings of `cfg` are used as given.
pub fn delta_sweep(cfg: &TrialConfig, deltas: &[f64], jobs: Option<usize>) -> Result<Vec<SweepPoint>> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("delta list is empty".into()));
    }
    deltas
        .iter()
        .map(|&delta| {
            let mut c = cfg.clone();
            c.gradient = GradientMode::forward_difference(delta)?;
            Ok(SweepPoint {
                delta,
                outcomes: run_trials_with_jobs(&c, jobs)?,
            })
        })
        .collect()
}
