use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use unitary_mesh::distances::random_phase_diagonal;
use unitary_mesh::experiments::{
    delta_sweep, pca_trajectory, run_trials_with_jobs, write_traces_csv, Stats, TrajectoryRecord,
};
use unitary_mesh::gradients::GradientCheckReport;
use unitary_mesh::{
    frobenius_loss, gradient_check, haar_random_unitary, phase_insensitive_loss, spectral_loss,
    Device, DeviceSpec, GradientMode, LossKind, Objective, RngStream, RunSummary, TrialConfig,
    TrialOutcome,
};

use crate::artifacts::{ArtifactWriter, RunManifest, DEVICE_FILE, HISTORY_FILE};
use crate::config::{Delta, DeltaList, FlatConfig, DEFAULT_SWEEP_DELTAS};
use crate::error::{CliError, CliResult};

pub const TRAJECTORY_FILE: &str = "trajectory.json";

/// Parameter snapshots of every successful trial.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryFile {
    pub stride: usize,
    pub trials: Vec<TrialHistory>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialHistory {
    pub trial: usize,
    pub params: Vec<Vec<f64>>,
}

fn seed_for(flat: &FlatConfig) -> u64 {
    flat.seed.unwrap_or_else(rand::random)
}

/// Writes traces, summary and (if recorded) history of one batch under
/// `prefix`, returning the summary.
fn write_batch(
    w: &mut ArtifactWriter,
    prefix: &str,
    cfg: &TrialConfig,
    outcomes: &[TrialOutcome],
) -> CliResult<RunSummary> {
    let summary = RunSummary::new(cfg, outcomes)?;
    let mut csv = Vec::new();
    write_traces_csv(outcomes, &mut csv).expect("writing to memory");
    w.write(&format!("{prefix}traces.csv"), &csv)?;
    w.write_json(&format!("{prefix}summary.json"), &summary)?;
    if cfg.record_param_history {
        let history = HistoryFile {
            stride: cfg.optimizer.history_stride,
            trials: outcomes
                .iter()
                .filter_map(|o| {
                    let params = o.ok()?.param_history.clone()?;
                    Some(TrialHistory {
                        trial: o.trial,
                        params,
                    })
                })
                .collect(),
        };
        w.write_json(&format!("{prefix}{HISTORY_FILE}"), &history)?;
    }
    for f in &summary.failed_trials {
        eprintln!("trial {} failed: {}", f.trial, f.error);
    }
    Ok(summary)
}

fn write_device(w: &mut ArtifactWriter, cfg: &TrialConfig) -> CliResult<()> {
    let mut json = cfg.build_device()?.to_json()?;
    json.push('\n');
    w.write(DEVICE_FILE, json.as_bytes())
}

fn report(label: &str, s: &RunSummary) {
    eprintln!(
        "{label}{} trials ({} failed): final loss median {:.3e}, max {:.3e}; median iterations {}",
        s.n_trials,
        s.failed_trials.len(),
        s.final_loss.median,
        s.final_loss.max,
        s.iterations.median
    );
}

pub fn run(flat: &FlatConfig) -> CliResult<RunManifest> {
    let cfg = flat.trial_config(flat.gradient()?, seed_for(flat))?;
    let out = flat.out_dir()?;
    let jobs = flat.jobs()?;
    let mut w = ArtifactWriter::create(out)?;
    let outcomes = run_trials_with_jobs(&cfg, jobs)?;
    write_device(&mut w, &cfg)?;
    let summary = write_batch(&mut w, "", &cfg, &outcomes)?;
    report("", &summary);
    w.finish("run", &cfg, None)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub label: String,
    pub dir: String,
    pub n_trials: usize,
    pub failed_trials: usize,
    pub final_loss: Stats,
    pub iterations: Stats,
    pub n_evals: Stats,
    pub iterations_to_convergence: Stats,
    pub evals_to_convergence: Stats,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub objective: String,
    pub base_seed: u64,
    pub points: Vec<SweepRow>,
}

pub fn sweep(flat: &FlatConfig, deltas: Option<DeltaList>) -> CliResult<RunManifest> {
    let deltas: Vec<Delta> = match deltas.or_else(|| flat.deltas.clone()) {
        Some(l) => l.0,
        None => DEFAULT_SWEEP_DELTAS
            .iter()
            .map(|s| s.parse().expect("default steps parse"))
            .collect(),
    };
    let Some(first) = deltas.first() else {
        return Err(CliError::Usage("the delta list is empty".into()));
    };
    if flat.grad == Some(crate::config::GradArg::Analytic) {
        return Err(CliError::Usage(
            "a sweep varies the finite-difference step; drop grad = analytic".into(),
        ));
    }
    let cfg = flat.trial_config(GradientMode::forward_difference(first.0)?, seed_for(flat))?;
    let out = flat.out_dir()?;
    let jobs = flat.jobs()?;
    let mut w = ArtifactWriter::create(out)?;
    let values: Vec<f64> = deltas.iter().map(|d| d.0).collect();
    let points = delta_sweep(&cfg, &values, jobs)?;
    write_device(&mut w, &cfg)?;

    let mut rows = Vec::with_capacity(points.len());
    for (point, delta) in points.iter().zip(&deltas) {
        let mut c = cfg.clone();
        c.gradient = GradientMode::forward_difference(point.delta)?;
        let label = delta.to_string();
        let dir = format!("delta_{label}");
        let s = write_batch(&mut w, &format!("{dir}/"), &c, &point.outcomes)?;
        report(&format!("delta {label}: "), &s);
        rows.push(SweepRow {
            delta: point.delta,
            label,
            dir,
            n_trials: s.n_trials,
            failed_trials: s.failed_trials.len(),
            final_loss: s.final_loss,
            iterations: s.iterations,
            n_evals: s.n_evals,
            iterations_to_convergence: s.iterations_to_convergence,
            evals_to_convergence: s.evals_to_convergence,
        });
    }
    let table = SweepTable {
        objective: cfg.loss.objective_label().to_string(),
        base_seed: cfg.base_seed,
        points: rows,
    };
    w.write_json("sweep.json", &table)?;
    w.finish("sweep", &cfg, Some(values))
}

/// A trajectory plus the run facts needed to interpret it.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub trial: usize,
    pub objective: String,
    pub history_stride: usize,
    #[serde(flatten)]
    pub record: TrajectoryRecord,
}

fn read_checked(dir: &Path, manifest: &RunManifest, rel: &str) -> CliResult<String> {
    let path = dir.join(rel);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    if let Some(entry) = manifest.file(rel) {
        if crate::artifacts::sha256_hex(text.as_bytes()) != entry.sha256 {
            return Err(CliError::Usage(format!(
                "{} does not match the hash recorded in the manifest",
                path.display()
            )));
        }
    }
    Ok(text)
}

pub fn landscape(dir: &Path, trial: usize, resolution: usize, out: Option<PathBuf>) -> CliResult<PathBuf> {
    if resolution == 0 {
        return Err(CliError::Usage("grid resolution must be >= 1".into()));
    }
    let manifest = RunManifest::read(dir)?;
    let cfg = &manifest.config;
    if !cfg.record_param_history || manifest.file(HISTORY_FILE).is_none() {
        return Err(CliError::Usage(format!(
            "{} has no parameter history; rerun `run` with --record-history",
            dir.display()
        )));
    }
    let history: HistoryFile = serde_json::from_str(&read_checked(dir, &manifest, HISTORY_FILE)?)
        .map_err(|e| CliError::Usage(format!("{HISTORY_FILE}: {e}")))?;
    let Some(th) = history.trials.iter().find(|t| t.trial == trial) else {
        return Err(CliError::Usage(format!(
            "trial {trial} has no recorded history (the run has {} trials; failed trials keep none)",
            cfg.n_trials
        )));
    };
    let device = Device::from_json(&read_checked(dir, &manifest, DEVICE_FILE)?)?;
    let target = cfg.target_for_trial(trial)?;
    let obj = Objective::new(&device, &target, cfg.loss)?;
    let record = pca_trajectory(&th.params, |x| obj.value(x).unwrap_or(f64::NAN), resolution)?;
    let file = TrajectoryFile {
        trial,
        objective: cfg.loss.objective_label().to_string(),
        history_stride: history.stride,
        record,
    };
    match out {
        Some(path) => {
            let mut text = serde_json::to_string_pretty(&file)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            text.push('\n');
            std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
            Ok(path)
        }
        None => {
            let mut w = ArtifactWriter::resume(dir, manifest.files.clone());
            w.write_json(TRAJECTORY_FILE, &file)?;
            w.finish(&manifest.command, cfg, manifest.deltas.clone())?;
            Ok(dir.join(TRAJECTORY_FILE))
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub device: DeviceSpec,
    pub samples: usize,
    pub gradients: Vec<(String, GradientCheckReport)>,
    pub checks: Vec<CheckItem>,
    pub passed: bool,
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
const CHECK_SAMPLES: usize = 4;

/// Gradient check plus the distance and device invariants, on the device
/// described by `flat`.
pub fn check(flat: &FlatConfig) -> CliResult<CheckReport> {
    let seed = seed_for(flat);
    let samples = flat.trials.unwrap_or(CHECK_SAMPLES);
    let mut cfg = flat.trial_config(GradientMode::Analytic, seed)?;
    cfg.n_trials = samples;
    cfg.validate()?;
    let spec = cfg.device_spec();
    let n = cfg.n_modes;
    let mut checks = Vec::new();
    let mut item = |name: &str, value: f64, tolerance: f64| {
        checks.push(CheckItem {
            name: name.to_string(),
            value,
            tolerance,
            passed: value <= tolerance,
        })
    };

    let losses = match flat.loss {
        Some(_) => vec![cfg.loss],
        None => vec![LossKind::FrobeniusNormalized, LossKind::PhaseInsensitive],
    };
    let mut gradients = Vec::new();
    for (i, &kind) in losses.iter().enumerate() {
        let r = gradient_check(&spec, kind, samples, RngStream::new(seed, i as u64))?;
        item(&format!("gradient_{}", kind.label()), r.max_rel_error, GRADIENT_TOLERANCE);
        gradients.push((kind.label().to_string(), r));
    }

    let device = cfg.build_device()?;
    let mut defect: f64 = 0.0;
    let mut identity: f64 = 0.0;
    let mut range: f64 = 0.0;
    let mut phase: f64 = 0.0;
    let mut rng = RngStream::new(seed, 16).rng();
    for t in 0..samples {
        let x = device.forward(&cfg.initial_params(t, device.param_count()))?;
        defect = defect.max(x.unitarity_defect());
        let u = haar_random_unitary(n, RngStream::new(seed, 32 + t as u64))?;
        let f = frobenius_loss(&x, &u)?;
        identity = identity.max((f - spectral_loss(&x, &u)?).abs());
        range = range.max((-f).max(f - 1.0).max(0.0));
        let d = random_phase_diagonal(n, &mut rng);
        let shifted = d.compose(&x)?;
        phase = phase.max((phase_insensitive_loss(&shifted, &u)? - phase_insensitive_loss(&x, &u)?).abs());
    }
    let u = haar_random_unitary(n, RngStream::new(seed, 31))?;
    let antipode = (frobenius_loss(&u.scale(Complex64::new(-1.0, 0.0)), &u)? - 1.0).abs();
    item("device_unitarity", defect, 1e-10 * n as f64);
    item("distance_identity", identity, 1e-10);
    item("frobenius_range", range, 0.0);
    item("frobenius_antipode", antipode, 1e-12);
    item("phase_invariance", phase, 1e-12);

    let passed = checks.iter().all(|c| c.passed);
    Ok(CheckReport {
        seed,
        device: spec,
        samples,
        gradients,
        checks,
        passed,
    })
}
