use unitary_mesh::experiments::{
    convergence_point, delta_sweep, pca_trajectory, run_trials_with_jobs, write_traces_csv,
};
use unitary_mesh::{
    run_trials, summarize, Architecture, GradientMode, LossKind, Objective, OptimResult, RunSummary,
    TrialConfig,
};

fn mplc(n: usize, m: usize, gradient: GradientMode) -> TrialConfig {
    TrialConfig::new(Architecture::Mplc, n, m, LossKind::FrobeniusNormalized, gradient)
}

fn finished(cfg: &TrialConfig) -> Vec<OptimResult> {
    run_trials(cfg)
        .unwrap()
        .into_iter()
        .map(|o| o.result.unwrap())
        .collect()
}

#[test]
fn redundant_mplc_batch() {
    let cfg = mplc(8, 9, GradientMode::Analytic);
    let results = finished(&cfg);
    assert_eq!(results.len(), 64);

    let initial = results.iter().map(|r| r.trace[0]).sum::<f64>() / 64.0;
    assert!((0.45..=0.55).contains(&initial), "initial mean {initial}");

    let within_300 = results
        .iter()
        .filter(|r| r.trace[r.trace.len().min(301) - 1] < 1e-9)
        .count();
    assert!(within_300 >= 60, "{within_300} of 64 below 1e-9 by iteration 300");

    for r in &results {
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }
    let q = summarize(&results).unwrap();
    assert!(q.median.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn single_trial_is_reproducible_and_independent_of_workers() {
    let mut cfg = mplc(6, 7, GradientMode::Analytic);
    cfg.n_trials = 1;
    cfg.base_seed = 99;
    let a = run_trials_with_jobs(&cfg, Some(1)).unwrap();
    let b = run_trials_with_jobs(&cfg, Some(1)).unwrap();
    assert_eq!(a[0].result.as_ref().unwrap(), b[0].result.as_ref().unwrap());

    cfg.n_trials = 6;
    let csv = |jobs| {
        let mut buf = Vec::new();
        write_traces_csv(&run_trials_with_jobs(&cfg, jobs).unwrap(), &mut buf).unwrap();
        buf
    };
    assert_eq!(csv(Some(1)), csv(Some(4)));
}

#[test]
fn different_seeds_give_different_runs() {
    let mut cfg = mplc(4, 5, GradientMode::Analytic);
    cfg.n_trials = 2;
    let a = finished(&cfg);
    cfg.base_seed = 1;
    let b = finished(&cfg);
    assert_ne!(a[0].trace, b[0].trace);
}

#[test]
fn forward_difference_evaluation_accounting() {
    let mut cfg = mplc(4, 5, GradientMode::bits(10));
    cfg.n_trials = 4;
    let dev = cfg.build_device().unwrap();
    let per_gradient = dev.param_count() + 1;
    for r in finished(&cfg) {
        assert_eq!(r.n_objective_evals % per_gradient, 0);
        assert!(r.n_objective_evals >= (r.iterations() + 1) * per_gradient);
        assert!(*r.eval_trace.last().unwrap() <= r.n_objective_evals);
    }
}

#[test]
fn sweep_orders_by_resolution() {
    let mut cfg = mplc(4, 5, GradientMode::Analytic);
    cfg.n_trials = 6;
    let points = delta_sweep(&cfg, &[2f64.powi(-6), 2f64.powi(-18)], None).unwrap();
    let coarse = points[0].final_loss().unwrap().median;
    let fine = points[1].final_loss().unwrap().median;
    assert!(fine < coarse, "{fine} vs {coarse}");
    assert!(delta_sweep(&cfg, &[], None).is_err());
}

#[test]
fn trajectory_grid_reproduces_final_loss() {
    let mut cfg = mplc(8, 9, GradientMode::Analytic);
    cfg.n_trials = 2;
    cfg.vary_target = true;
    cfg.record_param_history = true;
    let outcomes = run_trials(&cfg).unwrap();
    let dev = cfg.build_device().unwrap();
    for o in &outcomes {
        let r = o.ok().unwrap();
        let target = cfg.target_for_trial(o.trial).unwrap();
        let obj = Objective::new(&dev, &target, cfg.loss).unwrap();
        let hist = r.param_history.as_ref().unwrap();
        let rec = pca_trajectory(hist, |x| obj.value(x).unwrap(), 21).unwrap();
        let end = *rec.projected_path.last().unwrap();
        let lifted = obj.value(&rec.lift(end)).unwrap();
        assert!((lifted.log10() - r.final_loss.log10()).abs() < 0.5);
        let ev = rec.explained_variance;
        assert!(ev[0] >= ev[1] && ev[0] + ev[1] <= 1.0 + 1e-12);
    }
}

#[test]
fn summary_counts_and_convergence_points() {
    let mut cfg = mplc(4, 5, GradientMode::Analytic);
    cfg.n_trials = 5;
    let outcomes = run_trials(&cfg).unwrap();
    let s = RunSummary::new(&cfg, &outcomes).unwrap();
    assert_eq!(s.n_trials, 5);
    assert!(s.failed_trials.is_empty());
    assert_eq!(s.termination.values().sum::<usize>(), 5);
    for o in &outcomes {
        let r = o.ok().unwrap();
        let (it, ev) = convergence_point(r);
        assert!(it <= r.iterations());
        assert_eq!(ev, r.eval_trace[it]);
    }
}
