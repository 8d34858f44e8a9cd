//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The search direction comes from the usual two-loop recursion over the
//! last `history_size` curvature pairs, scaled by `sᵀy / yᵀy`. Steps are
//! chosen by a bracketing line search with safeguarded cubic interpolation.
//! By default only iterates with a strictly lower objective are accepted, so
//! the recorded trace never increases.
//!
//! With [`LbfgsConfig::strict_decrease`] off, a run whose line search can no
//! longer find a decrease switches for good to a search that uses the
//! supplied gradient alone. This matters when the gradient is an
//! approximation: the run then settles where the approximate gradient
//! vanishes instead of stopping wherever values and gradient first disagree.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub history_size: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Stop once `‖g‖_∞` falls to this value.
    pub grad_tol: f64,
    pub max_iterations: usize,
    pub max_line_search_steps: usize,
    /// Keep a copy of the parameters every `history_stride` iterations.
    pub record_history: bool,
    pub history_stride: usize,
    /// Only accept iterates that lower the objective. When false, a line
    /// search that finds no sufficient decrease still moves to the probed
    /// point whose directional derivative is closest to zero, so the run
    /// follows the supplied gradient even where it disagrees with the
    /// objective values.
    pub strict_decrease: bool,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history_size: 10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            grad_tol: 1e-12,
            max_iterations: 10_000,
            max_line_search_steps: 40,
            record_history: false,
            history_stride: 1,
            strict_decrease: true,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if self.history_size == 0 {
            return Err(Error::InvalidArgument("history_size must be >= 1".into()));
        }
        if self.history_stride == 0 {
            return Err(Error::InvalidArgument("history_stride must be >= 1".into()));
        }
        if self.max_line_search_steps == 0 {
            return Err(Error::InvalidArgument("max_line_search_steps must be >= 1".into()));
        }
        if self.grad_tol.is_nan() || self.grad_tol < 0.0 {
            return Err(Error::InvalidArgument("grad_tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    MaxIters,
    LineSearchFailure,
}

/// One call of the objective: value, gradient, and how many objective
/// evaluations it took to produce them.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub cost: usize,
}

impl Evaluation {
    pub fn new(value: f64, gradient: Vec<f64>) -> Self {
        Self {
            value,
            gradient,
            cost: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub final_params: Vec<f64>,
    pub final_loss: f64,
    /// Objective at the start point followed by every accepted iterate.
    pub trace: Vec<f64>,
    /// Cumulative objective evaluations at each entry of `trace`.
    pub eval_trace: Vec<usize>,
    pub termination: Termination,
    pub n_objective_evals: usize,
    pub param_history: Option<Vec<Vec<f64>>>,
}

impl OptimResult {
    /// Accepted iterations (the start point is not counted).
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[inline]
fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Counted<F> {
    f: F,
    evals: usize,
    iteration: usize,
}

impl<F> Counted<F>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    fn call(&mut self, x: &[f64]) -> Result<Evaluation> {
        let e = (self.f)(x)?;
        self.evals += e.cost;
        if !e.value.is_finite() {
            return Err(Error::NonFinite {
                what: "objective",
                iteration: self.iteration,
                params: x.to_vec(),
            });
        }
        if e.gradient.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                iteration: self.iteration,
                params: x.to_vec(),
            });
        }
        Ok(e)
    }
}

struct History {
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
    cap: usize,
}

impl History {
    fn new(cap: usize) -> Self {
        Self {
            s: VecDeque::with_capacity(cap),
            y: VecDeque::with_capacity(cap),
            rho: VecDeque::with_capacity(cap),
            cap,
        }
    }

    fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        // skip pairs with (near-)non-positive curvature
        if sy <= 1e-14 * norm2(&s) * norm2(&y) {
            return;
        }
        if self.s.len() == self.cap {
            self.s.pop_front();
            self.y.pop_front();
            self.rho.pop_front();
        }
        self.rho.push_back(1.0 / sy);
        self.s.push_back(s);
        self.y.push_back(y);
    }

    /// `−H g` by two-loop recursion.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            q.iter_mut().zip(&self.y[i]).for_each(|(qj, yj)| *qj -= alpha[i] * yj);
        }
        if let (Some(s), Some(y)) = (self.s.back(), self.y.back()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for (i, a) in alpha.iter().enumerate() {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            q.iter_mut().zip(&self.s[i]).for_each(|(qj, sj)| *qj += (a - beta) * sj);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

/// Minimizes `f` from `x0`.
///
/// `f` returns the objective together with its gradient. A line search that
/// cannot make progress first drops the curvature memory and retries along
/// steepest descent. If that fails too, a strict run ends with
/// [`Termination::LineSearchFailure`]; a non-strict run switches to the
/// gradient-only search and ends that way only when it, too, finds no step.
pub fn minimize<F>(f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    cfg.validate()?;
    let mut obj = Counted {
        f,
        evals: 0,
        iteration: 0,
    };
    let mut x = x0.to_vec();
    let first = obj.call(&x)?;
    if first.gradient.len() != x.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has length {}, expected {}",
            first.gradient.len(),
            x.len()
        )));
    }
    let mut fx = first.value;
    let mut g = first.gradient;

    let mut trace = vec![fx];
    let mut eval_trace = vec![obj.evals];
    let mut param_history = cfg.record_history.then(|| vec![x.clone()]);
    let mut hist = History::new(cfg.history_size);

    let mut termination = Termination::MaxIters;
    // set once objective values and the supplied gradient stop agreeing
    let mut follow_gradient = false;
    if inf_norm(&g) <= cfg.grad_tol {
        termination = Termination::GradTol;
    } else {
        for iteration in 1..=cfg.max_iterations {
            obj.iteration = iteration;
            let step = loop {
                let (d, gtd) = {
                    let d = hist.direction(&g);
                    let gtd = dot(&g, &d);
                    if gtd < 0.0 && gtd.is_finite() {
                        (d, gtd)
                    } else {
                        hist.clear();
                        let d: Vec<f64> = g.iter().map(|v| -v).collect();
                        let gtd = -dot(&g, &g);
                        (d, gtd)
                    }
                };
                let t0 = if hist.is_empty() {
                    (1.0 / norm2(&g)).min(1.0)
                } else {
                    1.0
                };
                let negligible = |t: f64| t * inf_norm(&d) <= 1e-15 * (1.0 + inf_norm(&x));
                if !follow_gradient {
                    let ls = strong_wolfe(&mut obj, &x, fx, &g, &d, gtd, t0, cfg)?;
                    if let Some(ls) = ls.filter(|ls| ls.value < fx && !negligible(ls.t)) {
                        break Some((d, ls));
                    }
                    if hist.is_empty() && !cfg.strict_decrease {
                        follow_gradient = true;
                    }
                }
                if follow_gradient {
                    let ls = gradient_only_search(&mut obj, &x, &d, gtd, t0, cfg)?;
                    if let Some(ls) = ls.filter(|ls| !negligible(ls.t)) {
                        break Some((d, ls));
                    }
                }
                if hist.is_empty() {
                    break None;
                }
                hist.clear();
            };
            let Some((d, ls)) = step else {
                termination = Termination::LineSearchFailure;
                break;
            };

            let s: Vec<f64> = d.iter().map(|v| ls.t * v).collect();
            let y: Vec<f64> = ls.gradient.iter().zip(&g).map(|(a, b)| a - b).collect();
            x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
            hist.push(s, y);
            fx = ls.value;
            g = ls.gradient;

            trace.push(fx);
            eval_trace.push(obj.evals);
            if let Some(h) = param_history.as_mut() {
                if iteration % cfg.history_stride == 0 {
                    h.push(x.clone());
                }
            }
            if inf_norm(&g) <= cfg.grad_tol {
                termination = Termination::GradTol;
                break;
            }
        }
    }

    if let Some(h) = param_history.as_mut() {
        if h.last() != Some(&x) {
            h.push(x.clone());
        }
    }
    Ok(OptimResult {
        final_params: x,
        final_loss: fx,
        trace,
        eval_trace,
        termination,
        n_objective_evals: obj.evals,
        param_history,
    })
}

struct LineSearchPoint {
    t: f64,
    value: f64,
    gradient: Vec<f64>,
}

/// Line search that looks only at the directional derivative `g(t)ᵀd`.
///
/// Brackets a sign change of `g(t)ᵀd` within `(0, 10 t0]` and narrows it by
/// safeguarded secant steps until `|g(t)ᵀd| ≤ c2 |g(0)ᵀd|`. Objective values
/// are recorded but play no part in the choice of step. Returns the probe
/// with the smallest `|g(t)ᵀd|` once a bracket exists, or `None` if the
/// directional derivative stays negative over the whole range.
fn gradient_only_search<F>(
    obj: &mut Counted<F>,
    x: &[f64],
    d: &[f64],
    gtd0: f64,
    mut t: f64,
    cfg: &LbfgsConfig,
) -> Result<Option<LineSearchPoint>>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let target = cfg.wolfe_c2 * gtd0.abs();
    let t_max = 10.0 * t;
    let mut probe = x.to_vec();
    let mut best: Option<(f64, LineSearchPoint)> = None;
    let (mut lo, mut lo_gtd) = (0.0, gtd0);
    let mut hi: Option<(f64, f64)> = None;
    for _ in 0..cfg.max_line_search_steps {
        probe.iter_mut().zip(x.iter().zip(d)).for_each(|(p, (xi, di))| *p = xi + t * di);
        let e = obj.call(&probe)?;
        let gtd = dot(&e.gradient, d);
        if best.as_ref().is_none_or(|(b, _)| gtd.abs() < *b) {
            let point = LineSearchPoint {
                t,
                value: e.value,
                gradient: e.gradient,
            };
            best = Some((gtd.abs(), point));
        }
        if gtd.abs() <= target {
            return Ok(best.map(|(_, p)| p));
        }
        if gtd < 0.0 {
            (lo, lo_gtd) = (t, gtd);
        } else {
            hi = Some((t, gtd));
        }
        t = match hi {
            None if t >= t_max => return Ok(None),
            None => {
                let secant = t - gtd * t / (gtd - gtd0);
                let next = if secant.is_finite() && secant > t {
                    secant.clamp(2.0 * t, 10.0 * t)
                } else {
                    2.0 * t
                };
                next.min(t_max)
            }
            Some((h, h_gtd)) => {
                let w = h - lo;
                let secant = lo - lo_gtd * w / (h_gtd - lo_gtd);
                if secant.is_finite() {
                    secant.clamp(lo + 0.1 * w, h - 0.1 * w)
                } else {
                    lo + 0.5 * w
                }
            }
        };
    }
    Ok(hi.and(best).map(|(_, p)| p))
}

/// Minimizer of the cubic through `(x1, f1, g1)` and `(x2, f2, g2)`, clamped
/// to `bounds` (or to the interval between the points).
fn cubic_interpolate(
    (x1, f1, g1): (f64, f64, f64),
    (x2, f2, g2): (f64, f64, f64),
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.max(lo).min(hi);
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone)]
struct Bracket {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

/// Strong-Wolfe line search along `d` starting at step `t`.
///
/// Returns the best point found that satisfies sufficient decrease, or
/// `None` if no such point with a positive step was found.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    obj: &mut Counted<F>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    gtd0: f64,
    mut t: f64,
    cfg: &LbfgsConfig,
) -> Result<Option<LineSearchPoint>>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let (c1, c2) = (cfg.wolfe_c1, cfg.wolfe_c2);
    let max_ls = cfg.max_line_search_steps;
    let d_norm = inf_norm(d);
    let x_scale = 1.0 + inf_norm(x);
    let mut probe = x.to_vec();
    let mut eval_at = |obj: &mut Counted<F>, t: f64| -> Result<(f64, Vec<f64>, f64)> {
        probe.iter_mut().zip(x.iter().zip(d)).for_each(|(p, (xi, di))| *p = xi + t * di);
        let e = obj.call(&probe)?;
        let gtd = dot(&e.gradient, d);
        Ok((e.value, e.gradient, gtd))
    };
    let armijo = |t: f64, f: f64| f <= f0 + c1 * t * gtd0;

    let (mut f_new, mut g_new, mut gtd_new) = eval_at(obj, t)?;
    let mut ls_iter = 1;
    let mut prev = Bracket {
        t: 0.0,
        f: f0,
        g: g0.to_vec(),
        gtd: gtd0,
    };
    let mut done = false;
    let mut bracket: Vec<Bracket>;

    loop {
        if !armijo(t, f_new) || (ls_iter > 1 && f_new >= prev.f) {
            bracket = vec![prev.clone(), Bracket { t, f: f_new, g: g_new.clone(), gtd: gtd_new }];
            break;
        }
        if gtd_new.abs() <= -c2 * gtd0 {
            bracket = vec![Bracket { t, f: f_new, g: g_new.clone(), gtd: gtd_new }];
            done = true;
            break;
        }
        if gtd_new >= 0.0 {
            bracket = vec![prev.clone(), Bracket { t, f: f_new, g: g_new.clone(), gtd: gtd_new }];
            break;
        }
        if ls_iter >= max_ls {
            bracket = vec![
                Bracket { t: 0.0, f: f0, g: g0.to_vec(), gtd: gtd0 },
                Bracket { t, f: f_new, g: g_new.clone(), gtd: gtd_new },
            ];
            break;
        }
        // extrapolate
        let min_step = t + 0.01 * (t - prev.t);
        let max_step = t * 10.0;
        let t_next = cubic_interpolate(
            (prev.t, prev.f, prev.gtd),
            (t, f_new, gtd_new),
            Some((min_step, max_step)),
        );
        prev = Bracket { t, f: f_new, g: g_new, gtd: gtd_new };
        t = t_next;
        (f_new, g_new, gtd_new) = eval_at(obj, t)?;
        ls_iter += 1;
    }

    // zoom
    let mut insufficient = false;
    let order = |b: &[Bracket]| if b[0].f <= b[b.len() - 1].f { (0, 1) } else { (1, 0) };
    let (mut low, mut high) = if bracket.len() == 2 { order(&bracket) } else { (0, 0) };
    while !done && ls_iter < max_ls {
        let (a, b) = (bracket[0].t, bracket[1].t);
        if (b - a).abs() * d_norm < 1e-15 * x_scale {
            break;
        }
        let mut t = cubic_interpolate(
            (bracket[0].t, bracket[0].f, bracket[0].gtd),
            (bracket[1].t, bracket[1].f, bracket[1].gtd),
            None,
        );
        let (lo, hi) = (a.min(b), a.max(b));
        let eps = 0.1 * (hi - lo);
        if (hi - t).min(t - lo) < eps {
            if insufficient || t >= hi || t <= lo {
                t = if (t - hi).abs() < (t - lo).abs() { hi - eps } else { lo + eps };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }
        let (f_t, g_t, gtd_t) = eval_at(obj, t)?;
        ls_iter += 1;
        let point = Bracket { t, f: f_t, g: g_t, gtd: gtd_t };
        if !armijo(t, f_t) || f_t >= bracket[low].f {
            bracket[high] = point;
            (low, high) = order(&bracket);
        } else {
            if gtd_t.abs() <= -c2 * gtd0 {
                done = true;
            } else if gtd_t * (bracket[high].t - bracket[low].t) >= 0.0 {
                bracket[high] = bracket[low].clone();
            }
            bracket[low] = point;
        }
    }

    let best = &bracket[low];
    if best.t > 0.0 && armijo(best.t, best.f) {
        Ok(Some(LineSearchPoint {
            t: best.t,
            value: best.f,
            gradient: best.g.clone(),
        }))
    } else {
        Ok(None)
    }
}
