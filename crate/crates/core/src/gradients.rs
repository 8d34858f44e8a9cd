//! Gradients of the normalized losses with respect to applied phases.
//!
//! The analytic gradient is a reverse-mode sweep over the layered product.
//! With `dL = Re Tr(G† dX)` for an upstream matrix `G`, a diagonal phase
//! array applied to a partial product contributes
//! `∂L/∂q_j = −Im Σ_c conj(G_jc) Y_jc`, where `Y` is the partial product
//! right after that array. `G` is then carried through each factor by its
//! adjoint. Crosstalk is handled by pulling the effective-phase gradient back
//! through the transpose of the kernel map.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::{mzi_derivatives, mzi_entries, ClementsDevice, Device, DeviceSpec, MplcDevice, PhaseArrays};
use crate::distances::LossKind;
use crate::error::{Error, Result};
use crate::linalg::{adjoint_matmul, haar_random_unitary, ComplexMatrix, RngStream, UnitaryMatrix};

/// How the optimizer obtains gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    /// One-sided difference with probe step `delta` (radians).
    ForwardDifference { delta: f64 },
}

impl GradientMode {
    pub fn forward_difference(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "finite-difference step must be positive, got {delta}"
            )));
        }
        Ok(GradientMode::ForwardDifference { delta })
    }

    /// `2^-k` probe step, the usual way resolutions are specified.
    pub fn bits(k: i32) -> Self {
        GradientMode::ForwardDifference {
            delta: 2f64.powi(-k),
        }
    }
}

/// Probe-step exponents swept by default: `Δ = 2^-k`.
pub const DEFAULT_DELTA_EXPONENTS: [i32; 6] = [6, 9, 10, 12, 15, 18];

/// A device, a target, and a loss, evaluated as a function of applied phases.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    device: &'a Device,
    target: &'a UnitaryMatrix,
    kind: LossKind,
}

impl<'a> Objective<'a> {
    pub fn new(device: &'a Device, target: &'a UnitaryMatrix, kind: LossKind) -> Result<Self> {
        if device.n_modes() != target.dim() {
            return Err(Error::InvalidParameter(format!(
                "device has {} modes but target is {}x{}",
                device.n_modes(),
                target.dim(),
                target.dim()
            )));
        }
        Ok(Self {
            device,
            target,
            kind,
        })
    }

    pub fn device(&self) -> &Device {
        self.device
    }

    pub fn target(&self) -> &UnitaryMatrix {
        self.target
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.device.param_count()
    }

    pub fn value(&self, p: &[f64]) -> Result<f64> {
        let x = self.device.forward(p)?;
        self.kind.objective(&x, self.target)
    }

    /// Loss and exact gradient from one forward and one reverse sweep.
    pub fn value_and_gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        if p.len() != self.dim() {
            return Err(Error::InvalidParameter(format!(
                "parameter vector has length {}, device expects {}",
                p.len(),
                self.dim()
            )));
        }
        match self.device {
            Device::Mplc(d) => mplc_value_and_gradient(d, p, self.target, self.kind),
            Device::Clements(d) => clements_value_and_gradient(d, p, self.target, self.kind),
        }
    }
}

/// Analytic `dL/dp` for `dev` at `p` against target `u`.
pub fn analytic_gradient(dev: &Device, p: &[f64], u: &UnitaryMatrix, kind: LossKind) -> Result<Vec<f64>> {
    Ok(Objective::new(dev, u, kind)?.value_and_gradient(p)?.1)
}

/// Upstream matrix `G` with `dL = Re Tr(G† dX)`, together with `L` itself.
fn loss_and_upstream(x: &ComplexMatrix, u: &ComplexMatrix, kind: LossKind) -> Result<(f64, ComplexMatrix)> {
    let n = x.rows() as f64;
    match kind {
        LossKind::FrobeniusNormalized => {
            let diff = x.sub(u)?;
            let value = (diff.frobenius_norm_sqr() / (4.0 * n)).min(1.0);
            Ok((value, diff.scale(Complex64::new(1.0 / (2.0 * n), 0.0))))
        }
        LossKind::PhaseInsensitive => {
            let m = x.matmul(&u.adjoint())?;
            let size = x.rows();
            let mut value = 0.0;
            let mut w = ComplexMatrix::zeros(size, size);
            for i in 0..size {
                for j in 0..size {
                    let z = m[(i, j)];
                    let r = z.norm();
                    let target = if i == j { 1.0 } else { 0.0 };
                    value += (target - r).powi(2);
                    // non-smooth where |M_ij| = 0; take the zero subgradient
                    if r > 0.0 {
                        w[(i, j)] = z * (2.0 * (r - target) / r);
                    }
                }
            }
            let g = w.matmul(u)?.scale(Complex64::new(1.0 / (4.0 * n), 0.0));
            Ok((value / (4.0 * n), g))
        }
    }
}

/// `−Im Σ_c conj(G_jc) Y_jc` for every row `j`.
fn diagonal_phase_grad(g: &ComplexMatrix, y: &ComplexMatrix, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let s: Complex64 = g.row(j).iter().zip(y.row(j)).map(|(a, b)| a.conj() * b).sum();
        *o = -s.im;
    }
}

fn conj_phases(q: &[f64]) -> Vec<Complex64> {
    q.iter().map(|&t| Complex64::from_polar(1.0, -t)).collect()
}

fn mplc_value_and_gradient(
    dev: &MplcDevice,
    p: &[f64],
    u: &UnitaryMatrix,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let n = dev.n_modes();
    let m = dev.n_layers();
    let q = dev.effective_phases(p);
    let mut states = Vec::with_capacity(m);
    let x = dev.forward_effective(&q, Some(&mut states));
    let (value, mut g) = loss_and_upstream(&x, u, kind)?;

    let mut grad = vec![0.0; q.len()];
    if dev.include_output_phases() {
        diagonal_phase_grad(&g, &x, &mut grad[m * n..(m + 1) * n]);
        g.scale_rows(&conj_phases(&q[m * n..(m + 1) * n]));
    }
    for layer in (0..m).rev() {
        g = adjoint_matmul(&dev.mixers()[layer], &g);
        diagonal_phase_grad(&g, &states[layer], &mut grad[layer * n..(layer + 1) * n]);
        if layer > 0 {
            g.scale_rows(&conj_phases(&q[layer * n..(layer + 1) * n]));
        }
    }
    Ok((value, dev.pull_back(grad)))
}

fn clements_value_and_gradient(
    dev: &ClementsDevice,
    p: &[f64],
    u: &UnitaryMatrix,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let n = dev.n_modes();
    let layers = dev.n_layers();
    let offs = dev.layer_offsets();
    let q = dev.effective_phases(p);
    let mut states = Vec::with_capacity(layers + 1);
    let x = dev.forward_effective(&q, Some(&mut states));
    let (value, mut g) = loss_and_upstream(&x, u, kind)?;

    let mut grad = vec![0.0; q.len()];
    let out = offs[layers];
    diagonal_phase_grad(&g, &x, &mut grad[out..out + n]);
    g.scale_rows(&conj_phases(&q[out..out + n]));

    for layer in (0..layers).rev() {
        let before = &states[layer];
        for k in 0..dev.mzis_in_layer(layer) {
            let a = dev.mzi_mode(layer, k);
            let (theta, phi) = (q[offs[layer] + 2 * k], q[offs[layer] + 2 * k + 1]);
            // K[r][s] = Σ_c conj(G[a+r, c]) · Y_before[a+s, c]
            let mut kmat = [Complex64::new(0.0, 0.0); 4];
            for r in 0..2 {
                for s in 0..2 {
                    kmat[2 * r + s] = g
                        .row(a + r)
                        .iter()
                        .zip(before.row(a + s))
                        .map(|(x, y)| x.conj() * y)
                        .sum();
                }
            }
            let (dt, dp) = mzi_derivatives(theta, phi);
            let contract = |d: &[Complex64; 4]| -> f64 {
                d.iter().zip(&kmat).map(|(x, y)| x * y).sum::<Complex64>().re
            };
            grad[offs[layer] + 2 * k] = contract(&dt);
            grad[offs[layer] + 2 * k + 1] = contract(&dp);

            let t = mzi_entries(theta, phi);
            let adj = [t[0].conj(), t[2].conj(), t[1].conj(), t[3].conj()];
            crate::device::rotate_rows(&mut g, a, &adj);
        }
    }
    Ok((value, dev.pull_back(grad)))
}

/// Forward-difference estimate of the gradient together with `f(p)`.
///
/// Costs exactly `p.len() + 1` evaluations of `f`.
pub fn forward_difference<F>(mut f: F, p: &[f64], delta: f64) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let f0 = f(p)?;
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for j in 0..p.len() {
        probe[j] = p[j] + delta;
        grad.push((f(&probe)? - f0) / delta);
        probe[j] = p[j];
    }
    Ok((f0, grad))
}

/// `[(f(p + Δ e_j) − f(p)) / Δ]_j`.
pub fn approx_gradient<F>(mut f: F, p: &[f64], delta: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    forward_difference(|x| Ok(f(x)), p, delta)
        .expect("infallible objective")
        .1
}

/// Worst disagreement found by [`gradient_check`].
#[derive(Clone, Debug, Serialize)]
pub struct GradientCheckReport {
    pub max_rel_error: f64,
    /// Largest raw |analytic − numeric| over all components, floor or not.
    pub max_abs_error: f64,
    pub trial: usize,
    pub param_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub trials: usize,
}

/// Absolute disagreement below which a component counts as exact.
pub const GRADIENT_CHECK_ABS_FLOOR: f64 = 1e-9;
const CENTRAL_STEP: f64 = 1e-6;

/// Componentwise relative error with the absolute floor applied.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= GRADIENT_CHECK_ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares the analytic gradient against central differences on random
/// devices, parameters and targets.
pub fn gradient_check(
    spec: &DeviceSpec,
    kind: LossKind,
    trials: usize,
    stream: RngStream,
) -> Result<GradientCheckReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut report = GradientCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        trial: 0,
        param_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        trials,
    };
    let mut rng = stream.rng();
    for t in 0..trials {
        let dev = spec.build(RngStream::new(rng.random(), 0))?;
        let u = haar_random_unitary(dev.n_modes(), RngStream::new(rng.random(), 1))?;
        let p: Vec<f64> = (0..dev.param_count())
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        let obj = Objective::new(&dev, &u, kind)?;
        let (_, analytic) = obj.value_and_gradient(&p)?;
        let mut probe = p.clone();
        for j in 0..p.len() {
            probe[j] = p[j] + CENTRAL_STEP;
            let fp = obj.value(&probe)?;
            probe[j] = p[j] - CENTRAL_STEP;
            let fm = obj.value(&probe)?;
            probe[j] = p[j];
            let numeric = (fp - fm) / (2.0 * CENTRAL_STEP);
            let err = relative_error(analytic[j], numeric);
            let max_abs_error = report.max_abs_error.max((analytic[j] - numeric).abs());
            report.max_abs_error = max_abs_error;
            if err > report.max_rel_error {
                report = GradientCheckReport {
                    max_rel_error: err,
                    max_abs_error,
                    trial: t,
                    param_index: j,
                    analytic: analytic[j],
                    numeric,
                    trials,
                };
            }
        }
    }
    Ok(report)
}
