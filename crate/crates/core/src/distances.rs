//! Distances between a realized unitary `X` and a target `U`.
//!
//! * [`frobenius_loss`]: `‖X − U‖²_F / 4N`, always in `[0, 1]`.
//! * [`spectral_loss`]: the same quantity computed from the eigen-angles of
//!   `U†X` as `(2N − 2 Σ cos θ_k) / 4N`. It shares no code path with the
//!   direct form and is used to cross-check it.
//! * [`phase_insensitive_loss`]: `Σ_ij (δ_ij − |[XU†]_ij|)²`, which depends on
//!   output intensities only and ignores the phase of each output mode.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigenangles, matmul, sample_haar, ComplexMatrix, RngStream, UnitaryMatrix};

/// Which distance an optimization run minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    FrobeniusNormalized,
    PhaseInsensitive,
}

impl LossKind {
    /// The scalar the optimizer minimizes.
    ///
    /// Both variants are divided by `4N` so their scales match; the raw
    /// `h_U` value is available from [`phase_insensitive_loss`].
    pub fn objective(self, x: &ComplexMatrix, u: &ComplexMatrix) -> Result<f64> {
        match self {
            LossKind::FrobeniusNormalized => frobenius_loss(x, u),
            LossKind::PhaseInsensitive => {
                Ok(phase_insensitive_loss(x, u)? / (4.0 * x.rows() as f64))
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::FrobeniusNormalized => "frobenius",
            LossKind::PhaseInsensitive => "phase_insensitive",
        }
    }

    /// Description of what [`LossKind::objective`] reports.
    pub fn objective_label(self) -> &'static str {
        match self {
            LossKind::FrobeniusNormalized => "|X-U|_F^2/4N",
            LossKind::PhaseInsensitive => "h_U(X)/4N",
        }
    }
}

fn check_pair(x: &ComplexMatrix, u: &ComplexMatrix) -> Result<usize> {
    if !x.is_square() || !u.is_square() || x.rows() != u.rows() {
        return Err(Error::InvalidDimension(format!(
            "distance needs two NxN matrices, got {}x{} and {}x{}",
            x.rows(),
            x.cols(),
            u.rows(),
            u.cols()
        )));
    }
    Ok(x.rows())
}

/// `‖x − u‖²_F / 4N`.
pub fn frobenius_loss(x: &ComplexMatrix, u: &ComplexMatrix) -> Result<f64> {
    let n = check_pair(x, u)?;
    let d: f64 = x
        .as_slice()
        .iter()
        .zip(u.as_slice())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    // rounding can push x = -u a hair above 1
    Ok((d / (4.0 * n as f64)).min(1.0))
}

/// `(2N − 2 Σ cos θ_k) / 4N` where `θ_k` are the eigen-angles of `u† x`.
pub fn spectral_loss(x: &ComplexMatrix, u: &ComplexMatrix) -> Result<f64> {
    let n = check_pair(x, u)?;
    let w = matmul(&u.adjoint(), x)?;
    let cos_sum: f64 = eigenangles(&w)?.iter().map(|t| t.cos()).sum();
    Ok((2.0 * n as f64 - 2.0 * cos_sum) / (4.0 * n as f64))
}

/// Intensities `a_ij = |[x u†]_ij|²`.
pub fn intensity_matrix(x: &ComplexMatrix, u: &ComplexMatrix) -> Result<Vec<Vec<f64>>> {
    let n = check_pair(x, u)?;
    let m = matmul(x, &u.adjoint())?;
    Ok((0..n)
        .map(|i| m.row(i).iter().map(Complex64::norm_sqr).collect())
        .collect())
}

/// Unnormalized phase-insensitive distance `Σ_ij (δ_ij − |[x u†]_ij|)²`,
/// evaluated from intensities only.
pub fn phase_insensitive_loss(x: &ComplexMatrix, u: &ComplexMatrix) -> Result<f64> {
    let a = intensity_matrix(x, u)?;
    Ok(a.iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, &aij)| {
                if i == j {
                    (aij.sqrt() - 1.0).powi(2)
                } else {
                    aij
                }
            })
        })
        .sum())
}

/// Monte-Carlo estimate of `E[frobenius_loss(X, U)]` over Haar pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossEstimate {
    pub mean: f64,
    /// `None` when only one sample was drawn.
    pub std_error: Option<f64>,
    pub samples: usize,
}

pub fn expected_loss_estimate(n: usize, samples: usize, stream: RngStream) -> Result<LossEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be >= 1".into()));
    }
    let mut rng = stream.rng();
    let values = (0..samples)
        .map(|_| {
            let x = sample_haar(n, &mut rng)?;
            let u = sample_haar(n, &mut rng)?;
            frobenius_loss(&x, &u)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / samples as f64;
    let std_error = (samples > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
        (var / samples as f64).sqrt()
    });
    Ok(LossEstimate {
        mean,
        std_error,
        samples,
    })
}

/// Random diagonal phase matrix `diag(e^{iφ_1}, …, e^{iφ_n})`.
pub fn random_phase_diagonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> UnitaryMatrix {
    let diag: Vec<Complex64> = (0..n)
        .map(|_| Complex64::from_polar(1.0, rng.random::<f64>() * std::f64::consts::TAU))
        .collect();
    UnitaryMatrix::new_unchecked(ComplexMatrix::from_diagonal(&diag))
}
