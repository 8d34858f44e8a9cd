//! Dense complex linear algebra.
//!
//! Everything here works on small, dense, row-major matrices of `Complex64`:
//! products, adjoints, a Householder QR used for Haar sampling, and a shifted
//! Hessenberg QR iteration used to extract eigenvalues of unitary matrices.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Deref, Index, IndexMut};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Dense row-major complex matrix with finite entries.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimension(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidDimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::InvariantViolation(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![ZERO; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![ONE; n])
    }

    pub fn from_diagonal(diag: &[Complex64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from nested rows. Used mostly by tests.
    pub fn from_rows(rows: &[Vec<Complex64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidDimension("ragged rows".into()));
        }
        Self::new(r, c, rows.iter().flatten().copied().collect())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Entries in row-major order.
    #[inline]
    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        matmul(self, rhs)
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|z| z * s).collect())
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.check_same_shape(rhs)?;
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Multiplies row `i` by `diag[i]`, i.e. computes `diag(d) * self` in place.
    pub fn scale_rows(&mut self, diag: &[Complex64]) {
        debug_assert_eq!(diag.len(), self.rows);
        for (row, &d) in self.data.chunks_exact_mut(self.cols).zip(diag) {
            row.iter_mut().for_each(|z| *z *= d);
        }
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sqr().sqrt()
    }

    /// `‖M†M − I‖_F`, or infinity for non-square matrices.
    pub fn unitarity_defect(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut s = ZERO;
                for k in 0..n {
                    s += self[(k, i)].conj() * self[(k, j)];
                }
                if i == j {
                    s -= ONE;
                }
                acc += s.norm_sqr();
            }
        }
        acc.sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    fn check_same_shape(&self, rhs: &Self) -> Result<()> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::InvalidDimension(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for z in self.row(i) {
                write!(f, "{:+.6}{:+.6}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// Standard matrix product.
pub fn matmul(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if a.cols != b.rows {
        return Err(Error::InvalidDimension(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = ComplexMatrix::zeros(a.rows, b.cols);
    matmul_into(a, b, &mut out);
    Ok(out)
}

/// `out = a * b` without shape checks; `out` must already have the right shape.
pub(crate) fn matmul_into(a: &ComplexMatrix, b: &ComplexMatrix, out: &mut ComplexMatrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!((out.rows, out.cols), (a.rows, b.cols));
    let n = b.cols;
    out.data.iter_mut().for_each(|z| *z = ZERO);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == ZERO {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
}

/// `a† * b` without forming the adjoint.
pub(crate) fn adjoint_matmul(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    debug_assert_eq!(a.rows, b.rows);
    let n = b.cols;
    let mut out = ComplexMatrix::zeros(a.cols, n);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, aki) in a.row(k).iter().enumerate() {
            let c = aki.conj();
            for (o, &bkj) in out.data[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += c * bkj;
            }
        }
    }
    out
}

/// Square matrix known to be unitary to within `1e-10 * N` in Frobenius norm.
#[derive(Clone, PartialEq)]
pub struct UnitaryMatrix(ComplexMatrix);

impl UnitaryMatrix {
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvariantViolation(format!(
                "unitary matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        let defect = m.unitarity_defect();
        let bound = 1e-10 * m.rows as f64;
        if defect > bound {
            return Err(Error::InvariantViolation(format!(
                "matrix is not unitary: |M'M - I|_F = {defect:.3e} > {bound:.1e}"
            )));
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: ComplexMatrix) -> Self {
        debug_assert!(m.is_square());
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(ComplexMatrix::identity(n))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_inner(self) -> ComplexMatrix {
        self.0
    }

    pub fn adjoint(&self) -> UnitaryMatrix {
        Self(self.0.adjoint())
    }

    /// Product of two unitaries is unitary; no re-validation.
    pub fn compose(&self, rhs: &UnitaryMatrix) -> Result<UnitaryMatrix> {
        Ok(Self(matmul(&self.0, &rhs.0)?))
    }
}

impl Deref for UnitaryMatrix {
    type Target = ComplexMatrix;

    fn deref(&self) -> &ComplexMatrix {
        &self.0
    }
}

impl fmt::Debug for UnitaryMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Unitary{:?}", self.0)
    }
}

/// Reproducible random source identified by a seed and a stream id.
///
/// Backed by ChaCha20, whose output is specified bit-for-bit independently of
/// platform, so the same pair always yields the same samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub const fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Haar-distributed unitary drawn from a fresh generator for `stream`.
pub fn haar_random_unitary(n: usize, stream: RngStream) -> Result<UnitaryMatrix> {
    sample_haar(n, &mut stream.rng())
}

/// Haar-distributed unitary drawn from an existing generator.
///
/// QR of a complex Ginibre matrix, with each column of `Q` rotated by the
/// phase of the matching diagonal entry of `R`.
pub fn sample_haar<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<UnitaryMatrix> {
    if n == 0 {
        return Err(Error::InvalidDimension("unitary dimension must be >= 1".into()));
    }
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let data = (0..n * n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * scale, im * scale)
        })
        .collect();
    let z = ComplexMatrix::from_raw(n, n, data);
    let (mut q, r) = householder_qr(&z);
    for j in 0..n {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        for i in 0..n {
            q[(i, j)] *= phase;
        }
    }
    Ok(UnitaryMatrix(q))
}

/// Householder QR of a square matrix: returns `(Q, R)` with `A = Q R`.
pub fn householder_qr(a: &ComplexMatrix) -> (ComplexMatrix, ComplexMatrix) {
    assert!(a.is_square(), "householder_qr expects a square matrix");
    let n = a.rows;
    let mut r = a.clone();
    let mut q = ComplexMatrix::identity(n);
    let mut v = vec![ZERO; n];
    for k in 0..n.saturating_sub(1) {
        let norm_x = (k..n).map(|i| r[(i, k)].norm_sqr()).sum::<f64>().sqrt();
        if norm_x == 0.0 {
            continue;
        }
        let x0 = r[(k, k)];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { ONE };
        let alpha = -phase * norm_x;
        for i in k..n {
            v[i] = r[(i, k)];
        }
        v[k] -= alpha;
        let vnorm = (k..n).map(|i| v[i].norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for vi in &mut v[k..n] {
            *vi /= vnorm;
        }
        // R <- (I - 2 v v†) R
        for j in 0..n {
            let s: Complex64 = (k..n).map(|i| v[i].conj() * r[(i, j)]).sum();
            for i in k..n {
                r[(i, j)] -= 2.0 * v[i] * s;
            }
        }
        // Q <- Q (I - 2 v v†)
        for i in 0..n {
            let s: Complex64 = (k..n).map(|l| q[(i, l)] * v[l]).sum();
            for l in k..n {
                q[(i, l)] -= 2.0 * s * v[l].conj();
            }
        }
    }
    (q, r)
}

/// Eigenvalues of a general square complex matrix, in deflation order.
///
/// Householder reduction to Hessenberg form followed by explicitly shifted QR
/// steps (Wilkinson shift, with an exceptional shift every 10 stalled sweeps).
pub fn eigenvalues(a: &ComplexMatrix) -> Result<Vec<Complex64>> {
    if !a.is_square() {
        return Err(Error::InvariantViolation(format!(
            "eigenvalues need a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let mut h = a.clone();
    reduce_to_hessenberg(&mut h);

    let eps = f64::EPSILON;
    let max_sweeps = 200 * n.max(1);
    let mut hi = n - 1;
    let mut stalled = 0usize;
    let mut sweeps = 0usize;
    let mut rot = Vec::with_capacity(n);
    while hi > 0 {
        let mut lo = hi;
        while lo > 0 {
            let scale = h[(lo, lo)].norm() + h[(lo - 1, lo - 1)].norm();
            let scale = if scale == 0.0 { 1.0 } else { scale };
            if h[(lo, lo - 1)].norm() <= eps * scale {
                h[(lo, lo - 1)] = ZERO;
                break;
            }
            lo -= 1;
        }
        if lo == hi {
            hi -= 1;
            stalled = 0;
            continue;
        }
        sweeps += 1;
        stalled += 1;
        if sweeps > max_sweeps {
            return Err(Error::InvariantViolation(
                "eigenvalue iteration failed to converge".into(),
            ));
        }

        let mu = if stalled.is_multiple_of(10) {
            h[(hi, hi)] + Complex64::new(0.75 * h[(hi, hi - 1)].norm(), 0.5 * h[(hi, hi - 1)].norm())
        } else {
            wilkinson_shift(
                h[(hi - 1, hi - 1)],
                h[(hi - 1, hi)],
                h[(hi, hi - 1)],
                h[(hi, hi)],
            )
        };

        for i in lo..=hi {
            h[(i, i)] -= mu;
        }
        rot.clear();
        for k in lo..hi {
            let x = h[(k, k)];
            let y = h[(k + 1, k)];
            let r = (x.norm_sqr() + y.norm_sqr()).sqrt();
            let (g00, g01, g10, g11) = if r == 0.0 {
                (ONE, ZERO, ZERO, ONE)
            } else {
                (x.conj() / r, y.conj() / r, -y / r, x / r)
            };
            for j in k..=hi {
                let a0 = h[(k, j)];
                let a1 = h[(k + 1, j)];
                h[(k, j)] = g00 * a0 + g01 * a1;
                h[(k + 1, j)] = g10 * a0 + g11 * a1;
            }
            rot.push((g00, g01, g10, g11));
        }
        for (idx, &(g00, g01, g10, g11)) in rot.iter().enumerate() {
            let k = lo + idx;
            for i in lo..=(k + 1).min(hi) {
                let c0 = h[(i, k)];
                let c1 = h[(i, k + 1)];
                h[(i, k)] = c0 * g00.conj() + c1 * g01.conj();
                h[(i, k + 1)] = c0 * g10.conj() + c1 * g11.conj();
            }
        }
        for i in lo..=hi {
            h[(i, i)] += mu;
        }
    }
    Ok((0..n).map(|i| h[(i, i)]).collect())
}

fn wilkinson_shift(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Complex64 {
    let half_tr = (a + d) * 0.5;
    let disc = ((a - d) * 0.5).powi(2) + b * c;
    let root = disc.sqrt();
    let l1 = half_tr + root;
    let l2 = half_tr - root;
    if (l1 - d).norm() <= (l2 - d).norm() {
        l1
    } else {
        l2
    }
}

fn reduce_to_hessenberg(h: &mut ComplexMatrix) {
    let n = h.rows;
    let mut v = vec![ZERO; n];
    for k in 0..n.saturating_sub(2) {
        let norm_x = ((k + 1)..n).map(|i| h[(i, k)].norm_sqr()).sum::<f64>().sqrt();
        if norm_x == 0.0 {
            continue;
        }
        let x0 = h[(k + 1, k)];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { ONE };
        for i in (k + 1)..n {
            v[i] = h[(i, k)];
        }
        v[k + 1] += phase * norm_x;
        let vnorm = ((k + 1)..n).map(|i| v[i].norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for vi in &mut v[(k + 1)..n] {
            *vi /= vnorm;
        }
        // H <- P H P with P = I - 2 v v†
        for j in 0..n {
            let s: Complex64 = ((k + 1)..n).map(|i| v[i].conj() * h[(i, j)]).sum();
            for i in (k + 1)..n {
                h[(i, j)] -= 2.0 * v[i] * s;
            }
        }
        for i in 0..n {
            let s: Complex64 = ((k + 1)..n).map(|l| h[(i, l)] * v[l]).sum();
            for l in (k + 1)..n {
                h[(i, l)] -= 2.0 * s * v[l].conj();
            }
        }
        for i in (k + 2)..n {
            h[(i, k)] = ZERO;
        }
    }
}

/// Arguments of the eigenvalues of a unitary matrix, in `(-π, π]`, ascending.
///
/// Fails with an invariant violation when the input is not square or not
/// unitary within the usual `1e-10 * N` bound.
pub fn eigenangles(u: &ComplexMatrix) -> Result<Vec<f64>> {
    let u = UnitaryMatrix::new(u.clone())?;
    let mut angles: Vec<f64> = eigenvalues(&u)?
        .into_iter()
        .map(|z| {
            let t = z.im.atan2(z.re);
            if t <= -PI {
                PI
            } else {
                t
            }
        })
        .collect();
    // stable sort keeps ties in deflation order
    angles.sort_by(|a, b| a.total_cmp(b));
    Ok(angles)
}
