//! Transfer-matrix models of programmable unitary converters.
//!
//! Two architectures are modelled:
//!
//! * [`MplcDevice`]: multi-plane light conversion. Fixed Haar-random mixers
//!   `A_1..A_m` interleaved with arrays of `N` phase shifters,
//!   `X = L_{m+1} A_m L_m ⋯ A_1 L_1`. The final array can be dropped for
//!   intensity-only operation.
//! * [`ClementsDevice`]: rectangular mesh of MZIs. Odd layers (1-based) hold
//!   `N/2` MZIs starting at mode 0, even layers hold `N/2 − 1` starting at
//!   mode 1, followed by `N` output phase shifters.
//!
//! # Parameter layout
//!
//! Parameters are flat `f64` radians in layer-major order. For MPLC that is
//! array `L_1` (modes ascending), then `L_2`, and so on. For Clements each
//! layer lists its MZIs top to bottom with `θ` before `φ`, and the `N` output
//! phases come last.
//!
//! Phase-shifter crosstalk (if configured) maps the applied phases to the
//! effective phases array by array before the transfer matrix is built.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul_into, ComplexMatrix, RngStream, UnitaryMatrix};

/// Linear crosstalk between neighboring shifters of one array:
/// `θ'_i = Σ_k c_k θ_{i+k}`, with out-of-range neighbors contributing nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelFile")]
pub struct CrosstalkModel {
    kernel: Vec<(i64, f64)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelFile {
    kernel: Vec<(i64, f64)>,
}

impl TryFrom<KernelFile> for CrosstalkModel {
    type Error = Error;

    fn try_from(f: KernelFile) -> Result<Self> {
        Self::new(f.kernel)
    }
}

impl Default for CrosstalkModel {
    /// `0.1, 0.5, 1, 0.5, 0.1` over offsets `-2..=2`.
    fn default() -> Self {
        Self {
            kernel: vec![(-2, 0.1), (-1, 0.5), (0, 1.0), (1, 0.5), (2, 0.1)],
        }
    }
}

impl CrosstalkModel {
    pub fn new(mut kernel: Vec<(i64, f64)>) -> Result<Self> {
        kernel.sort_by_key(|&(o, _)| o);
        if kernel.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidParameter("duplicate crosstalk offset".into()));
        }
        if kernel.iter().any(|&(_, c)| !c.is_finite()) {
            return Err(Error::InvalidParameter("non-finite crosstalk coefficient".into()));
        }
        match kernel.iter().find(|&&(o, _)| o == 0) {
            Some(&(_, 1.0)) => Ok(Self { kernel }),
            _ => Err(Error::InvalidParameter(
                "crosstalk coefficient at offset 0 must be 1.0".into(),
            )),
        }
    }

    pub fn kernel(&self) -> &[(i64, f64)] {
        &self.kernel
    }

    pub fn apply(&self, phases: &[f64]) -> Vec<f64> {
        let n = phases.len() as i64;
        (0..n)
            .map(|i| {
                self.kernel
                    .iter()
                    .filter_map(|&(o, c)| {
                        let j = i + o;
                        (0..n).contains(&j).then(|| c * phases[j as usize])
                    })
                    .sum()
            })
            .collect()
    }

    /// Transpose of [`CrosstalkModel::apply`]; pulls a gradient with respect
    /// to effective phases back to applied phases.
    pub fn apply_transpose(&self, grad: &[f64]) -> Vec<f64> {
        let n = grad.len() as i64;
        (0..n)
            .map(|j| {
                self.kernel
                    .iter()
                    .filter_map(|&(o, c)| {
                        let i = j - o;
                        (0..n).contains(&i).then(|| c * grad[i as usize])
                    })
                    .sum()
            })
            .collect()
    }

    /// Dense banded matrix of the map for an array of `n` shifters.
    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            let off = j as i64 - i as i64;
            self.kernel
                .iter()
                .find(|&&(o, _)| o == off)
                .map_or(0.0, |&(_, c)| c)
        })
    }

    pub fn check_invertible(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Ok(());
        }
        let det = self.matrix(n).determinant();
        if det.abs() <= 1e-12 || !det.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "crosstalk map is singular for arrays of {n} shifters (det = {det:e})"
            )));
        }
        Ok(())
    }
}

/// Applies `model` independently to each array.
pub fn apply_crosstalk(arrays: &[Vec<f64>], model: &CrosstalkModel) -> Vec<Vec<f64>> {
    arrays.iter().map(|a| model.apply(a)).collect()
}

/// 2×2 transfer matrix of an MZI: phase `φ` on the upper input arm, a 50:50
/// splitter `(1/√2)[[1, i], [i, 1]]`, phase `θ` on the upper internal arm, and
/// a second splitter.
pub fn mzi_transfer(theta: f64, phi: f64) -> UnitaryMatrix {
    let t = mzi_entries(theta, phi);
    UnitaryMatrix::new_unchecked(ComplexMatrix::from_raw(2, 2, t.to_vec()))
}

#[inline]
pub(crate) fn mzi_entries(theta: f64, phi: f64) -> [Complex64; 4] {
    let et = Complex64::from_polar(1.0, theta);
    let ep = Complex64::from_polar(1.0, phi);
    let i = Complex64::i();
    [
        0.5 * (et - 1.0) * ep,
        0.5 * i * (et + 1.0),
        0.5 * i * (et + 1.0) * ep,
        0.5 * (1.0 - et),
    ]
}

/// `(∂T/∂θ, ∂T/∂φ)` for [`mzi_transfer`].
#[inline]
pub(crate) fn mzi_derivatives(theta: f64, phi: f64) -> ([Complex64; 4], [Complex64; 4]) {
    let et = Complex64::from_polar(1.0, theta);
    let ep = Complex64::from_polar(1.0, phi);
    let i = Complex64::i();
    let h = 0.5 * i * et;
    let d_theta = [h * ep, h * i, h * i * ep, -h];
    let t = mzi_entries(theta, phi);
    let d_phi = [i * t[0], Complex64::new(0.0, 0.0), i * t[2], Complex64::new(0.0, 0.0)];
    (d_theta, d_phi)
}

#[derive(Clone, Debug)]
pub struct MplcDevice {
    n_modes: usize,
    mixers: Vec<UnitaryMatrix>,
    include_output_phases: bool,
    crosstalk: Option<CrosstalkModel>,
    mixer_stream: Option<RngStream>,
}

impl MplcDevice {
    pub fn new(
        mixers: Vec<UnitaryMatrix>,
        include_output_phases: bool,
        crosstalk: Option<CrosstalkModel>,
    ) -> Result<Self> {
        let n = mixers
            .first()
            .map(|a| a.dim())
            .ok_or_else(|| Error::InvalidDimension("MPLC needs at least one layer".into()))?;
        if let Some(bad) = mixers.iter().position(|a| a.dim() != n) {
            return Err(Error::InvalidDimension(format!(
                "mixer {bad} is {0}x{0}, expected {n}x{n}",
                mixers[bad].dim()
            )));
        }
        for i in 0..mixers.len() {
            for j in (i + 1)..mixers.len() {
                if mixers[i].sub(&mixers[j])?.frobenius_norm() <= 1e-6 {
                    return Err(Error::InvalidParameter(format!(
                        "mixers {i} and {j} are identical"
                    )));
                }
            }
        }
        if let Some(ct) = &crosstalk {
            ct.check_invertible(n)?;
        }
        Ok(Self {
            n_modes: n,
            mixers,
            include_output_phases,
            crosstalk,
            mixer_stream: None,
        })
    }

    /// Device with `n_layers` Haar-random mixers drawn from `stream`.
    pub fn random(
        n_modes: usize,
        n_layers: usize,
        include_output_phases: bool,
        crosstalk: Option<CrosstalkModel>,
        stream: RngStream,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidDimension("MPLC needs at least one layer".into()));
        }
        let mut rng = stream.rng();
        let mixers = (0..n_layers)
            .map(|_| crate::linalg::sample_haar(n_modes, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut dev = Self::new(mixers, include_output_phases, crosstalk)?;
        dev.mixer_stream = Some(stream);
        Ok(dev)
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_layers(&self) -> usize {
        self.mixers.len()
    }

    pub fn mixers(&self) -> &[UnitaryMatrix] {
        &self.mixers
    }

    pub fn include_output_phases(&self) -> bool {
        self.include_output_phases
    }

    pub fn crosstalk(&self) -> Option<&CrosstalkModel> {
        self.crosstalk.as_ref()
    }

    pub fn mixer_stream(&self) -> Option<RngStream> {
        self.mixer_stream
    }

    /// Number of phase-shifter arrays (`m + 1`, or `m` without output phases).
    pub fn n_arrays(&self) -> usize {
        self.n_layers() + usize::from(self.include_output_phases)
    }

    pub fn param_count(&self) -> usize {
        self.n_modes * self.n_arrays()
    }

    /// Independent real degrees of freedom: `N − 1` per array plus one
    /// global phase.
    pub fn dof_count(&self) -> usize {
        self.n_arrays() * (self.n_modes - 1) + 1
    }

    /// Transfer matrix for applied phases `p`.
    pub fn forward(&self, p: &[f64]) -> Result<UnitaryMatrix> {
        check_len(p, self.param_count())?;
        let q = self.effective_phases(p);
        Ok(UnitaryMatrix::new_unchecked(self.forward_effective(&q, None)))
    }

    /// Builds the transfer matrix from effective phases. When `states` is
    /// given, the partial product after each array is pushed onto it
    /// (the product before `L_1` is the identity and is not stored).
    pub(crate) fn forward_effective(
        &self,
        q: &[f64],
        mut states: Option<&mut Vec<ComplexMatrix>>,
    ) -> ComplexMatrix {
        let n = self.n_modes;
        let diag = |k: usize| -> Vec<Complex64> {
            q[k * n..(k + 1) * n]
                .iter()
                .map(|&t| Complex64::from_polar(1.0, t))
                .collect()
        };
        let mut y = ComplexMatrix::from_diagonal(&diag(0));
        let mut scratch = ComplexMatrix::zeros(n, n);
        for (layer, a) in self.mixers.iter().enumerate() {
            if let Some(s) = states.as_deref_mut() {
                s.push(y.clone());
            }
            matmul_into(a, &y, &mut scratch);
            std::mem::swap(&mut y, &mut scratch);
            if layer + 1 < self.n_arrays() {
                y.scale_rows(&diag(layer + 1));
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct ClementsDevice {
    n_modes: usize,
    n_layers: usize,
    crosstalk: Option<CrosstalkModel>,
}

impl ClementsDevice {
    pub fn new(n_modes: usize, n_layers: usize, crosstalk: Option<CrosstalkModel>) -> Result<Self> {
        if n_modes < 2 || !n_modes.is_multiple_of(2) {
            return Err(Error::UnsupportedDimension(format!(
                "n_modes must be even and >= 2 for the Clements mesh, got {n_modes}"
            )));
        }
        if n_layers == 0 {
            return Err(Error::InvalidDimension("Clements mesh needs at least one layer".into()));
        }
        let dev = Self {
            n_modes,
            n_layers,
            crosstalk,
        };
        if let Some(ct) = &dev.crosstalk {
            for arr in dev.phase_arrays() {
                ct.check_invertible(arr.len())?;
            }
        }
        Ok(dev)
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn crosstalk(&self) -> Option<&CrosstalkModel> {
        self.crosstalk.as_ref()
    }

    /// MZIs in layer `layer` (0-based).
    pub fn mzis_in_layer(&self, layer: usize) -> usize {
        if layer.is_multiple_of(2) {
            self.n_modes / 2
        } else {
            self.n_modes / 2 - 1
        }
    }

    /// Upper mode of the `k`-th MZI in layer `layer` (0-based).
    #[inline]
    pub(crate) fn mzi_mode(&self, layer: usize, k: usize) -> usize {
        2 * k + layer % 2
    }

    /// Offset of each layer's first parameter, plus the output-phase offset
    /// as the final entry.
    pub(crate) fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.n_layers + 1);
        let mut acc = 0;
        for l in 0..self.n_layers {
            offs.push(acc);
            acc += 2 * self.mzis_in_layer(l);
        }
        offs.push(acc);
        offs
    }

    pub fn param_count(&self) -> usize {
        self.layer_offsets()[self.n_layers] + self.n_modes
    }

    pub fn dof_count(&self) -> usize {
        self.param_count()
    }

    pub fn forward(&self, p: &[f64]) -> Result<UnitaryMatrix> {
        check_len(p, self.param_count())?;
        let q = self.effective_phases(p);
        Ok(UnitaryMatrix::new_unchecked(self.forward_effective(&q, None)))
    }

    /// Transfer matrix from effective phases; optionally records the partial
    /// product before each layer and before the output phases.
    pub(crate) fn forward_effective(
        &self,
        q: &[f64],
        mut states: Option<&mut Vec<ComplexMatrix>>,
    ) -> ComplexMatrix {
        let n = self.n_modes;
        let offs = self.layer_offsets();
        let mut y = ComplexMatrix::identity(n);
        for (layer, &off) in offs.iter().take(self.n_layers).enumerate() {
            if let Some(s) = states.as_deref_mut() {
                s.push(y.clone());
            }
            for k in 0..self.mzis_in_layer(layer) {
                let t = mzi_entries(q[off + 2 * k], q[off + 2 * k + 1]);
                rotate_rows(&mut y, self.mzi_mode(layer, k), &t);
            }
        }
        if let Some(s) = states {
            s.push(y.clone());
        }
        let out: Vec<Complex64> = q[offs[self.n_layers]..]
            .iter()
            .map(|&t| Complex64::from_polar(1.0, t))
            .collect();
        y.scale_rows(&out);
        y
    }
}

/// Rows `(a, a+1)` of `y` replaced by `T · [row_a; row_{a+1}]`.
#[inline]
pub(crate) fn rotate_rows(y: &mut ComplexMatrix, a: usize, t: &[Complex64; 4]) {
    let n = y.cols();
    let data = y.as_mut_slice();
    let (top, bottom) = data[a * n..(a + 2) * n].split_at_mut(n);
    for (u, v) in top.iter_mut().zip(bottom.iter_mut()) {
        let (x0, x1) = (*u, *v);
        *u = t[0] * x0 + t[1] * x1;
        *v = t[2] * x0 + t[3] * x1;
    }
}

fn check_len(p: &[f64], expected: usize) -> Result<()> {
    if p.len() != expected {
        return Err(Error::InvalidParameter(format!(
            "parameter vector has length {}, device expects {expected}",
            p.len()
        )));
    }
    Ok(())
}

/// A configured converter of either architecture.
#[derive(Clone, Debug)]
pub enum Device {
    Mplc(MplcDevice),
    Clements(ClementsDevice),
}

impl From<MplcDevice> for Device {
    fn from(d: MplcDevice) -> Self {
        Device::Mplc(d)
    }
}

impl From<ClementsDevice> for Device {
    fn from(d: ClementsDevice) -> Self {
        Device::Clements(d)
    }
}

impl Device {
    pub fn n_modes(&self) -> usize {
        match self {
            Device::Mplc(d) => d.n_modes(),
            Device::Clements(d) => d.n_modes(),
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            Device::Mplc(d) => d.n_layers(),
            Device::Clements(d) => d.n_layers(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Device::Mplc(d) => d.param_count(),
            Device::Clements(d) => d.param_count(),
        }
    }

    pub fn dof_count(&self) -> usize {
        match self {
            Device::Mplc(d) => d.dof_count(),
            Device::Clements(d) => d.dof_count(),
        }
    }

    pub fn crosstalk(&self) -> Option<&CrosstalkModel> {
        match self {
            Device::Mplc(d) => d.crosstalk(),
            Device::Clements(d) => d.crosstalk(),
        }
    }

    pub fn forward(&self, p: &[f64]) -> Result<UnitaryMatrix> {
        match self {
            Device::Mplc(d) => d.forward(p),
            Device::Clements(d) => d.forward(p),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Device::Mplc(_) => Architecture::Mplc,
            Device::Clements(_) => Architecture::Clements,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DeviceFile::from_device(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<DeviceFile>(s)?.into_device()
    }
}

/// Parameter indices of every physical phase-shifter array, in array order.
pub(crate) trait PhaseArrays {
    fn phase_arrays(&self) -> Vec<Vec<usize>>;
    fn crosstalk_model(&self) -> Option<&CrosstalkModel>;

    fn effective_phases(&self, p: &[f64]) -> Vec<f64> {
        let Some(ct) = self.crosstalk_model() else {
            return p.to_vec();
        };
        let mut q = vec![0.0; p.len()];
        for arr in self.phase_arrays() {
            let local: Vec<f64> = arr.iter().map(|&i| p[i]).collect();
            for (&i, v) in arr.iter().zip(ct.apply(&local)) {
                q[i] = v;
            }
        }
        q
    }

    fn pull_back(&self, grad_effective: Vec<f64>) -> Vec<f64> {
        let Some(ct) = self.crosstalk_model() else {
            return grad_effective;
        };
        let mut g = vec![0.0; grad_effective.len()];
        for arr in self.phase_arrays() {
            let local: Vec<f64> = arr.iter().map(|&i| grad_effective[i]).collect();
            for (&i, v) in arr.iter().zip(ct.apply_transpose(&local)) {
                g[i] = v;
            }
        }
        g
    }
}

impl PhaseArrays for MplcDevice {
    fn phase_arrays(&self) -> Vec<Vec<usize>> {
        let n = self.n_modes;
        (0..self.n_arrays())
            .map(|k| (k * n..(k + 1) * n).collect())
            .collect()
    }

    fn crosstalk_model(&self) -> Option<&CrosstalkModel> {
        self.crosstalk.as_ref()
    }
}

impl PhaseArrays for ClementsDevice {
    /// Per layer, the `θ` shifters form one array and the `φ` shifters
    /// another; the output phases form the last array.
    fn phase_arrays(&self) -> Vec<Vec<usize>> {
        let offs = self.layer_offsets();
        let mut arrays = Vec::with_capacity(2 * self.n_layers + 1);
        for (layer, &off) in offs.iter().enumerate().take(self.n_layers) {
            let k = self.mzis_in_layer(layer);
            if k == 0 {
                continue;
            }
            arrays.push((0..k).map(|i| off + 2 * i).collect());
            arrays.push((0..k).map(|i| off + 2 * i + 1).collect());
        }
        let out = offs[self.n_layers];
        arrays.push((out..out + self.n_modes).collect());
        arrays
    }

    fn crosstalk_model(&self) -> Option<&CrosstalkModel> {
        self.crosstalk.as_ref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mplc,
    Clements,
}

/// Everything needed to build a device except its random mixers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub architecture: Architecture,
    pub n_modes: usize,
    pub n_layers: usize,
    /// Ignored for Clements meshes, which always carry output phases.
    pub include_output_phases: bool,
    pub crosstalk: Option<CrosstalkModel>,
}

impl DeviceSpec {
    /// Builds the device; MPLC mixers are drawn from `mixers`.
    pub fn build(&self, mixers: RngStream) -> Result<Device> {
        match self.architecture {
            Architecture::Mplc => random_mplc(
                self.n_modes,
                self.n_layers,
                self.include_output_phases,
                self.crosstalk.clone(),
                mixers,
            ),
            Architecture::Clements => {
                Ok(ClementsDevice::new(self.n_modes, self.n_layers, self.crosstalk.clone())?.into())
            }
        }
    }
}

pub const DEVICE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrosstalkFile {
    kernel: Vec<(i64, f64)>,
}

/// On-disk form of a [`Device`]. Mixer entries are `[re, im]` pairs in
/// row-major order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceFile {
    schema_version: u32,
    kind: Architecture,
    n_modes: usize,
    n_layers: usize,
    include_output_phases: bool,
    crosstalk: Option<CrosstalkFile>,
    mixers: Vec<Vec<[f64; 2]>>,
    rng: Option<RngStream>,
}

impl DeviceFile {
    fn from_device(dev: &Device) -> Self {
        let crosstalk = dev.crosstalk().map(|c| CrosstalkFile {
            kernel: c.kernel().to_vec(),
        });
        match dev {
            Device::Mplc(d) => Self {
                schema_version: DEVICE_SCHEMA_VERSION,
                kind: Architecture::Mplc,
                n_modes: d.n_modes(),
                n_layers: d.n_layers(),
                include_output_phases: d.include_output_phases(),
                crosstalk,
                mixers: d
                    .mixers()
                    .iter()
                    .map(|a| a.as_slice().iter().map(|z| [z.re, z.im]).collect())
                    .collect(),
                rng: d.mixer_stream(),
            },
            Device::Clements(d) => Self {
                schema_version: DEVICE_SCHEMA_VERSION,
                kind: Architecture::Clements,
                n_modes: d.n_modes(),
                n_layers: d.n_layers(),
                include_output_phases: true,
                crosstalk,
                mixers: Vec::new(),
                rng: None,
            },
        }
    }

    fn into_device(self) -> Result<Device> {
        if self.schema_version != DEVICE_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported device schema_version {}",
                self.schema_version
            )));
        }
        let crosstalk = self.crosstalk.map(|c| CrosstalkModel::new(c.kernel)).transpose()?;
        match self.kind {
            Architecture::Mplc => {
                if self.mixers.len() != self.n_layers {
                    return Err(Error::InvalidDimension(format!(
                        "n_layers = {} but {} mixers stored",
                        self.n_layers,
                        self.mixers.len()
                    )));
                }
                let n = self.n_modes;
                let mixers = self
                    .mixers
                    .into_iter()
                    .map(|entries| {
                        let data = entries.iter().map(|&[re, im]| Complex64::new(re, im)).collect();
                        UnitaryMatrix::new(ComplexMatrix::new(n, n, data)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut dev = MplcDevice::new(mixers, self.include_output_phases, crosstalk)?;
                dev.mixer_stream = self.rng;
                Ok(Device::Mplc(dev))
            }
            Architecture::Clements => {
                if !self.include_output_phases {
                    return Err(Error::InvalidArgument(
                        "Clements mesh always carries output phases".into(),
                    ));
                }
                Ok(Device::Clements(ClementsDevice::new(
                    self.n_modes,
                    self.n_layers,
                    crosstalk,
                )?))
            }
        }
    }
}

/// Haar-random MPLC device whose mixers come from `stream`.
pub fn random_mplc(
    n_modes: usize,
    n_layers: usize,
    include_output_phases: bool,
    crosstalk: Option<CrosstalkModel>,
    stream: RngStream,
) -> Result<Device> {
    Ok(MplcDevice::random(n_modes, n_layers, include_output_phases, crosstalk, stream)?.into())
}

/// Test helper that skips the mixer distinctness check.
#[cfg(test)]
pub(crate) fn mplc_with_mixers_unchecked(mixers: Vec<UnitaryMatrix>, out: bool) -> MplcDevice {
    MplcDevice {
        n_modes: mixers[0].dim(),
        mixers,
        include_output_phases: out,
        crosstalk: None,
        mixer_stream: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{haar_random_unitary, matmul};
    use std::f64::consts::FRAC_1_SQRT_2;
    use rand::Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_params(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, 99).rng();
        (0..len).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect()
    }

    fn diag_phase(ps: &[f64]) -> ComplexMatrix {
        ComplexMatrix::from_diagonal(&ps.iter().map(|&t| Complex64::from_polar(1.0, t)).collect::<Vec<_>>())
    }

    // Oracle: the three factor matrices multiplied out explicitly.
    fn mzi_oracle(theta: f64, phi: f64) -> ComplexMatrix {
        let s = FRAC_1_SQRT_2;
        let bs = ComplexMatrix::from_rows(&[vec![c(s, 0.), c(0., s)], vec![c(0., s), c(s, 0.)]]).unwrap();
        let pt = diag_phase(&[theta, 0.0]);
        let pp = diag_phase(&[phi, 0.0]);
        matmul(&bs, &matmul(&pt, &matmul(&bs, &pp).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn mzi_matches_factor_product() {
        let mut rng = RngStream::new(5, 5).rng();
        for _ in 0..20 {
            let (t, p) = (rng.random::<f64>() * 7.0, rng.random::<f64>() * 7.0);
            assert!(mzi_transfer(t, p).max_abs_diff(&mzi_oracle(t, p)) < 1e-15);
            assert!(mzi_transfer(t, p).unitarity_defect() < 1e-14);
            let m = mzi_transfer(t, p);
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            assert!((det.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn mzi_cross_and_bar_states() {
        let cross = mzi_transfer(0.0, 0.0);
        let expected = ComplexMatrix::from_rows(&[vec![c(0., 0.), c(0., 1.)], vec![c(0., 1.), c(0., 0.)]])
            .unwrap();
        assert!(cross.max_abs_diff(&expected) < 1e-15);
        assert!(cross.max_abs_diff(&mzi_oracle(0.0, 0.0)) < 1e-15);
        let bar = mzi_transfer(std::f64::consts::PI, 0.0);
        assert!(bar[(0, 1)].norm() < 1e-14);
        assert!(bar[(1, 0)].norm() < 1e-14);
    }

    #[test]
    fn mzi_derivatives_match_finite_differences() {
        let (t, p) = (0.7, -1.9);
        let h = 1e-6;
        let (dt, dp) = mzi_derivatives(t, p);
        let fd_t: Vec<Complex64> = mzi_entries(t + h, p)
            .iter()
            .zip(mzi_entries(t - h, p))
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let fd_p: Vec<Complex64> = mzi_entries(t, p + h)
            .iter()
            .zip(mzi_entries(t, p - h))
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        for k in 0..4 {
            assert!((dt[k] - fd_t[k]).norm() < 1e-9);
            assert!((dp[k] - fd_p[k]).norm() < 1e-9);
        }
    }

    #[test]
    fn mplc_identity_mixers_zero_phases() {
        let dev = mplc_with_mixers_unchecked(vec![UnitaryMatrix::identity(2); 2], true);
        let x = dev.forward(&[0.0; 6]).unwrap();
        assert!(x.max_abs_diff(&ComplexMatrix::identity(2)) < 1e-15);
    }

    #[test]
    fn mplc_zero_phases_is_mixer_product() {
        let dev = MplcDevice::random(4, 3, true, None, RngStream::new(1, 2)).unwrap();
        let x = dev.forward(&vec![0.0; dev.param_count()]).unwrap();
        let a = dev.mixers();
        let prod = matmul(&a[2], &matmul(&a[1], &a[0]).unwrap()).unwrap();
        assert!(x.max_abs_diff(&prod) < 1e-14);
    }

    // Oracle: build every factor as a full matrix and multiply in sequence.
    fn mplc_naive(dev: &MplcDevice, p: &[f64]) -> ComplexMatrix {
        let n = dev.n_modes();
        let mut x = ComplexMatrix::identity(n);
        for (k, a) in dev.mixers().iter().enumerate() {
            x = matmul(&diag_phase(&p[k * n..(k + 1) * n]), &x).unwrap();
            x = matmul(a, &x).unwrap();
        }
        if dev.include_output_phases() {
            let k = dev.n_layers();
            x = matmul(&diag_phase(&p[k * n..(k + 1) * n]), &x).unwrap();
        }
        x
    }

    #[test]
    fn mplc_matches_naive_product() {
        for out in [true, false] {
            let dev = MplcDevice::random(4, 5, out, None, RngStream::new(8, 1)).unwrap();
            let p = random_params(dev.param_count(), 3);
            let x = dev.forward(&p).unwrap();
            assert!(x.max_abs_diff(&mplc_naive(&dev, &p)) < 1e-12);
            assert!(x.unitarity_defect() < 1e-10);
        }
    }

    // Oracle: each layer as a full N×N block-diagonal matrix.
    fn clements_naive(dev: &ClementsDevice, p: &[f64]) -> ComplexMatrix {
        let n = dev.n_modes();
        let mut x = ComplexMatrix::identity(n);
        let mut idx = 0;
        for layer in 0..dev.n_layers() {
            let mut t = ComplexMatrix::identity(n);
            let start = layer % 2;
            let mut a = start;
            while a + 1 < n && (layer % 2 == 0 || a + 2 < n) {
                let m = mzi_oracle(p[idx], p[idx + 1]);
                idx += 2;
                t[(a, a)] = m[(0, 0)];
                t[(a, a + 1)] = m[(0, 1)];
                t[(a + 1, a)] = m[(1, 0)];
                t[(a + 1, a + 1)] = m[(1, 1)];
                a += 2;
            }
            x = matmul(&t, &x).unwrap();
        }
        matmul(&diag_phase(&p[idx..]), &x).unwrap()
    }

    #[test]
    fn clements_matches_naive_product() {
        let dev = ClementsDevice::new(8, 8, None).unwrap();
        let p = random_params(dev.param_count(), 4);
        let x = dev.forward(&p).unwrap();
        assert!(x.max_abs_diff(&clements_naive(&dev, &p)) < 1e-12);
        assert!(x.unitarity_defect() < 1e-10);
    }

    #[test]
    fn clements_single_bar_mzi_is_diagonal() {
        let dev = ClementsDevice::new(2, 1, None).unwrap();
        let x = dev.forward(&[std::f64::consts::PI, 0.0, 0.0, 0.0]).unwrap();
        assert!(x[(0, 1)].norm() < 1e-14 && x[(1, 0)].norm() < 1e-14);
    }

    #[test]
    fn clements_all_zero_is_unitary() {
        let dev = ClementsDevice::new(6, 7, None).unwrap();
        let x = dev.forward(&vec![0.0; dev.param_count()]).unwrap();
        assert!(x.unitarity_defect() < 1e-10);
    }

    #[test]
    fn clements_rejects_odd_modes() {
        assert!(matches!(
            ClementsDevice::new(7, 7, None),
            Err(Error::UnsupportedDimension(_))
        ));
    }

    #[test]
    fn param_and_dof_counts() {
        let d = MplcDevice::random(8, 9, true, None, RngStream::new(0, 0)).unwrap();
        assert_eq!((d.dof_count(), d.param_count()), (71, 80));
        let d = MplcDevice::random(8, 8, true, None, RngStream::new(0, 0)).unwrap();
        assert_eq!(d.dof_count(), 64);
        let d = MplcDevice::random(8, 9, false, None, RngStream::new(0, 0)).unwrap();
        assert_eq!(d.param_count(), 72);
        let c = ClementsDevice::new(8, 8, None).unwrap();
        assert_eq!(c.param_count(), 4 * 8 + 4 * 6 + 8);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let d = MplcDevice::random(4, 2, true, None, RngStream::new(0, 0)).unwrap();
        assert!(matches!(d.forward(&[0.0; 3]), Err(Error::InvalidParameter(_))));
        let c = ClementsDevice::new(4, 2, None).unwrap();
        assert!(matches!(c.forward(&[0.0; 3]), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn identical_mixers_are_rejected() {
        let a = haar_random_unitary(3, RngStream::new(1, 1)).unwrap();
        assert!(MplcDevice::new(vec![a.clone(), a], true, None).is_err());
    }

    #[test]
    fn crosstalk_examples() {
        let ct = CrosstalkModel::default();
        assert_eq!(ct.apply(&[0., 0., 1., 0., 0.]), vec![0.1, 0.5, 1.0, 0.5, 0.1]);
        assert_eq!(ct.apply(&[0.0; 5]), vec![0.0; 5]);
        assert_eq!(ct.apply(&[1., 0., 0., 0., 0.]), vec![1.0, 0.5, 0.1, 0.0, 0.0]);
        let arrays = apply_crosstalk(&[vec![0., 1.], vec![1., 0., 0.]], &ct);
        assert_eq!(arrays, vec![vec![0.5, 1.0], vec![1.0, 0.5, 0.1]]);
    }

    #[test]
    fn crosstalk_transpose_matches_matrix() {
        let ct = CrosstalkModel::new(vec![(-1, 0.3), (0, 1.0), (2, -0.2)]).unwrap();
        let m = ct.matrix(6);
        let g = [0.1, -0.4, 2.0, 0.5, 0.0, 1.5];
        let fast = ct.apply_transpose(&g);
        for j in 0..6 {
            let slow: f64 = (0..6).map(|i| m[(i, j)] * g[i]).sum();
            assert!((fast[j] - slow).abs() < 1e-15);
        }
        let forward = ct.apply(&g);
        for i in 0..6 {
            let slow: f64 = (0..6).map(|j| m[(i, j)] * g[j]).sum();
            assert!((forward[i] - slow).abs() < 1e-15);
        }
    }

    #[test]
    fn crosstalk_validation() {
        assert!(CrosstalkModel::new(vec![(0, 0.9)]).is_err());
        assert!(CrosstalkModel::new(vec![(1, 0.5)]).is_err());
        assert!(CrosstalkModel::new(vec![(0, 1.0), (0, 1.0)]).is_err());
        // 1 + 1·shift is singular on two shifters? det [[1,1],[0,1]] = 1, fine;
        // [[1,1],[1,1]] is singular.
        let sym = CrosstalkModel::new(vec![(-1, 1.0), (0, 1.0), (1, 1.0)]).unwrap();
        assert!(sym.check_invertible(2).is_err());
    }

    #[test]
    fn default_kernel_invertible_for_all_sizes() {
        let ct = CrosstalkModel::default();
        for n in 2..=64 {
            ct.check_invertible(n).unwrap();
        }
    }

    #[test]
    fn uniform_shift_of_first_array_is_global_phase() {
        let dev = MplcDevice::random(5, 6, true, None, RngStream::new(2, 2)).unwrap();
        let p = random_params(dev.param_count(), 8);
        let mut q = p.clone();
        q[..5].iter_mut().for_each(|t| *t += 0.37);
        let x0 = dev.forward(&p).unwrap();
        let x1 = dev.forward(&q).unwrap();
        let tr = matmul(&x1, &x0.adjoint()).unwrap().trace();
        assert!((tr.norm() - 5.0).abs() < 1e-8);
        assert!((tr.arg() - 0.37).abs() < 1e-8);
    }

    #[test]
    fn crosstalk_forward_is_unitary() {
        let dev = MplcDevice::random(6, 7, true, Some(CrosstalkModel::default()), RngStream::new(1, 1)).unwrap();
        let x = dev.forward(&random_params(dev.param_count(), 1)).unwrap();
        assert!(x.unitarity_defect() < 1e-10);
        let c = ClementsDevice::new(6, 6, Some(CrosstalkModel::default())).unwrap();
        let x = c.forward(&random_params(c.param_count(), 1)).unwrap();
        assert!(x.unitarity_defect() < 1e-10);
    }

    #[test]
    fn device_json_round_trip_is_bit_exact() {
        let dev: Device =
            MplcDevice::random(4, 5, false, Some(CrosstalkModel::default()), RngStream::new(3, 4))
                .unwrap()
                .into();
        let json = dev.to_json().unwrap();
        let back = Device::from_json(&json).unwrap();
        let (Device::Mplc(a), Device::Mplc(b)) = (&dev, &back) else {
            panic!("kind changed")
        };
        for (x, y) in a.mixers().iter().zip(b.mixers()) {
            assert!(x.as_slice() == y.as_slice());
        }
        assert_eq!(a.include_output_phases(), b.include_output_phases());
        assert_eq!(a.crosstalk(), b.crosstalk());
        assert_eq!(a.mixer_stream(), b.mixer_stream());
        assert_eq!(back.to_json().unwrap(), json);

        let cl: Device = ClementsDevice::new(4, 4, None).unwrap().into();
        let back = Device::from_json(&cl.to_json().unwrap()).unwrap();
        assert_eq!(back.param_count(), cl.param_count());
    }

    #[test]
    fn device_json_rejects_bad_schema() {
        let dev: Device = MplcDevice::random(2, 2, true, None, RngStream::new(0, 0)).unwrap().into();
        let json = dev.to_json().unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(Device::from_json(&json).is_err());
    }
}
