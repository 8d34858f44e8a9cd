//! Simulation and iterative configuration of programmable photonic unitary
//! converters.
//!
//! The crate models multi-plane light conversion (MPLC) devices and Clements
//! MZI meshes as parameterized transfer matrices, measures how far a realized
//! unitary is from a target, and drives the phases toward the target with
//! L-BFGS using either exact or finite-difference gradients.

pub mod device;
pub mod distances;
pub mod error;
pub mod experiments;
pub mod gradients;
pub mod linalg;
pub mod optimizer;

pub use device::{
    apply_crosstalk, mzi_transfer, Architecture, ClementsDevice, CrosstalkModel, Device, DeviceSpec,
    MplcDevice,
};
pub use distances::{
    expected_loss_estimate, frobenius_loss, phase_insensitive_loss, spectral_loss, LossKind,
};
pub use error::{Error, Result};
pub use experiments::{run_trials, summarize, QuantileSummary, RunSummary, TrialConfig, TrialOutcome};
pub use gradients::{analytic_gradient, approx_gradient, gradient_check, GradientMode, Objective};
pub use linalg::{eigenangles, haar_random_unitary, matmul, ComplexMatrix, RngStream, UnitaryMatrix};
pub use optimizer::{minimize, Evaluation, LbfgsConfig, OptimResult, Termination};
