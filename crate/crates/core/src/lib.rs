//! Noise-corrected multi-task scalar-on-image regression.
//!
//! Images are represented by orthonormal 2-D wavelet coefficients. Each task
//! is a linear model in that basis, fitted jointly under grouped penalties
//! with the wavelet-domain noise covariance subtracted from the Gram matrix.
//!
//! The main entry points are [`build_design`], [`corrected_moments`],
//! [`cross_validate`] and the solvers [`spg_glasso`], [`spg_gbridge`] and
//! [`spg_lasso`]. [`sim`] reproduces the simulation protocol and [`eval`]
//! scores fits.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod moments;
pub mod noise_cov;
pub mod penalty;
pub mod rng;
pub mod sim;
pub mod solver;
pub mod wavelet;

pub use dataset::{build_design, load_dataset, predict, save_dataset, CoefficientSet, DesignMatrices, MultiTaskDataset, TaskData};
pub use error::{Error, Result};
pub use eval::{coefficient_bias, pmse, reconstruct_beta, support_auc, MetricsRow};
pub use moments::{corrected_moments, loss_gradient, loss_value, CorrectedMoments, CurvatureEstimate, TheoryDiagnostics};
pub use noise_cov::{estimate_direct, estimate_replicates, load_covariance, save_covariance, CovOperator, NoiseCovariance};
pub use penalty::{PenaltyKind, PenaltySpec};
pub use sim::{run_scenario, Method, ScenarioConfig};
pub use solver::{cross_validate, fit, fit_uncorrected, spg_gbridge, spg_glasso, spg_lasso, FitResult, SolverConfig, StepRule};
pub use wavelet::{dwt2, idwt2, ImageGrid, WaveletBasisSpec, WaveletFamily};
