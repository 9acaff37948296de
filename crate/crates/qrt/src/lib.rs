//! Calibrated neural regression toolkit.
//!
//! Trains mixture-density networks whose predictive distributions are
//! recalibrated through differentiable PIT calibration maps inside the
//! training loop (and/or post hoc), scores them with proper scoring rules and
//! calibration metrics, and compares methods across datasets with
//! nonparametric statistics.
//!
//! Layering, bottom up:
//!
//! - [`tensor`], [`num`]: dense `f64` matrices and scalar numeric kernels.
//! - [`autodiff`], [`params`]: reverse-mode differentiation and Adam state.
//! - [`mdn`]: the MLP hypernetwork producing Gaussian mixtures.
//! - [`calib`]: PIT calibration maps (empirical, conformal, logistic-KDE,
//!   truncated, reflected) and recalibrated distributions.
//! - [`train`]: the unified minibatch procedure covering plain NLL training,
//!   entropy regularization, and in-loop recalibration, plus ablations,
//!   hyperparameter selection, and early stopping.
//! - [`metrics`]: NLL, PCE, CRPS, and predictive-SD scoring.
//! - [`stats`]: effect sizes, Friedman and Wilcoxon-Holm tests, ranks.
//! - [`data`]: table loading, deterministic splits, standardization,
//!   synthetic generators.
//! - [`report`]: the JSON result-record schema shared by the runner and the
//!   comparison harness.

pub mod autodiff;
pub mod calib;
pub mod data;
pub mod mdn;
pub mod metrics;
pub mod num;
pub mod params;
pub mod quad;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use tensor::Tensor;
