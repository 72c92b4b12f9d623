//! Diffusion-based augmentation for multivariate financial factor sequences.
//!
//! The crate trains a conditioned transformer denoiser on a source universe,
//! edits target-domain factor sequences by partial corruption and guided
//! deterministic denoising, and measures the downstream effect on
//! return-ratio forecasting with a metric and backtest harness.
//!
//! Layering, bottom up:
//!
//! - [`tensor`] / [`graph`] / [`nn`] — dense f64 tensors, reverse-mode
//!   autodiff, shared layer builders, optimizers, gradient checking
//! - [`schedule`] — noise schedule, forward kernel, posterior, training loss
//! - [`denoiser`] — conditioned transformer noise-prediction network
//! - [`predictor`] — MLP / transformer return-ratio regressors
//! - [`guidance`] — predictor and predictor-free sampling guidance
//! - [`engine`] — diffusion training loop, deterministic DDIM editing,
//!   loss-guided per-sample editing steps
//! - [`data`] / [`market`] — factor panels, windowing, normalization,
//!   synthetic market generation
//! - [`eval`] — IC / RankIC / weighted IC, Fréchet fidelity distance,
//!   top-K backtest
//! - [`persist`] — dataset cache and checkpoint files

pub mod data;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod eval;
pub mod graph;
pub mod guidance;
pub mod market;
pub mod nn;
pub mod persist;
pub mod predictor;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Variance stabilizer added before the layer-norm rsqrt.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Trading days per year used to annualize backtest statistics.
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;
