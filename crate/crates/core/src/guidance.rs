//! Sampling guidance toward supervised targets.
//!
//! Two mechanisms: predictor guidance subtracts the scaled input gradient of
//! a frozen regressor's squared error from the predicted noise, and
//! predictor-free guidance extrapolates between conditional and
//! unconditional noise predictions. The predictor is evaluated on the noisy
//! sample even though it was trained on clean data; that approximation is
//! inherent to the scheme.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditions, DenoiserModel, DropMask};
use crate::error::{Error, Result};
use crate::predictor::RegressorModel;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Predictor,
    PredictorFree,
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GuidanceMode::None => write!(f, "none"),
            GuidanceMode::Predictor => write!(f, "predictor"),
            GuidanceMode::PredictorFree => write!(f, "predictor_free"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Predictor guidance strength.
    pub omega: f64,
    /// Predictor-free guidance strength.
    pub omega_free: f64,
    /// Which conditionings the conditional denoiser call keeps.
    pub use_label: bool,
    pub use_industry: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::PredictorFree,
            omega: 1.0,
            omega_free: 3.0,
            use_label: true,
            use_industry: true,
        }
    }
}

impl GuidanceConfig {
    /// Run-level validation: predictor mode needs a predictor, and
    /// predictor-free strength must exceed 1.
    pub fn validate(&self, has_predictor: bool) -> Result<()> {
        if self.omega < 0.0 {
            return Err(Error::InvalidArgument("guidance omega must be >= 0".into()));
        }
        match self.mode {
            GuidanceMode::Predictor if !has_predictor => {
                Err(Error::InvalidArgument("predictor guidance requires a predictor model".into()))
            }
            GuidanceMode::PredictorFree if self.omega_free <= 1.0 => Err(Error::InvalidArgument(
                format!("predictor-free strength must exceed 1, got {}", self.omega_free),
            )),
            _ => Ok(()),
        }
    }
}

/// Predictor-guided noise:
/// `eps_bar = eps_hat - sqrt(1 - abar_t) * omega * grad_x (p(x_t) - y)^2`.
/// The predictor ignores the timestep.
pub fn predictor_guided_eps(
    eps_hat: &Tensor,
    x_t: &Tensor,
    y: f64,
    t: usize,
    sched: &Schedule,
    omega: f64,
    predictor: &RegressorModel,
) -> Result<Tensor> {
    if omega == 0.0 {
        return Ok(eps_hat.clone());
    }
    let grad = predictor.grad_x_sq_residual(x_t, y)?;
    let scale = (1.0 - sched.alpha_bar(t)).sqrt() * omega;
    eps_hat.add_scaled(&grad, -scale)
}

/// Predictor-free combination: `eps_uncond + omega_free * (eps_cond - eps_uncond)`.
pub fn cfg_eps(eps_cond: &Tensor, eps_uncond: &Tensor, omega_free: f64) -> Result<Tensor> {
    let diff = eps_cond.sub(eps_uncond)?;
    eps_uncond.add_scaled(&diff, omega_free)
}

/// Effective noise estimate for one sampler step, dispatching on mode:
/// plain single call, predictor-corrected unconditional call, or the
/// two-call predictor-free form.
pub fn eps_for_step(
    model: &DenoiserModel,
    x_t: &Tensor,
    t: usize,
    conds: Conditions,
    sched: &Schedule,
    cfg: &GuidanceConfig,
    predictor: Option<&RegressorModel>,
) -> Result<Tensor> {
    let kept = DropMask { label: !cfg.use_label, industry: !cfg.use_industry };
    match cfg.mode {
        GuidanceMode::None => model.denoise_eps(x_t, t, conds, kept),
        GuidanceMode::Predictor => {
            let base = model.denoise_eps(x_t, t, conds, DropMask::DROP_ALL)?;
            let y = conds.label.ok_or_else(|| {
                Error::InvalidArgument("predictor guidance needs a target label".into())
            })?;
            let p = predictor.ok_or_else(|| {
                Error::InvalidArgument("predictor guidance requires a predictor model".into())
            })?;
            predictor_guided_eps(&base, x_t, y, t, sched, cfg.omega, p)
        }
        GuidanceMode::PredictorFree => {
            let cond = model.denoise_eps(x_t, t, conds, kept)?;
            let uncond = model.denoise_eps(x_t, t, conds, DropMask::DROP_ALL)?;
            cfg_eps(&cond, &uncond, cfg.omega_free)
        }
    }
}
