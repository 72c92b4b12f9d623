//! Diffusion schedule: per-step noise levels, the closed-form forward
//! corruption kernel, posterior statistics of the reverse chain, and the
//! noise-prediction training loss.
//!
//! Steps are 1-based: `t` ranges over `1..=T`, and `alpha_bar(0)` is defined
//! as 1 so the step-1 posterior is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance-preserving schedule with linearly interpolated beta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl Schedule {
    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.check(t).expect("step out of range");
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.check(t).expect("step out of range");
        self.alpha[t - 1]
    }

    /// Cumulative product of alpha up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        assert!(t <= self.steps(), "step {t} out of range");
        self.alpha_bar[t - 1]
    }

    /// Reverse-chain posterior variance at `t`; zero at `t == 1`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.check(t).expect("step out of range");
        self.posterior_var[t - 1]
    }

    /// Rebuild from explicit arrays (checkpoint loading); validates lengths.
    pub fn from_arrays(
        beta: Vec<f64>,
        alpha: Vec<f64>,
        alpha_bar: Vec<f64>,
        posterior_var: Vec<f64>,
    ) -> Result<Self> {
        let t = beta.len();
        if t == 0 || alpha.len() != t || alpha_bar.len() != t || posterior_var.len() != t {
            return Err(Error::InvalidArgument(
                "schedule arrays must be non-empty and equal-length".into(),
            ));
        }
        Ok(Schedule { beta, alpha, alpha_bar, posterior_var })
    }

    pub fn arrays(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        (&self.beta, &self.alpha, &self.alpha_bar, &self.posterior_var)
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {} out of range 1..={}",
                t,
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Build a linear-beta schedule of `t_total` steps.
pub fn build_schedule(t_total: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if t_total == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let mut beta = Vec::with_capacity(t_total);
    for i in 0..t_total {
        let frac = if t_total == 1 { 0.0 } else { i as f64 / (t_total - 1) as f64 };
        beta.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_total);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let mut posterior_var = Vec::with_capacity(t_total);
    for t in 1..=t_total {
        let abar_prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
        posterior_var.push((1.0 - abar_prev) * beta[t - 1] / (1.0 - alpha_bar[t - 1]));
    }
    Ok(Schedule { beta, alpha, alpha_bar, posterior_var })
}

/// Forward corruption at step `t`: `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &Schedule) -> Result<Tensor> {
    sched.check(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    let abar = sched.alpha_bar(t);
    let (sa, sn) = (abar.sqrt(), (1.0 - abar).sqrt());
    x0.scale(sa).add_scaled(eps, sn)
}

/// Reverse-chain mean and variance at step `t` given a noise estimate:
/// `mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`,
/// `var = posterior_var(t)`.
pub fn posterior_stats(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &Schedule,
) -> Result<(Tensor, f64)> {
    sched.check(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::shape(
            "posterior_stats",
            format!("x_t {:?} vs eps_hat {:?}", x_t.shape(), eps_hat.shape()),
        ));
    }
    let coeff = -sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mu = x_t
        .add_scaled(eps_hat, coeff)?
        .scale(1.0 / sched.alpha(t).sqrt());
    Ok((mu, sched.posterior_var(t)))
}

/// Mean squared error between the true and predicted noise.
pub fn diffusion_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    eps.mse(eps_hat)
}
