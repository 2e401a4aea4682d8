//! Bayesian-flow machinery for the (normalized) inter-event interval: the
//! Gaussian input distribution, its sender, the conjugate update, the flow
//! distribution and the geometric accuracy schedule.

use crate::error::{Error, Result};
use crate::math::Rng;

/// Gaussian input-distribution parameters: mean and precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousParams {
    pub mu: f64,
    pub rho: f64,
}

impl ContinuousParams {
    pub const PRIOR: Self = Self { mu: 0.0, rho: 1.0 };
}

impl Default for ContinuousParams {
    fn default() -> Self {
        Self::PRIOR
    }
}

/// How the flow distribution's variance is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowVariance {
    /// `γ(1 − γ)`, the conjugate-update marginal.
    Standard,
    /// `τ(1 − γ)`, clamped at zero for negative `τ`.
    Linear,
}

/// `γ(t) = 1 − σ₁^{2t}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousSchedule {
    pub sigma1: f64,
    pub flow_variance: FlowVariance,
}

impl ContinuousSchedule {
    pub fn new(sigma1: f64) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma1 < 1.0) {
            return Err(Error::InvalidArgument(format!("sigma1 must lie in (0, 1), got {sigma1}")));
        }
        Ok(Self { sigma1, flow_variance: FlowVariance::Standard })
    }

    pub fn gamma(&self, t: f64) -> f64 {
        1.0 - self.sigma1.powf(2.0 * t)
    }

    /// Precision of the input distribution at time `t`: `1 / (1 − γ(t))`.
    pub fn rho(&self, t: f64) -> f64 {
        self.sigma1.powf(-2.0 * t)
    }
}

pub fn sender_sample_cont(tau: f64, alpha: f64, rng: &mut Rng) -> Result<f64> {
    check_accuracy(alpha)?;
    Ok(tau + (1.0 / alpha).sqrt() * rng.normal())
}

/// Conjugate update: `ρ' = ρ + α`, `μ' = (μρ + yα) / ρ'`.
pub fn bayes_update_cont(p: ContinuousParams, y: f64, alpha: f64) -> Result<ContinuousParams> {
    check_accuracy(alpha)?;
    let rho = p.rho + alpha;
    Ok(ContinuousParams { mu: (p.mu * p.rho + y * alpha) / rho, rho })
}

/// Draws `θ ~ p_F(· | τ; t)`: `μ ~ N(γτ, γ(1 − γ))`, `ρ = 1 / (1 − γ)`.
pub fn flow_sample_cont(tau: f64, t: f64, sched: &ContinuousSchedule, rng: &mut Rng) -> ContinuousParams {
    flow_from_noise(tau, t, sched, rng.normal())
}

/// [`flow_sample_cont`] with the standard-normal draw supplied by the caller.
pub fn flow_from_noise(tau: f64, t: f64, sched: &ContinuousSchedule, eps: f64) -> ContinuousParams {
    let gamma = sched.gamma(t);
    let var = match sched.flow_variance {
        FlowVariance::Standard => gamma * (1.0 - gamma),
        FlowVariance::Linear => (tau * (1.0 - gamma)).max(0.0),
    };
    ContinuousParams { mu: gamma * tau + var.sqrt() * eps, rho: sched.rho(t) }
}

/// Step-`i` accuracy of the `K`-step sampler: `σ₁^{−2i/K}(1 − σ₁^{2/K})`.
pub fn alpha_step_cont(i: usize, k: usize, sigma1: f64) -> Result<f64> {
    if i == 0 || i > k {
        return Err(Error::IndexOutOfRange { index: i, max: k });
    }
    let (i, k) = (i as f64, k as f64);
    Ok(sigma1.powf(-2.0 * i / k) * (1.0 - sigma1.powf(2.0 / k)))
}

fn check_accuracy(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveAccuracy(alpha))
    }
}
