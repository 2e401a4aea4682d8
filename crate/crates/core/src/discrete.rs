//! Bayesian-flow machinery for marks: categorical input distribution on the
//! simplex, the Gaussian sender, the multiplicative update, the flow
//! distribution and the quadratic accuracy schedule `β(t) = β₁t²`.

use crate::error::{Error, Result};
use crate::math::{log_softmax, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalParams {
    probs: Vec<f64>,
}

impl CategoricalParams {
    pub fn uniform(num_marks: usize) -> Self {
        Self { probs: vec![1.0 / num_marks as f64; num_marks] }
    }

    /// Wraps `probs` after checking nonnegativity and unit sum (1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self { probs })
    }

    /// `softmax(logits)`.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self { probs: log_softmax(logits).into_iter().map(f64::exp).collect() }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteSchedule {
    pub beta1: f64,
}

impl DiscreteSchedule {
    pub fn new(beta1: f64) -> Result<Self> {
        if !(beta1 > 0.0 && beta1.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta1 must be positive, got {beta1}")));
        }
        Ok(Self { beta1 })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta1 * t * t
    }
}

/// Mean of the mark sender: `α(M·e_m − 1)`.
pub fn sender_mean(mark: usize, alpha: f64, num_marks: usize) -> Vec<f64> {
    let mut mean = vec![-alpha; num_marks];
    mean[mark] = alpha * (num_marks as f64 - 1.0);
    mean
}

/// Draw from `N(α(M·e_m − 1), αM·I)`.
pub fn sender_sample_disc(mark: usize, alpha: f64, num_marks: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if mark >= num_marks {
        return Err(Error::MarkOutOfRange { mark, num_marks });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::NonPositiveAccuracy(alpha));
    }
    let sd = (alpha * num_marks as f64).sqrt();
    let mean = sender_mean(mark, alpha, num_marks);
    Ok(mean.into_iter().map(|m| m + sd * rng.normal()).collect())
}

/// `θ' ∝ exp(y) ⊙ θ`, evaluated in log space.
pub fn bayes_update_disc(p: &CategoricalParams, y: &[f64]) -> Result<CategoricalParams> {
    if y.len() != p.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: y.len() });
    }
    let logits: Vec<f64> = p.probs.iter().zip(y).map(|(q, yi)| q.ln() + yi).collect();
    Ok(CategoricalParams::from_logits(&logits))
}

/// `θ = softmax(y)`, `y ~ N(β(t)(M·e_m − 1), β(t)M·I)`.
pub fn flow_sample_disc(
    mark: usize,
    t: f64,
    sched: &DiscreteSchedule,
    num_marks: usize,
    rng: &mut Rng,
) -> Result<CategoricalParams> {
    let noise = rng.normals(num_marks);
    flow_from_noise(mark, t, sched, num_marks, &noise)
}

/// [`flow_sample_disc`] with the standard-normal draws supplied by the caller.
pub fn flow_from_noise(
    mark: usize,
    t: f64,
    sched: &DiscreteSchedule,
    num_marks: usize,
    noise: &[f64],
) -> Result<CategoricalParams> {
    if mark >= num_marks {
        return Err(Error::MarkOutOfRange { mark, num_marks });
    }
    let beta = sched.beta(t);
    let sd = (beta * num_marks as f64).sqrt();
    let y: Vec<f64> = sender_mean(mark, beta, num_marks)
        .into_iter()
        .zip(noise)
        .map(|(m, z)| m + sd * z)
        .collect();
    Ok(CategoricalParams::from_logits(&y))
}

/// `β(i/K) − β((i−1)/K) = β₁(2i − 1)/K²`.
pub fn alpha_step_disc(i: usize, k: usize, beta1: f64) -> Result<f64> {
    if i == 0 || i > k {
        return Err(Error::IndexOutOfRange { index: i, max: k });
    }
    Ok(beta1 * (2 * i - 1) as f64 / (k * k) as f64)
}
