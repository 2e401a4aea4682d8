//! Joint sender noise over `(τ, y_m)` with a learnable cross-covariance.
//!
//! For a single accuracy `α` the joint covariance is
//! `Σ = [[1/α, cᵀ], [c, αM·I]]`, positive definite iff `‖c‖² < M`. When the
//! interval and mark schedules use different accuracies `α_c` and `α_d`, `c`
//! is read as a correlation vector and the effective cross-covariance is
//! `c·sqrt(α_d/α_c)`, which keeps the same feasibility region at every step.
//!
//! Sampling and densities use a closed-form factor that conditions `y_τ` on
//! the mark noise, so everything here is `O(M)` rather than `O(M³)`.

use crate::error::{Error, Result};
use crate::math::{log_softmax, logsumexp, softmax, Rng, SymmetricMatrix, LN_2PI};

/// Maps an unconstrained vector onto the open ball `‖c‖² < M`:
/// `c = sqrt(M)·raw / sqrt(1 + ‖raw‖²)`.
pub fn constrain_c(raw: &[f64]) -> Vec<f64> {
    let m = raw.len() as f64;
    let q = 1.0 / (1.0 + raw.iter().map(|x| x * x).sum::<f64>()).sqrt();
    raw.iter().map(|x| m.sqrt() * q * x).collect()
}

/// Vector-Jacobian product of [`constrain_c`].
pub fn constrain_c_backward(raw: &[f64], grad: &[f64]) -> Vec<f64> {
    let m = raw.len() as f64;
    let q = 1.0 / (1.0 + raw.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let dot: f64 = raw.iter().zip(grad).map(|(r, g)| r * g).sum();
    raw.iter()
        .zip(grad)
        .map(|(r, g)| m.sqrt() * (q * g - q * q * q * r * dot))
        .collect()
}

/// `sqrt(α_d / α_c)`, the factor turning a correlation vector into a covariance.
pub fn correlation_scale(alpha_cont: f64, alpha_disc: f64) -> f64 {
    (alpha_disc / alpha_cont).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointCovariance {
    alpha_cont: f64,
    alpha_disc: f64,
    c_eff: Vec<f64>,
}

impl JointCovariance {
    /// Covariance for step accuracies `α_c`, `α_d` and correlation vector `c`.
    pub fn new(alpha_cont: f64, alpha_disc: f64, c: &[f64]) -> Result<Self> {
        for a in [alpha_cont, alpha_disc] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::NonPositiveAccuracy(a));
            }
        }
        let m = c.len();
        if m == 0 {
            return Err(Error::InvalidArgument("need at least one mark".into()));
        }
        let norm_sq: f64 = c.iter().map(|x| x * x).sum();
        if !(norm_sq < m as f64) {
            return Err(Error::ConstraintViolated { norm_sq, num_marks: m });
        }
        let scale = correlation_scale(alpha_cont, alpha_disc);
        let cov = Self { alpha_cont, alpha_disc, c_eff: c.iter().map(|x| x * scale).collect() };
        if !(cov.schur() > 0.0) {
            return Err(Error::ConstraintViolated { norm_sq, num_marks: m });
        }
        Ok(cov)
    }

    /// Single-accuracy form `[[1/α, cᵀ], [c, αM·I]]`.
    pub fn single(alpha: f64, c: &[f64]) -> Result<Self> {
        Self::new(alpha, alpha, c)
    }

    pub fn num_marks(&self) -> usize {
        self.c_eff.len()
    }

    pub fn alpha_cont(&self) -> f64 {
        self.alpha_cont
    }

    pub fn alpha_disc(&self) -> f64 {
        self.alpha_disc
    }

    /// The cross-covariance block actually used.
    pub fn c_eff(&self) -> &[f64] {
        &self.c_eff
    }

    /// Mark-block variance `α_d·M`.
    pub fn mark_var(&self) -> f64 {
        self.alpha_disc * self.num_marks() as f64
    }

    /// Conditional variance of `y_τ` given the mark block: `1/α_c − ‖c‖²/(α_d M)`.
    pub fn schur(&self) -> f64 {
        let q: f64 = self.c_eff.iter().map(|x| x * x).sum();
        1.0 / self.alpha_cont - q / self.mark_var()
    }

    /// `ln det Σ = M·ln(α_d M) + ln(schur)`.
    pub fn log_det(&self) -> f64 {
        self.num_marks() as f64 * self.mark_var().ln() + self.schur().ln()
    }

    /// Dense `Σ` in `(τ, m₁, …, m_M)` order.
    pub fn matrix(&self) -> SymmetricMatrix {
        let m = self.num_marks();
        let mut s = SymmetricMatrix::zeros(m + 1);
        s.set(0, 0, 1.0 / self.alpha_cont);
        for (j, c) in self.c_eff.iter().enumerate() {
            s.set(j + 1, 0, *c);
            s.set(j + 1, j + 1, self.mark_var());
        }
        s
    }
}

/// `Σ = [[1/α, cᵀ], [c, αM·I]]`, rejecting `‖c‖² ≥ M`.
pub fn build_joint_cov(alpha: f64, num_marks: usize, c: &[f64]) -> Result<SymmetricMatrix> {
    if c.len() != num_marks {
        return Err(Error::DimensionMismatch { expected: num_marks, got: c.len() });
    }
    Ok(JointCovariance::single(alpha, c)?.matrix())
}

/// Sender draw from standard-normal noise: marks first, then the interval
/// conditioned on the mark noise. Returns `(y_τ, y_m)`.
pub fn joint_sender_from_noise(tau: f64, mark: usize, cov: &JointCovariance, z_m: &[f64], z_tau: f64) -> (f64, Vec<f64>) {
    let m = cov.num_marks();
    let (a, b) = (cov.alpha_disc, cov.mark_var());
    let sb = b.sqrt();
    let y_m: Vec<f64> = (0..m)
        .map(|j| {
            let mean = if j == mark { a * (m as f64 - 1.0) } else { -a };
            mean + sb * z_m[j]
        })
        .collect();
    let cz: f64 = cov.c_eff.iter().zip(z_m).map(|(c, z)| c * z).sum();
    let y_tau = tau + cz / sb + cov.schur().sqrt() * z_tau;
    (y_tau, y_m)
}

/// Draws `(y_τ, y_m) ~ N((τ, α_d(M·e_m − 1)), Σ)`. With `c = 0` the draws
/// coincide exactly with the independent mark sender followed by the
/// interval sender on the same generator.
pub fn joint_sender_sample(tau: f64, mark: usize, cov: &JointCovariance, rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
    let m = cov.num_marks();
    if mark >= m {
        return Err(Error::MarkOutOfRange { mark, num_marks: m });
    }
    let z_m = rng.normals(m);
    let z_tau = rng.normal();
    Ok(joint_sender_from_noise(tau, mark, cov, &z_m, z_tau))
}

/// Mahalanobis terms `‖r_k‖²/b + v_k²/s` and the residuals `v_k` for every
/// mixture component `k`, where `r_k = y_m − α_d(M·e_k − 1)` and
/// `v_k = y_τ − τ̂ − cᵀr_k / b`.
fn component_quads(y_tau: f64, y_m: &[f64], tau_hat: f64, cov: &JointCovariance) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (a, b, s) = (cov.alpha_disc, cov.mark_var(), cov.schur());
    let big = b; // α_d·M, the spike height of M·e_k
    let base: Vec<f64> = y_m.iter().map(|y| y + a).collect();
    let bb: f64 = base.iter().map(|x| x * x).sum();
    let cb: f64 = cov.c_eff.iter().zip(&base).map(|(c, x)| c * x).sum();
    let mut quads = Vec::with_capacity(y_m.len());
    let mut vs = Vec::with_capacity(y_m.len());
    for k in 0..y_m.len() {
        let r2 = bb - 2.0 * big * base[k] + big * big;
        let v = y_tau - tau_hat - (cb - big * cov.c_eff[k]) / b;
        quads.push(r2 / b + v * v / s);
        vs.push(v);
    }
    (quads, vs, base)
}

/// `ln p_R(y | τ̂, p_O) = ln Σ_k p_O(k) N(y; (τ̂, α_d(M·e_k − 1)), Σ)`, with `y`
/// in `(τ, m₁, …, m_M)` order.
pub fn joint_receiver_logpdf(y: &[f64], tau_hat: f64, probs: &[f64], cov: &JointCovariance) -> Result<f64> {
    let m = cov.num_marks();
    if y.len() != m + 1 {
        return Err(Error::DimensionMismatch { expected: m + 1, got: y.len() });
    }
    if probs.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: probs.len() });
    }
    let (quads, _, _) = component_quads(y[0], &y[1..], tau_hat, cov);
    let norm = -0.5 * ((m + 1) as f64 * LN_2PI + cov.log_det());
    let terms: Vec<f64> = quads.iter().zip(probs).map(|(q, p)| p.ln() - 0.5 * q).collect();
    Ok(norm + logsumexp(&terms))
}

/// Value and gradients of one single-sample KL estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct JointKlEval {
    pub value: f64,
    pub d_tau_hat: f64,
    pub d_logits: Vec<f64>,
    pub d_c: Vec<f64>,
}

/// One event's pre-drawn sender noise at a fixed step.
///
/// The estimate is `ln p_S(y) − ln p_R(y)` with `y` the reparameterized sender
/// draw. Normalizers cancel, leaving `−½‖z‖² − LSE_k(ln p_O(k) − ½ quad_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointKlTerm {
    pub tau: f64,
    pub mark: usize,
    pub alpha_cont: f64,
    pub alpha_disc: f64,
    /// `sqrt(α_d / α_c)`; multiplies the correlation vector.
    pub c_scale: f64,
    pub z_m: Vec<f64>,
    pub z_tau: f64,
}

impl JointKlTerm {
    pub fn new(tau: f64, mark: usize, alpha_cont: f64, alpha_disc: f64, z_m: Vec<f64>, z_tau: f64) -> Self {
        Self { tau, mark, alpha_cont, alpha_disc, c_scale: correlation_scale(alpha_cont, alpha_disc), z_m, z_tau }
    }

    /// Draws the mark noise, then the interval noise.
    pub fn draw(tau: f64, mark: usize, alpha_cont: f64, alpha_disc: f64, num_marks: usize, rng: &mut Rng) -> Self {
        let z_m = rng.normals(num_marks);
        let z_tau = rng.normal();
        Self::new(tau, mark, alpha_cont, alpha_disc, z_m, z_tau)
    }

    fn covariance(&self, c_eff: &[f64]) -> JointCovariance {
        JointCovariance { alpha_cont: self.alpha_cont, alpha_disc: self.alpha_disc, c_eff: c_eff.to_vec() }
    }

    /// Evaluates the estimate at `(τ̂, logits, c_eff)` with gradients with
    /// respect to all three. `c_eff` is the already-scaled cross-covariance.
    pub fn evaluate(&self, tau_hat: f64, logits: &[f64], c_eff: &[f64]) -> JointKlEval {
        let cov = self.covariance(c_eff);
        let (y_tau, y_m) = joint_sender_from_noise(self.tau, self.mark, &cov, &self.z_m, self.z_tau);
        let (quads, vs, base) = component_quads(y_tau, &y_m, tau_hat, &cov);
        let (b, s) = (cov.mark_var(), cov.schur());

        let log_p = log_softmax(logits);
        let ell: Vec<f64> = log_p.iter().zip(&quads).map(|(lp, q)| lp - 0.5 * q).collect();
        let lse = logsumexp(&ell);
        let w: Vec<f64> = ell.iter().map(|l| (l - lse).exp()).collect();
        let z_sq: f64 = self.z_m.iter().map(|z| z * z).sum::<f64>() + self.z_tau * self.z_tau;
        let value = -0.5 * z_sq - lse;

        let d_logits: Vec<f64> = softmax(logits).iter().zip(&w).map(|(p, wk)| p - wk).collect();
        let s1: f64 = w.iter().zip(&vs).map(|(wk, v)| wk * v).sum();
        let s2: f64 = w.iter().zip(&vs).map(|(wk, v)| wk * v * v).sum();
        let d_tau_hat = -s1 / s;

        let (sb, ss) = (b.sqrt(), s.sqrt());
        let d_c = (0..c_eff.len())
            .map(|j| {
                let dy_dc = self.z_m[j] / sb - self.z_tau * c_eff[j] / (b * ss);
                let wvr = s1 * base[j] - b * w[j] * vs[j];
                s1 / s * dy_dc - wvr / (s * b) + s2 * c_eff[j] / (s * s * b)
            })
            .collect();
        JointKlEval { value, d_tau_hat, d_logits, d_c }
    }
}

/// One bin of [`c_histogram`]: `[lo, hi)` and its count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Counts the entries of `c` in `bins` equal-width bins over `[−√M, √M]`,
/// the range every feasible entry lies in. With an odd bin count the middle
/// bin is centred on zero.
pub fn c_histogram(c: &[f64], bins: usize) -> Result<Vec<Bin>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let r = (c.len() as f64).sqrt();
    let width = 2.0 * r / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin { lo: -r + i as f64 * width, hi: -r + (i + 1) as f64 * width, count: 0 })
        .collect();
    for &x in c {
        let i = (((x + r) / width).floor().max(0.0) as usize).min(bins - 1);
        out[i].count += 1;
    }
    Ok(out)
}

/// Index of the bin containing zero.
pub fn zero_bin(bins: usize) -> usize {
    bins / 2
}
