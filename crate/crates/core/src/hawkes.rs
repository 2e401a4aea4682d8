//! Multivariate Hawkes process with exponential kernels, simulated by Ogata
//! thinning. The coupled variant stretches or shrinks every candidate
//! waiting time drawn after an event by a per-mark factor, which makes the
//! next interval depend on the current mark.

use crate::data::{EventSequence, MarkedEvent};
use crate::error::{Error, Result};
use crate::math::Rng;

/// Upper bound on events per simulated sequence.
pub const MAX_EVENTS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct HawkesSpec {
    pub base_rates: Vec<f64>,
    /// `excitation[m][j]`: jump in the intensity of mark `m` caused by an event of mark `j`.
    pub excitation: Vec<Vec<f64>>,
    pub decay: f64,
    pub horizon: f64,
    /// Waiting-time multiplier applied after an event of each mark; 1.0 = none.
    pub coupling_scales: Vec<f64>,
}

impl HawkesSpec {
    /// Homogeneous Poisson process with one mark.
    pub fn poisson(rate: f64, horizon: f64) -> Self {
        Self {
            base_rates: vec![rate],
            excitation: vec![vec![0.0]],
            decay: 1.0,
            horizon,
            coupling_scales: vec![1.0],
        }
    }

    pub fn num_marks(&self) -> usize {
        self.base_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_marks();
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if m == 0 {
            return bad("hawkes spec needs at least one mark".into());
        }
        if self.excitation.len() != m || self.excitation.iter().any(|r| r.len() != m) {
            return bad(format!("excitation must be {m}x{m}"));
        }
        if self.coupling_scales.len() != m {
            return bad(format!("coupling_scales must have {m} entries"));
        }
        if self.base_rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("base rates must be positive".into());
        }
        if self.excitation.iter().flatten().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("excitation entries must be nonnegative".into());
        }
        if !(self.decay.is_finite() && self.decay > 0.0) {
            return bad("decay must be positive".into());
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("horizon must be positive".into());
        }
        if self.coupling_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("coupling scales must be positive".into());
        }
        let radius = self.branching_radius();
        if radius >= 1.0 {
            return Err(Error::NonStationary(format!(
                "spectral radius of excitation/decay is {radius:.4} (must be < 1)"
            )));
        }
        Ok(())
    }

    /// Spectral radius of `excitation / decay`.
    pub fn branching_radius(&self) -> f64 {
        let m = self.num_marks();
        let a: Vec<f64> = self.excitation.iter().flatten().map(|x| x / self.decay).collect();
        spectral_radius(&a, m)
    }
}

/// Spectral radius of a nonnegative square matrix via Gelfand's formula
/// `ρ = lim ‖Aᵏ‖^{1/k}`, evaluated on repeated squares with log-scaling.
fn spectral_radius(a: &[f64], n: usize) -> f64 {
    let norm = |b: &[f64]| -> f64 {
        (0..n).map(|i| b[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
    };
    let mut b = a.to_vec();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    let mut estimate = norm(&b);
    for _ in 0..40 {
        let nb = norm(&b);
        if nb == 0.0 {
            return 0.0;
        }
        estimate = ((log_scale + nb.ln()) / power).exp();
        log_scale += nb.ln();
        b.iter_mut().for_each(|x| *x /= nb);
        let mut sq = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let bik = b[i * n + k];
                if bik != 0.0 {
                    for j in 0..n {
                        sq[i * n + j] += bik * b[k * n + j];
                    }
                }
            }
        }
        b = sq;
        log_scale *= 2.0;
        power *= 2.0;
    }
    estimate
}

/// `λ_m(t) = μ_m + Σ_{x_j < t} a[m][m_j] · exp(−β (t − x_j))`.
pub fn intensity_at(spec: &HawkesSpec, history: &[MarkedEvent], t: f64, mark: usize) -> f64 {
    let excited: f64 = history
        .iter()
        .filter(|e| e.time < t)
        .map(|e| spec.excitation[mark][e.mark] * (-spec.decay * (t - e.time)).exp())
        .sum();
    spec.base_rates[mark] + excited
}

/// Draws one sequence on `(0, horizon]`.
///
/// Intensities are tracked through the exponential-kernel recursion: the
/// excitation state `s_m` decays by `exp(−β Δt)` between candidates and jumps
/// by `a[m][j]` at an accepted event of mark `j`. Because the intensity never
/// increases between events, the total intensity at the current point is a
/// valid thinning bound.
pub fn simulate(spec: &HawkesSpec, rng: &mut Rng) -> Result<Vec<MarkedEvent>> {
    spec.validate()?;
    let m = spec.num_marks();
    let mut state = vec![0.0; m];
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut scale = 1.0;
    loop {
        let bound: f64 = spec.base_rates.iter().zip(&state).map(|(b, s)| b + s).sum();
        let wait = rng.exponential(bound) * scale;
        let next = t + wait;
        if next > spec.horizon {
            break;
        }
        let decay = (-spec.decay * wait).exp();
        state.iter_mut().for_each(|s| *s *= decay);
        t = next;
        let lambdas: Vec<f64> = spec.base_rates.iter().zip(&state).map(|(b, s)| b + s).collect();
        let total: f64 = lambdas.iter().sum();
        if rng.uniform() * bound <= total {
            let mark = rng.categorical(&lambdas);
            // guard against a zero-length step from exponential underflow
            if events.last().is_some_and(|e: &MarkedEvent| e.time >= t) || t <= 0.0 {
                continue;
            }
            events.push(MarkedEvent { time: t, mark });
            if events.len() > MAX_EVENTS {
                return Err(Error::NonStationary(format!(
                    "more than {MAX_EVENTS} events within the horizon; coupling scales make the process explosive"
                )));
            }
            for (i, s) in state.iter_mut().enumerate() {
                *s += spec.excitation[i][mark];
            }
            scale = spec.coupling_scales[mark];
        }
    }
    Ok(events)
}

/// Simulates until a sequence with at least `min_len` events is produced,
/// then wraps it in a validated [`EventSequence`].
pub fn simulate_sequence(spec: &HawkesSpec, rng: &mut Rng, min_len: usize) -> Result<EventSequence> {
    for _ in 0..10_000 {
        let events = simulate(spec, rng)?;
        if events.len() >= min_len.max(1) {
            return EventSequence::new(events, spec.num_marks());
        }
    }
    Err(Error::InvalidArgument(format!(
        "hawkes spec rarely produces {min_len} events within the horizon"
    )))
}

/// `count` sequences, each from its own forked stream of `rng`.
pub fn simulate_dataset(
    spec: &HawkesSpec,
    count: usize,
    min_len: usize,
    rng: &Rng,
) -> Result<Vec<EventSequence>> {
    (0..count)
        .map(|i| simulate_sequence(spec, &mut rng.fork(i as u64), min_len))
        .collect()
}
