//! `K`-step generation of the next event. Starting from the priors, each step
//! predicts at `t = (k−1)/K`, draws a mark from the predicted distribution,
//! draws a joint sender sample around `(τ̂, mark)` at the step accuracies and
//! folds it into both input distributions. A final prediction at `t = 1`
//! gives the event.

use crate::continuous::{alpha_step_cont, bayes_update_cont, ContinuousParams};
use crate::discrete::{alpha_step_disc, bayes_update_disc, CategoricalParams};
use crate::error::{Error, Result};
use crate::joint::{joint_sender_sample, JointCovariance};
use crate::math::{argmax, median, Rng};
use crate::psi::{output_prediction, PredictionOutput};
use crate::train::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointRule {
    Median,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    /// Draws per prediction (`L`).
    pub num_samples: usize,
    pub seed: u64,
    pub joint_noise: bool,
    pub point: PointRule,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 100, num_samples: 100, seed: 0, joint_noise: true, point: PointRule::Median }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.num_samples == 0 {
            return Err(Error::InvalidArgument("steps and num_samples must be positive".into()));
        }
        Ok(())
    }
}

/// One generated event.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Raw-scale interval.
    pub tau: f64,
    pub mark: usize,
    pub probs: CategoricalParams,
    /// Final input-distribution state, kept for diagnostics.
    pub cont: ContinuousParams,
}

/// Generates the next event after the history embedded as `h`.
pub fn generate_next(h: &[f64], state: &ModelState, cfg: &SampleConfig, rng: &mut Rng) -> Result<Generated> {
    generate_traced(h, state, cfg, rng, |_, _| {})
}

/// [`generate_next`] that also hands every step's prediction to `on_step`
/// together with its step index `k`.
pub fn generate_traced<F>(h: &[f64], state: &ModelState, cfg: &SampleConfig, rng: &mut Rng, mut on_step: F) -> Result<Generated>
where
    F: FnMut(usize, &PredictionOutput),
{
    cfg.validate()?;
    let model = &state.model;
    let m = model.dims.num_marks;
    let c = if cfg.joint_noise { state.c() } else { vec![0.0; m] };
    let (sigma1, beta1) = (state.config.sigma1, state.config.beta1);
    let mut cont = ContinuousParams::PRIOR;
    let mut theta = CategoricalParams::uniform(m);
    for k in 1..=cfg.steps {
        let t = (k - 1) as f64 / cfg.steps as f64;
        let out = output_prediction(model, cont.mu, &theta, t, h);
        on_step(k, &out);
        let mark = rng.categorical(out.probs.probs());
        let ac = alpha_step_cont(k, cfg.steps, sigma1)?;
        let ad = alpha_step_disc(k, cfg.steps, beta1)?;
        let cov = JointCovariance::new(ac, ad, &c)?;
        let (y_tau, y_m) = joint_sender_sample(out.tau_hat, mark, &cov, rng)?;
        cont = bayes_update_cont(cont, y_tau, ac)?;
        theta = bayes_update_disc(&theta, &y_m)?;
    }
    let out = output_prediction(model, cont.mu, &theta, 1.0, h);
    Ok(Generated { tau: state.norm.denormalize(out.tau_hat), mark: argmax(out.probs.probs()), probs: out.probs, cont })
}

/// `L` draws and the point predictions derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction {
    pub tau: f64,
    pub mark: usize,
    /// Mark distribution averaged over the draws.
    pub probs: Vec<f64>,
    pub draws: Vec<f64>,
}

pub fn predict_point(h: &[f64], state: &ModelState, cfg: &SampleConfig, rng: &mut Rng) -> Result<PointPrediction> {
    let m = state.model.dims.num_marks;
    let mut draws = Vec::with_capacity(cfg.num_samples);
    let mut probs = vec![0.0; m];
    for _ in 0..cfg.num_samples {
        let g = generate_next(h, state, cfg, rng)?;
        draws.push(g.tau);
        for (a, p) in probs.iter_mut().zip(g.probs.probs()) {
            *a += p;
        }
    }
    let n = cfg.num_samples as f64;
    probs.iter_mut().for_each(|p| *p /= n);
    let tau = match cfg.point {
        PointRule::Median => median(&draws),
        PointRule::Mean => draws.iter().sum::<f64>() / n,
    };
    Ok(PointPrediction { tau, mark: argmax(&probs), probs, draws })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormStats;
    use crate::train::TrainConfig;

    fn state() -> ModelState {
        let cfg = TrainConfig { embed_dim: 8, ..TrainConfig::default() };
        ModelState::init(3, NormStats::identity(), cfg).unwrap()
    }

    #[test]
    fn same_seed_same_draw() {
        let s = state();
        let cfg = SampleConfig { steps: 10, ..SampleConfig::default() };
        let h = vec![0.1; 8];
        let a = generate_next(&h, &s, &cfg, &mut Rng::new(3)).unwrap();
        let b = generate_next(&h, &s, &cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.tau > 0.0);
    }

    #[test]
    fn precision_telescopes_to_terminal_value() {
        let s = state();
        for k in [1, 7, 100] {
            let cfg = SampleConfig { steps: k, ..SampleConfig::default() };
            let g = generate_next(&[0.0; 8], &s, &cfg, &mut Rng::new(0)).unwrap();
            let want = s.config.sigma1.powi(-2);
            assert!((g.cont.rho - want).abs() / want < 1e-9);
        }
    }

    #[test]
    fn single_sample_point_equals_draw() {
        let s = state();
        let cfg = SampleConfig { steps: 5, num_samples: 1, ..SampleConfig::default() };
        let h = vec![0.3; 8];
        let p = predict_point(&h, &s, &cfg, &mut Rng::new(9)).unwrap();
        let g = generate_next(&h, &s, &cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(p.tau, g.tau);
        assert_eq!(p.probs, g.probs.probs());
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
