//! Training with the discretized `K`-step loss.
//!
//! For every event a step `k ~ U{1..K}` is drawn and the flow parameters are
//! sampled at `t = (k−1)/K`. The output network predicts from those and the
//! prefix embedding. The single-sample estimate of
//! `K · KL(joint sender ‖ joint receiver)` at the step-`k` accuracies is the
//! per-event loss. Flow samples are treated as inputs. The sender draw is
//! reparameterized, so the cross-covariance receives gradient.

use std::time::Instant;

use rayon::prelude::*;

use crate::continuous::{alpha_step_cont, flow_from_noise as flow_cont, ContinuousSchedule, FlowVariance};
use crate::data::{fit_norm, Dataset, NormStats};
use crate::discrete::{alpha_step_disc, flow_from_noise as flow_disc, DiscreteSchedule};
use crate::encoder::{encode_history, encode_tape};
use crate::error::{Error, Result};
use crate::joint::JointKlTerm;
use crate::math::{Rng, LN_2PI};
use crate::model::{Model, ModelDims, ParamStore};
use crate::psi::{output_prediction, psi_tape, state_features};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// `K` of the discretized loss.
    pub steps: usize,
    pub sigma1: f64,
    pub beta1: f64,
    pub joint_noise: bool,
    /// Sender draws averaged per loss term.
    pub mc_samples: usize,
    pub seed: u64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub flow_variance: FlowVariance,
    pub embed_dim: usize,
    pub layers: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-4,
            steps: 100,
            sigma1: 0.001,
            beta1: 1.0,
            joint_noise: true,
            mc_samples: 1,
            seed: 0,
            batch_size: 1,
            optimizer: OptimizerKind::Sgd,
            flow_variance: FlowVariance::Standard,
            embed_dim: 16,
            layers: 1,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if self.epochs == 0 || self.steps == 0 || self.mc_samples == 0 || self.batch_size == 0 {
            return bad("epochs, steps, mc_samples and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be nonnegative");
        }
        ContinuousSchedule::new(self.sigma1)?;
        DiscreteSchedule::new(self.beta1)?;
        Ok(())
    }

    pub fn cont_schedule(&self) -> ContinuousSchedule {
        ContinuousSchedule { sigma1: self.sigma1, flow_variance: self.flow_variance }
    }

    pub fn disc_schedule(&self) -> DiscreteSchedule {
        DiscreteSchedule { beta1: self.beta1 }
    }

    pub fn dims(&self, num_marks: usize) -> ModelDims {
        ModelDims { num_marks, embed_dim: self.embed_dim, layers: self.layers, sigma1: self.sigma1 }
    }
}

/// Trained parameters plus everything needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: Model,
    pub norm: NormStats,
    pub config: TrainConfig,
}

impl ModelState {
    /// Untrained state with parameters drawn from the config seed.
    pub fn init(num_marks: usize, norm: NormStats, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.dims(num_marks), &mut Rng::new(config.seed).fork(0))?;
        Ok(Self { model, norm, config })
    }

    pub fn c(&self) -> Vec<f64> {
        self.model.c(self.config.joint_noise)
    }

    /// Normalized `(τ, mark)` pairs of a sequence.
    pub fn normalize_events(&self, seq: &crate::data::EventSequence) -> Result<Vec<(f64, usize)>> {
        let iv = crate::data::intervalize(seq);
        iv.intervals
            .iter()
            .zip(&iv.marks)
            .map(|(&tau, &m)| Ok((self.norm.normalize(tau)?, m)))
            .collect()
    }
}

/// Pre-drawn randomness for one event's loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct EventNoise {
    /// Step `k` in `1..=K`.
    pub step: usize,
    pub eps_mu: f64,
    pub eps_theta: Vec<f64>,
    /// `(z_m, z_τ)` per sender draw.
    pub sender: Vec<(Vec<f64>, f64)>,
}

impl EventNoise {
    pub fn draw(steps: usize, num_marks: usize, mc_samples: usize, rng: &mut Rng) -> Self {
        let step = 1 + rng.below(steps);
        let eps_mu = rng.normal();
        let eps_theta = rng.normals(num_marks);
        let sender = (0..mc_samples)
            .map(|_| {
                let z_m = rng.normals(num_marks);
                (z_m, rng.normal())
            })
            .collect();
        Self { step, eps_mu, eps_theta, sender }
    }
}

pub fn draw_sequence_noise(cfg: &TrainConfig, num_marks: usize, len: usize, rng: &mut Rng) -> Vec<EventNoise> {
    (0..len).map(|_| EventNoise::draw(cfg.steps, num_marks, cfg.mc_samples, rng)).collect()
}

/// Records the loss graph of one sequence; returns the bound parameter
/// leaves and the `n×1` column of per-event losses `K · KL`.
pub fn sequence_graph(
    tape: &mut Tape,
    model: &Model,
    cfg: &TrainConfig,
    events: &[(f64, usize)],
    noise: &[EventNoise],
) -> Result<(Vec<Var>, Var)> {
    if events.is_empty() {
        return Err(Error::EmptyData("sequence has no events"));
    }
    assert_eq!(events.len(), noise.len(), "one noise record per event");
    let dims = &model.dims;
    let m = dims.num_marks;
    let params = model.params.bind(tape);
    let h = encode_tape(tape, &params, model, events)?;
    let h_prev = tape.shift_down(params[model.encoder.h0.0], h);

    let (cs, ds) = (cfg.cont_schedule(), cfg.disc_schedule());
    let k_total = cfg.steps;
    let width = 1 + m + dims.time_dim();
    let mut states = Vec::with_capacity(events.len() * width);
    let mut times = Vec::with_capacity(events.len());
    let mut groups = Vec::with_capacity(events.len());
    for (&(tau, mark), nz) in events.iter().zip(noise) {
        let t = (nz.step - 1) as f64 / k_total as f64;
        let mu = flow_cont(tau, t, &cs, nz.eps_mu);
        let theta = flow_disc(mark, t, &ds, m, &nz.eps_theta)?;
        states.extend(state_features(mu.mu, theta.probs(), t, dims.time_dim()));
        times.push(t);
        let ac = alpha_step_cont(nz.step, k_total, cfg.sigma1)?;
        let ad = alpha_step_disc(nz.step, k_total, cfg.beta1)?;
        groups.push(
            nz.sender
                .iter()
                .map(|(z_m, z_tau)| JointKlTerm::new(tau, mark, ac, ad, z_m.clone(), *z_tau))
                .collect::<Vec<_>>(),
        );
    }
    let states = Tensor::from_vec(events.len(), width, states);
    let (tau_hat, logits) = psi_tape(tape, &params, model, states, h_prev, &times);
    let c = if cfg.joint_noise {
        tape.constrain_c(params[model.c_raw.0])
    } else {
        tape.leaf(Tensor::zeros(1, m))
    };
    let kl = tape.joint_kl(tau_hat, logits, c, &groups);
    Ok((params, tape.scale(kl, k_total as f64)))
}

/// Summed per-event losses of one sequence and their parameter gradients.
pub fn sequence_loss_grad(
    model: &Model,
    cfg: &TrainConfig,
    events: &[(f64, usize)],
    noise: &[EventNoise],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (params, losses) = sequence_graph(&mut tape, model, cfg, events, noise)?;
    let total = tape.sum(losses);
    let value = tape.value(total).data[0];
    let grads = tape.backward(total);
    Ok((value, model.params.collect_grads(&params, &grads)))
}

/// Summed per-event losses without gradients.
pub fn sequence_loss(model: &Model, cfg: &TrainConfig, events: &[(f64, usize)], noise: &[EventNoise]) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, losses) = sequence_graph(&mut tape, model, cfg, events, noise)?;
    Ok(tape.value(losses).data.iter().sum())
}

/// Plain SGD or Adam over a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self { kind, lr, first: zeros.clone(), second: zeros, step: 0 }
    }

    /// Applies one update; parameters with `frozen[i]` set are left alone.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], frozen: &[bool]) {
        self.step += 1;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(self.step), 1.0 - ADAM_BETA2.powi(self.step));
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if frozen[i] {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in p.data.iter_mut().zip(&g.data) {
                        *x -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i].data, &mut self.second[i].data);
                    for j in 0..p.data.len() {
                        let gj = g.data[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p.data[j] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|x| *x *= s);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-event loss over the epoch.
    pub mean_loss: f64,
    pub vlb: Option<f64>,
    pub wall_time: f64,
    pub loss_terms: usize,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let vlb = self.vlb.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        format!("{}, {:.6}, {}, {:.3}", self.epoch, self.mean_loss, vlb, self.wall_time)
    }
}

/// [`train_with`] without a per-epoch hook.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelState, Vec<EpochLog>)> {
    train_with(data, cfg, |_, _| Ok(()))
}

/// Fits normalization on `data`, initializes a model from the seed and runs
/// `cfg.epochs` passes. `on_epoch` sees every log entry and the current state.
pub fn train_with<F>(data: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<(ModelState, Vec<EpochLog>)>
where
    F: FnMut(&EpochLog, &ModelState) -> Result<()>,
{
    cfg.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::EmptyData("training split has no sequences"));
    }
    let norm = fit_norm(&data.intervalized())?;
    let mut state = ModelState::init(data.num_marks, norm, cfg.clone())?;
    let seqs: Vec<Vec<(f64, usize)>> = data
        .sequences
        .iter()
        .map(|s| state.normalize_events(s))
        .collect::<Result<_>>()?;
    let m = data.num_marks;
    let mut rng = Rng::new(cfg.seed).fork(1);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &state.model.params);
    let mut frozen = vec![false; state.model.params.len()];
    if !cfg.joint_noise {
        frozen[state.model.c_raw.0] = true;
    }
    let mut logs = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let (mut epoch_loss, mut epoch_terms) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let noises: Vec<Vec<EventNoise>> =
                batch.iter().map(|&i| draw_sequence_noise(cfg, m, seqs[i].len(), &mut rng)).collect();
            let model = &state.model;
            let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
                .par_iter()
                .zip(noises.par_iter())
                .map(|(&i, nz)| sequence_loss_grad(model, cfg, &seqs[i], nz))
                .collect();
            let terms: usize = batch.iter().map(|&i| seqs[i].len()).sum();
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (l, g) = r?;
                loss += l;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let mut grads = grads.expect("nonempty batch");
            let inv = 1.0 / terms as f64;
            grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|x| *x *= inv);
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.update(&mut state.model.params, &grads, &frozen);
            epoch_loss += loss;
            epoch_terms += terms;
        }
        let log = EpochLog {
            epoch,
            mean_loss: epoch_loss / epoch_terms as f64,
            vlb: None,
            wall_time: start.elapsed().as_secs_f64(),
            loss_terms: epoch_terms,
        };
        on_epoch(&log, &state)?;
        logs.push(log);
    }
    Ok((state, logs))
}

/// Variational bound in nats per event: the `K`-step loss estimate plus the
/// reconstruction `−ln p_O(m) − ln N(τ; τ̂, σ₁²)` at `t = 1`.
pub fn vlb(data: &Dataset, state: &ModelState, rng: &Rng) -> Result<f64> {
    let cfg = &state.config;
    let m = state.model.dims.num_marks;
    let per_seq: Vec<Result<(u64, f64, usize)>> = data
        .sequences
        .par_iter()
        .map(|seq| {
            // keyed by content so the result does not depend on sequence order
            let hash = seq.content_hash();
            let mut r = rng.fork(hash);
            let events = state.normalize_events(seq)?;
            let noise = draw_sequence_noise(cfg, m, events.len(), &mut r);
            let diffusion = sequence_loss(&state.model, cfg, &events, &noise)?;
            let hist = encode_history(&state.model, &events)?;
            let mut recon = 0.0;
            for (i, &(tau, mark)) in events.iter().enumerate() {
                recon += reconstruction(state, tau, mark, &hist[i], &mut r)?;
            }
            Ok((hash, diffusion + recon, events.len()))
        })
        .collect();
    let mut parts = per_seq.into_iter().collect::<Result<Vec<_>>>()?;
    parts.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let total: f64 = parts.iter().map(|p| p.1).sum();
    let count: usize = parts.iter().map(|p| p.2).sum();
    if count == 0 {
        return Err(Error::EmptyData("no events for the variational bound"));
    }
    Ok(total / count as f64)
}

/// The training objective in nats per event, with every sequence's noise
/// drawn from `rng` forked by content hash. Two models scored with the same
/// `rng` see identical steps and noise, so their difference carries no
/// sampling error.
pub fn objective(data: &Dataset, state: &ModelState, rng: &Rng) -> Result<f64> {
    let cfg = &state.config;
    let m = state.model.dims.num_marks;
    let per_seq: Vec<Result<(u64, f64, usize)>> = data
        .sequences
        .par_iter()
        .map(|seq| {
            let hash = seq.content_hash();
            let mut r = rng.fork(hash);
            let events = state.normalize_events(seq)?;
            let noise = draw_sequence_noise(cfg, m, events.len(), &mut r);
            Ok((hash, sequence_loss(&state.model, cfg, &events, &noise)?, events.len()))
        })
        .collect();
    let mut parts = per_seq.into_iter().collect::<Result<Vec<_>>>()?;
    parts.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let count: usize = parts.iter().map(|p| p.2).sum();
    if count == 0 {
        return Err(Error::EmptyData("no events for the objective"));
    }
    Ok(parts.iter().map(|p| p.1).sum::<f64>() / count as f64)
}

/// `−ln p_O(m | θ, 1) − ln N(τ; τ̂(1), σ₁²)` with `θ ~ p_F(· | x; 1)`.
pub fn reconstruction(state: &ModelState, tau: f64, mark: usize, h: &[f64], rng: &mut Rng) -> Result<f64> {
    let cfg = &state.config;
    let m = state.model.dims.num_marks;
    let mu = flow_cont(tau, 1.0, &cfg.cont_schedule(), rng.normal());
    let theta = flow_disc(mark, 1.0, &cfg.disc_schedule(), m, &rng.normals(m))?;
    let out = output_prediction(&state.model, mu.mu, &theta, 1.0, h);
    let log_p = crate::math::log_softmax(&out.logits)[mark];
    let s2 = cfg.sigma1 * cfg.sigma1;
    let log_n = -0.5 * (LN_2PI + s2.ln()) - (tau - out.tau_hat).powi(2) / (2.0 * s2);
    Ok(-log_p - log_n)
}
