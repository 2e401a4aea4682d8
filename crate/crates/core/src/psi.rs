//! Output network `Ψ(μ, θ, t, h)`: two residual SiLU feed-forward blocks of
//! width `4·D_in` on `[μ ‖ θ ‖ sinusoidal(t) ‖ h]`, followed by a scalar
//! interval head and a mark-logit head.
//!
//! The interval head predicts the flow noise `ε̂`; the estimate is
//! `τ̂ = μ/γ(t) − sqrt((1 − γ(t))/γ(t))·ε̂`, which inverts the flow draw
//! `μ = γτ + sqrt(γ(1 − γ))·ε`. It is clipped to `[−1, 1]` and forced to 0
//! for `t < T_MIN`; mark probabilities are always produced.

use crate::discrete::CategoricalParams;
use crate::encoder::time_features;
use crate::math::Rng;
use crate::model::{init_matrix, Model, ModelDims, ParamId, ParamStore};
use crate::tape::{matmul, silu, Tape, Tensor, Var};

pub const T_MIN: f64 = 1e-6;
pub const TAU_MIN: f64 = -1.0;
pub const TAU_MAX: f64 = 1.0;
pub const NUM_BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiIds {
    pub blocks: Vec<BlockIds>,
    pub tau_w: ParamId,
    pub tau_b: ParamId,
    pub mark_w: ParamId,
    pub mark_b: ParamId,
}

pub(crate) fn init(store: &mut ParamStore, dims: &ModelDims, rng: &mut Rng) -> PsiIds {
    let d = dims.psi_input_dim();
    let blocks = (0..NUM_BLOCKS)
        .map(|b| BlockIds {
            w1: store.add(format!("psi.block{b}.w1"), init_matrix(rng, d, 4 * d, 1.0)),
            b1: store.add(format!("psi.block{b}.b1"), Tensor::zeros(1, 4 * d)),
            w2: store.add(format!("psi.block{b}.w2"), init_matrix(rng, 4 * d, d, 0.5)),
            b2: store.add(format!("psi.block{b}.b2"), Tensor::zeros(1, d)),
        })
        .collect();
    PsiIds {
        blocks,
        tau_w: store.add("psi.tau_w", init_matrix(rng, d, 1, 0.1)),
        tau_b: store.add("psi.tau_b", Tensor::zeros(1, 1)),
        mark_w: store.add("psi.mark_w", init_matrix(rng, d, dims.num_marks, 0.1)),
        mark_b: store.add("psi.mark_b", Tensor::zeros(1, dims.num_marks)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    /// Normalized interval estimate in `[TAU_MIN, TAU_MAX]`.
    pub tau_hat: f64,
    pub probs: CategoricalParams,
    pub logits: Vec<f64>,
}

/// The part of the input that does not depend on trainable parameters:
/// `[μ ‖ θ ‖ sinusoidal(t)]`.
pub fn state_features(mu: f64, theta: &[f64], t: f64, time_dim: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(1 + theta.len() + time_dim);
    x.push(mu);
    x.extend_from_slice(theta);
    x.extend(time_features(t, time_dim));
    x
}

/// `(offset, scale)` with `τ̂ = offset + scale·ε̂` before clipping.
pub fn tau_affine(mu: f64, t: f64, sigma1: f64) -> (f64, f64) {
    let gamma = 1.0 - sigma1.powf(2.0 * t);
    (mu / gamma, -((1.0 - gamma) / gamma).sqrt())
}

fn finish_tau(raw: f64, mu: f64, t: f64, sigma1: f64) -> f64 {
    if t < T_MIN {
        return 0.0;
    }
    let (offset, scale) = tau_affine(mu, t, sigma1);
    (offset + scale * raw).clamp(TAU_MIN, TAU_MAX)
}

fn add_in_place(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

/// Plain forward pass for a single state; numerically identical to the tape version.
pub fn output_prediction(model: &Model, mu: f64, theta: &CategoricalParams, t: f64, h: &[f64]) -> PredictionOutput {
    let ids = &model.psi;
    let p = |id: ParamId| model.params.get(id);
    let mut input = state_features(mu, theta.probs(), t, model.dims.time_dim());
    input.extend_from_slice(h);
    let mut x = Tensor::row_vector(input);
    for b in &ids.blocks {
        let mut f = matmul(&x, p(b.w1));
        add_in_place(&mut f, p(b.b1));
        f.data.iter_mut().for_each(|v| *v = silu(*v));
        let mut f = matmul(&f, p(b.w2));
        add_in_place(&mut f, p(b.b2));
        add_in_place(&mut x, &f);
    }
    let mut tau = matmul(&x, p(ids.tau_w));
    add_in_place(&mut tau, p(ids.tau_b));
    let mut logits = matmul(&x, p(ids.mark_w));
    add_in_place(&mut logits, p(ids.mark_b));
    PredictionOutput {
        tau_hat: finish_tau(tau.data[0], mu, t, model.dims.sigma1),
        probs: CategoricalParams::from_logits(&logits.data),
        logits: logits.data,
    }
}

/// Batched forward on the tape. `states` is the `n×(1+M+D_t)` constant block
/// from [`state_features`] (its first column is `μ`), `h` the `n×D` history
/// rows and `t` the per-row times. Returns the clipped interval column and
/// the logits.
pub fn psi_tape(tape: &mut Tape, params: &[Var], model: &Model, states: Tensor, h: Var, t: &[f64]) -> (Var, Var) {
    let ids = &model.psi;
    let p = |id: ParamId| params[id.0];
    let (offset, scale): (Vec<f64>, Vec<f64>) =
        (0..states.rows).map(|r| tau_affine(states.get(r, 0), t[r], model.dims.sigma1)).unzip();
    let s = tape.leaf(states);
    let mut x = tape.concat_cols(&[s, h]);
    for b in &ids.blocks {
        let f = tape.matmul(x, p(b.w1));
        let f = tape.add_row(f, p(b.b1));
        let f = tape.silu(f);
        let f = tape.matmul(f, p(b.w2));
        let f = tape.add_row(f, p(b.b2));
        x = tape.add(x, f);
    }
    let tau = tape.matmul(x, p(ids.tau_w));
    let tau = tape.add_row(tau, p(ids.tau_b));
    let zero = t.iter().map(|&ti| ti < T_MIN).collect();
    let tau = tape.affine_clip(tau, offset, scale, TAU_MIN, TAU_MAX, zero);
    let logits = tape.matmul(x, p(ids.mark_w));
    let logits = tape.add_row(logits, p(ids.mark_b));
    (tau, logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelDims { num_marks: 3, embed_dim: 8, layers: 1, sigma1: 0.01 }, &mut Rng::new(2)).unwrap()
    }

    #[test]
    fn tiny_t_zeroes_tau() {
        let m = model();
        let out = output_prediction(&m, 3.0, &CategoricalParams::uniform(3), 1e-9, &[0.5; 8]);
        assert_eq!(out.tau_hat, 0.0);
        assert!((out.probs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn estimate_is_clipped() {
        let mut m = model();
        let b = m.psi.tau_b;
        // the head predicts noise, so a large positive output pushes τ̂ down
        m.params.get_mut(b).data[0] = 500.0;
        let out = output_prediction(&m, 0.0, &CategoricalParams::uniform(3), 0.5, &[0.0; 8]);
        assert_eq!(out.tau_hat, -1.0);
        m.params.get_mut(b).data[0] = -500.0;
        let out = output_prediction(&m, 0.0, &CategoricalParams::uniform(3), 0.5, &[0.0; 8]);
        assert_eq!(out.tau_hat, 1.0);
        // and a mean far outside the range is clipped as well
        m.params.get_mut(b).data[0] = 0.0;
        let out = output_prediction(&m, 1.7, &CategoricalParams::uniform(3), 1.0, &[0.0; 8]);
        assert_eq!(out.tau_hat, 1.0);
    }

    #[test]
    fn zero_noise_inverts_the_flow_mean() {
        let (offset, scale) = tau_affine(0.45, 0.5, 0.01);
        let gamma = 1.0 - 0.01f64;
        assert!((offset - 0.45 / gamma).abs() < 1e-15);
        assert!((scale + (0.01 / gamma).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn plain_and_tape_agree_bitwise() {
        let m = model();
        let mut rng = Rng::new(7);
        let rows: Vec<(f64, Vec<f64>, f64, Vec<f64>)> = (0..4)
            .map(|i| {
                let theta = crate::math::softmax(&rng.normals(3));
                (rng.normal(), theta, [0.0, 0.3, 0.99, 1.0][i], rng.normals(8))
            })
            .collect();
        let mut tape = Tape::new();
        let params = m.params.bind(&mut tape);
        let mut states = Vec::new();
        let mut hs = Vec::new();
        for (mu, theta, t, h) in &rows {
            states.extend(state_features(*mu, theta, *t, m.dims.time_dim()));
            hs.extend_from_slice(h);
        }
        let ts: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let h = tape.leaf(Tensor::from_vec(4, 8, hs));
        let width = 1 + 3 + m.dims.time_dim();
        let (tau, logits) = psi_tape(&mut tape, &params, &m, Tensor::from_vec(4, width, states), h, &ts);
        for (r, (mu, theta, t, h)) in rows.iter().enumerate() {
            let out = output_prediction(&m, *mu, &CategoricalParams::new(theta.clone()).unwrap(), *t, h);
            assert_eq!(out.tau_hat, tape.value(tau).data[r]);
            assert_eq!(out.logits, tape.value(logits).row(r));
        }
    }
}
