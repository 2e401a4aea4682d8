//! History encoder: each event is lifted to `[sinusoidal(τ_norm) ‖ E[mark]]`
//! and a stack of causally masked single-head attention blocks (pre-norm,
//! residual, SiLU feed-forward of width 4D) aggregates the prefix. Row `i` of
//! the output is `h_{i+1}`, the embedding of events `1..=i+1`; `h_0` is a
//! learned vector used for the empty history.

use crate::error::{Error, Result};
use crate::math::Rng;
use crate::model::{init_matrix, Model, ModelDims, ParamId, ParamStore};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderIds {
    pub mark_embed: ParamId,
    pub h0: ParamId,
    pub layers: Vec<LayerIds>,
    pub out_gain: ParamId,
    pub out_bias: ParamId,
}

pub(crate) fn init(store: &mut ParamStore, dims: &ModelDims, rng: &mut Rng) -> EncoderIds {
    let d = dims.embed_dim;
    let mark_embed = store.add(
        "encoder.mark_embed",
        Tensor::from_vec(dims.num_marks, dims.mark_dim(), rng.normals(dims.num_marks * dims.mark_dim())),
    );
    let h0 = store.add("encoder.h0", Tensor::from_vec(1, d, rng.normals(d).iter().map(|x| 0.1 * x).collect()));
    let ones = || Tensor::from_vec(1, d, vec![1.0; d]);
    let layers = (0..dims.layers)
        .map(|l| {
            let p = format!("encoder.layer{l}");
            LayerIds {
                ln1_gain: store.add(format!("{p}.ln1_gain"), ones()),
                ln1_bias: store.add(format!("{p}.ln1_bias"), Tensor::zeros(1, d)),
                wq: store.add(format!("{p}.wq"), init_matrix(rng, d, d, 1.0)),
                wk: store.add(format!("{p}.wk"), init_matrix(rng, d, d, 1.0)),
                wv: store.add(format!("{p}.wv"), init_matrix(rng, d, d, 1.0)),
                wo: store.add(format!("{p}.wo"), init_matrix(rng, d, d, 0.5)),
                ln2_gain: store.add(format!("{p}.ln2_gain"), ones()),
                ln2_bias: store.add(format!("{p}.ln2_bias"), Tensor::zeros(1, d)),
                ff_w1: store.add(format!("{p}.ff_w1"), init_matrix(rng, d, 4 * d, 1.0)),
                ff_b1: store.add(format!("{p}.ff_b1"), Tensor::zeros(1, 4 * d)),
                ff_w2: store.add(format!("{p}.ff_w2"), init_matrix(rng, 4 * d, d, 0.5)),
                ff_b2: store.add(format!("{p}.ff_b2"), Tensor::zeros(1, d)),
            }
        })
        .collect();
    let out_gain = store.add("encoder.out_gain", ones());
    let out_bias = store.add("encoder.out_bias", Tensor::zeros(1, d));
    EncoderIds { mark_embed, h0, layers, out_gain, out_bias }
}

/// `[sin(ω₀z), cos(ω₀z), sin(ω₁z), …]` with `ω_k = 10000^{−2k/dim}`.
pub fn time_features(z: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out.push((w * z).sin());
        out.push((w * z).cos());
    }
    out
}

/// `[time_features(τ_norm) ‖ E[mark]]`.
pub fn embed_event(model: &Model, tau_norm: f64, mark: usize) -> Result<Vec<f64>> {
    let m = model.dims.num_marks;
    if mark >= m {
        return Err(Error::MarkOutOfRange { mark, num_marks: m });
    }
    let mut e = time_features(tau_norm, model.dims.time_dim());
    e.extend_from_slice(model.params.get(model.encoder.mark_embed).row(mark));
    Ok(e)
}

/// Encodes `events` (normalized interval, mark) on the tape; returns the
/// `n×D` matrix whose row `i` is `h_{i+1}`. `params` are the bound leaves.
pub fn encode_tape(tape: &mut Tape, params: &[Var], model: &Model, events: &[(f64, usize)]) -> Result<Var> {
    let dims = &model.dims;
    let ids = &model.encoder;
    let n = events.len();
    let (d, m) = (dims.embed_dim, dims.num_marks);
    let mut times = Vec::with_capacity(n * dims.time_dim());
    let mut one_hot = Tensor::zeros(n, m);
    for (i, &(z, mark)) in events.iter().enumerate() {
        if mark >= m {
            return Err(Error::MarkOutOfRange { mark, num_marks: m });
        }
        times.extend(time_features(z, dims.time_dim()));
        one_hot.data[i * m + mark] = 1.0;
    }
    let times = tape.leaf(Tensor::from_vec(n, dims.time_dim(), times));
    let one_hot = tape.leaf(one_hot);
    let marks = tape.matmul(one_hot, params[ids.mark_embed.0]);
    let mut x = tape.concat_cols(&[times, marks]);

    let scale = 1.0 / (d as f64).sqrt();
    let p = |id: ParamId| params[id.0];
    for layer in &ids.layers {
        let a = affine_norm(tape, x, p(layer.ln1_gain), p(layer.ln1_bias));
        let q = tape.matmul(a, p(layer.wq));
        let k = tape.matmul(a, p(layer.wk));
        let v = tape.matmul(a, p(layer.wv));
        let scores = tape.matmul_bt(q, k);
        let scores = tape.scale(scores, scale);
        let attn = tape.causal_softmax(scores);
        let mixed = tape.matmul(attn, v);
        let out = tape.matmul(mixed, p(layer.wo));
        x = tape.add(x, out);

        let b = affine_norm(tape, x, p(layer.ln2_gain), p(layer.ln2_bias));
        let f = tape.matmul(b, p(layer.ff_w1));
        let f = tape.add_row(f, p(layer.ff_b1));
        let f = tape.silu(f);
        let f = tape.matmul(f, p(layer.ff_w2));
        let f = tape.add_row(f, p(layer.ff_b2));
        x = tape.add(x, f);
    }
    Ok(affine_norm(tape, x, p(ids.out_gain), p(ids.out_bias)))
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.layer_norm(x);
    let n = tape.mul_row(n, gain);
    tape.add_row(n, bias)
}

/// `[h_0, h_1, …, h_n]` for a prefix of `n` events.
pub fn encode_history(model: &Model, events: &[(f64, usize)]) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![model.params.get(model.encoder.h0).data.clone()];
    if events.is_empty() {
        return Ok(out);
    }
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape);
    let h = encode_tape(&mut tape, &params, model, events)?;
    let hv = tape.value(h);
    out.extend((0..hv.rows).map(|r| hv.row(r).to_vec()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelDims { num_marks: 3, embed_dim: 8, layers: 2, sigma1: 0.01 }, &mut Rng::new(4)).unwrap()
    }

    #[test]
    fn time_features_at_origin_alternate() {
        assert_eq!(time_features(0.0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_parts() {
        let m = model();
        let a = embed_event(&m, 0.7, 2).unwrap();
        let b = embed_event(&m, 0.7, 0).unwrap();
        assert_eq!(&a[4..], m.params.get(m.encoder.mark_embed).row(2));
        assert_eq!(a[..4], b[..4]);
        assert!(matches!(embed_event(&m, 0.0, 3), Err(Error::MarkOutOfRange { .. })));
    }

    #[test]
    fn empty_history_is_h0() {
        let m = model();
        let h = encode_history(&m, &[]).unwrap();
        assert_eq!(h, vec![m.params.get(m.encoder.h0).data.clone()]);
    }

    #[test]
    fn appending_keeps_prefix_bits() {
        let m = model();
        let ev = [(0.3, 0), (-1.2, 2), (0.5, 1)];
        let short = encode_history(&m, &ev[..2]).unwrap();
        let long = encode_history(&m, &ev).unwrap();
        assert_eq!(short[..], long[..3]);
        assert!(long.iter().all(|h| h.len() == 8 && h.iter().all(|x| x.is_finite())));
    }
}
