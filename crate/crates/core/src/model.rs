//! Trainable parameters: an ordered, named tensor store and the model that
//! lays the encoder, the output network and the cross-covariance out in it.

use crate::encoder::{self, EncoderIds};
use crate::error::{Error, Result};
use crate::joint::constrain_c;
use crate::math::Rng;
use crate::psi::{self, PsiIds};
use crate::tape::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in store order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_scalars(), "flat parameter length");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    /// Records every tensor as a tape leaf; the returned vector is indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Per-parameter gradients after a backward pass; untouched parameters get zeros.
    pub fn collect_grads(&self, vars: &[Var], grads: &Gradients) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, v)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
            .collect()
    }
}

/// Architecture sizes, plus the terminal noise level the interval head is
/// parameterized against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub num_marks: usize,
    /// History embedding width `D`; half of it carries time features.
    pub embed_dim: usize,
    /// Attention blocks in the encoder.
    pub layers: usize,
    /// `σ₁` of the interval schedule.
    pub sigma1: f64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.num_marks == 0 {
            return Err(Error::InvalidArgument("number of marks must be positive".into()));
        }
        if self.embed_dim < 4 || self.embed_dim % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding width must be a positive multiple of 4, got {}",
                self.embed_dim
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("need at least one attention layer".into()));
        }
        if !(self.sigma1 > 0.0 && self.sigma1 < 1.0) {
            return Err(Error::InvalidArgument(format!("sigma1 must lie in (0, 1), got {}", self.sigma1)));
        }
        Ok(())
    }

    /// Width of the sinusoidal feature block, used for both intervals and `t`.
    pub fn time_dim(&self) -> usize {
        self.embed_dim / 2
    }

    pub fn mark_dim(&self) -> usize {
        self.embed_dim - self.time_dim()
    }

    /// Output-network input width: `[μ ‖ θ ‖ time(t) ‖ h]`.
    pub fn psi_input_dim(&self) -> usize {
        1 + self.num_marks + self.time_dim() + self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub params: ParamStore,
    pub encoder: EncoderIds,
    pub psi: PsiIds,
    /// Unconstrained cross-covariance vector.
    pub c_raw: ParamId,
}

impl Model {
    /// Fresh parameters; the cross-covariance starts at exactly zero.
    pub fn new(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut params = ParamStore::new();
        let encoder = encoder::init(&mut params, &dims, rng);
        let psi = psi::init(&mut params, &dims, rng);
        let c_raw = params.add("c_raw", Tensor::zeros(1, dims.num_marks));
        Ok(Self { dims, params, encoder, psi, c_raw })
    }

    /// Rebuilds the layout for `dims` and takes values from `params`, which
    /// must have the same names and shapes.
    pub fn from_params(dims: ModelDims, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(dims, &mut Rng::new(0))?;
        if model.params.names() != params.names() {
            return Err(Error::Checkpoint("parameter names do not match the model layout".into()));
        }
        for (a, b) in model.params.tensors().iter().zip(params.tensors()) {
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(Error::Checkpoint("parameter shapes do not match the model layout".into()));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// The constrained cross-covariance, or zeros when joint noise is off.
    pub fn c(&self, joint_noise: bool) -> Vec<f64> {
        if joint_noise {
            constrain_c(&self.params.get(self.c_raw).data)
        } else {
            vec![0.0; self.dims.num_marks]
        }
    }
}

/// Scaled normal initializer: entries `~ N(0, gain²/fan_in)`.
pub(crate) fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let sd = gain / (rows as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| sd * rng.normal()).collect())
}
