//! Self-describing binary checkpoint. Layout, all integers and floats
//! little-endian:
//!
//! ```text
//! magic "MKFLOWCK" | version u32 | num_marks u64
//! training settings | NormStats | RNG state | config echo (u64 length + UTF-8)
//! tensor count u64 | per tensor: name (u64 length + UTF-8), rows u64, cols u64, f64 data
//! ```

use std::path::Path;

use crate::continuous::FlowVariance;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::math::RngState;
use crate::model::{Model, ParamStore};
use crate::tape::Tensor;
use crate::train::{ModelState, OptimizerKind, TrainConfig};

pub const MAGIC: &[u8; 8] = b"MKFLOWCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    /// Generator state at the time of saving.
    pub rng: RngState,
    /// The configuration text the run was started with.
    pub config_text: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size does not fit in memory".into()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

fn flag(v: u8, what: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Checkpoint(format!("bad {what} tag {v}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let c = &self.state.config;
        w.usize(self.state.model.dims.num_marks);
        w.usize(c.epochs);
        w.f64(c.lr);
        w.usize(c.steps);
        w.f64(c.sigma1);
        w.f64(c.beta1);
        w.u8(c.joint_noise as u8);
        w.usize(c.mc_samples);
        w.u64(c.seed);
        w.usize(c.batch_size);
        w.u8((c.optimizer == OptimizerKind::Adam) as u8);
        w.u8((c.flow_variance == FlowVariance::Linear) as u8);
        w.usize(c.embed_dim);
        w.usize(c.layers);
        w.f64(c.grad_clip);
        w.f64(self.state.norm.mean_log_tau);
        w.f64(self.state.norm.std_log_tau);
        w.u64(self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        w.str(&self.config_text);
        let params = &self.state.model.params;
        w.usize(params.len());
        for (name, t) in params.names().iter().zip(params.tensors()) {
            w.str(name);
            w.usize(t.rows);
            w.usize(t.cols);
            t.data.iter().for_each(|&x| w.f64(x));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let num_marks = r.usize()?;
        let config = TrainConfig {
            epochs: r.usize()?,
            lr: r.f64()?,
            steps: r.usize()?,
            sigma1: r.f64()?,
            beta1: r.f64()?,
            joint_noise: flag(r.u8()?, "joint_noise")?,
            mc_samples: r.usize()?,
            seed: r.u64()?,
            batch_size: r.usize()?,
            optimizer: if flag(r.u8()?, "optimizer")? { OptimizerKind::Adam } else { OptimizerKind::Sgd },
            flow_variance: if flag(r.u8()?, "flow_variance")? { FlowVariance::Linear } else { FlowVariance::Standard },
            embed_dim: r.usize()?,
            layers: r.usize()?,
            grad_clip: r.f64()?,
        };
        config.validate().map_err(|e| Error::Checkpoint(format!("stored settings are invalid: {e}")))?;
        let norm = NormStats { mean_log_tau: r.f64()?, std_log_tau: r.f64()? };
        let rng = RngState { seed: r.u64()?, stream: r.u64()?, word_pos: r.u128()? };
        let config_text = r.str()?;
        let count = r.usize()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?;
            let (rows, cols) = (r.usize()?, r.usize()?);
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint("tensor shape overflows".into()))?;
            if n > (bytes.len() - r.pos) / 8 {
                return Err(Error::Checkpoint(format!("tensor `{name}` runs past the end of the file")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.add(name, Tensor::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = Model::from_params(config.dims(num_marks), params)?;
        Ok(Self { state: ModelState { model, norm, config }, rng, config_text })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    fn checkpoint() -> Checkpoint {
        let config = TrainConfig { embed_dim: 8, seed: 3, joint_noise: false, ..TrainConfig::default() };
        let mut state = ModelState::init(3, NormStats { mean_log_tau: -0.25, std_log_tau: 1.5 }, config).unwrap();
        let c = state.model.c_raw;
        state.model.params.get_mut(c).data = vec![0.1, -0.2, f64::MIN_POSITIVE];
        let mut rng = Rng::new(9);
        rng.normals(5);
        Checkpoint { state, rng: rng.state(), config_text: "lr = 0.1\n".into() }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let a: Vec<u64> = ck.state.model.params.flat().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.state.model.params.flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
        let mut r1 = Rng::from_state(ck.rng);
        let mut r2 = Rng::from_state(back.rng);
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
