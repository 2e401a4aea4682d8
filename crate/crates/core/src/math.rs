//! Numerical primitives shared by the rest of the crate: a seedable,
//! checkpointable random stream, dense Cholesky factorization, Gaussian
//! sampling and log-densities, stable softmax helpers and a central
//! finite-difference gradient.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Pivots at or below this value are treated as a failed factorization.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Snapshot of an [`Rng`] that restores the exact same output stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// Deterministic random stream (ChaCha8) keyed by a 64-bit seed and a
/// stream id. Independent streams for parallel work come from [`Rng::fork`].
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// An independent stream derived from this one's seed and stream id.
    /// Does not consume any output of `self`.
    pub fn fork(&self, id: u64) -> Self {
        let stream = splitmix64(self.inner.get_stream() ^ splitmix64(id.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::with_stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.uniform()).ln() / rate
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let target = self.uniform() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        // rounding can leave target == total; fall back to the last positive weight
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Symmetric matrix stored as its lower triangle; the upper half is read
/// through the mirror so symmetry holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    lower: Vec<f64>,
}

impl SymmetricMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, lower: vec![0.0; dim * (dim + 1) / 2] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    /// Builds from a dense row-major square matrix, reading the lower triangle.
    pub fn from_dense(dim: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: dense.len() });
        }
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                m.set(i, j, dense[i * dim + j]);
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn index(i: usize, j: usize) -> usize {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        r * (r + 1) / 2 + c
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[Self::index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.lower[Self::index(i, j)] = v;
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.get(i, j);
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.to_dense().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Dense lower-triangular factor `L` (row-major, upper part zero).
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    data: Vec<f64>,
}

impl CholeskyFactor {
    /// Wraps a dense row-major matrix; entries above the diagonal are ignored.
    pub fn from_lower_dense(dim: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: dense.len() });
        }
        let mut data = dense.to_vec();
        for i in 0..dim {
            for j in i + 1..dim {
                data[i * dim + j] = 0.0;
            }
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_dense(&self) -> &[f64] {
        &self.data
    }

    /// `L · Lᵀ`.
    pub fn reconstruct(&self) -> SymmetricMatrix {
        let n = self.dim;
        let mut m = SymmetricMatrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                m.set(i, j, s);
            }
        }
        m
    }

    /// `L · z`.
    pub fn mul_vec(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..=i).map(|k| self.get(i, k) * z[k]).sum())
            .collect()
    }

    /// Solves `L · w = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut w = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| self.get(i, k) * w[k]).sum();
            w[i] = (b[i] - s) / self.get(i, i);
        }
        w
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.get(i, i).ln()).sum::<f64>()
    }
}

pub fn cholesky(a: &SymmetricMatrix) -> Result<CholeskyFactor> {
    let n = a.dim();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > PIVOT_TOLERANCE) {
            return Err(Error::NotPositiveDefinite { row: j, pivot: d });
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(CholeskyFactor { dim: n, data: l })
}

/// `mean + L·z` with `z` standard normal.
pub fn sample_mvn(rng: &mut Rng, mean: &[f64], factor: &CholeskyFactor) -> Result<Vec<f64>> {
    if mean.len() != factor.dim() {
        return Err(Error::DimensionMismatch { expected: factor.dim(), got: mean.len() });
    }
    let z = rng.normals(mean.len());
    let lz = factor.mul_vec(&z);
    Ok(mean.iter().zip(lz).map(|(m, d)| m + d).collect())
}

pub fn log_mvn_pdf(x: &[f64], mean: &[f64], factor: &CholeskyFactor) -> Result<f64> {
    let n = factor.dim();
    for len in [x.len(), mean.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let w = factor.solve_lower(&diff);
    let quad: f64 = w.iter().map(|v| v * v).sum();
    Ok(-0.5 * quad - 0.5 * factor.log_det() - 0.5 * n as f64 * LN_2PI)
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = logsumexp(v);
    v.iter().map(|x| x - lse).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Central-difference gradient `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = p.to_vec();
    (0..p.len())
        .map(|i| {
            work[i] = p[i] + h;
            let up = f(&work);
            work[i] = p[i] - h;
            let down = f(&work);
            work[i] = p[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
