//! Statistical oracles shared by the integration suites.
#![allow(dead_code)]

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use markflow::data::Dataset;
use markflow::hawkes::{simulate_dataset, HawkesSpec};
use markflow::math::Rng;

/// Asymptotic Kolmogorov tail `Q(λ) = 2 Σ (−1)^{k−1} exp(−2k²λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn ks_p(d: f64, n_eff: f64) -> f64 {
    let r = n_eff.sqrt();
    kolmogorov_q((r + 0.12 + 0.11 / r) * d)
}

/// Two-sample Kolmogorov–Smirnov p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    ks_p(d, na * nb / (na + nb))
}

/// One-sample Kolmogorov–Smirnov p-value against `cdf`.
pub fn ks_one_sample(x: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let s = sorted(x);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    ks_p(d, n)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// One-sided Welch test of `mean(a) > mean(b)`; returns the p-value.
pub fn welch_greater(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let t = (mean(a) - mean(b)) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t)
}

/// Pearson χ² goodness-of-fit p-value for observed counts against expected
/// counts; `fitted` parameters reduce the degrees of freedom.
pub fn chi_square_p(observed: &[f64], expected: &[f64], fitted: usize) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    let df = (observed.len() - 1 - fitted) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

/// The two-mark cross-excitation process used by the learning checks: mark 0
/// shortens the next wait five-fold and excites mark 1, mark 1 lengthens it.
pub fn coupled_spec() -> HawkesSpec {
    HawkesSpec {
        base_rates: vec![0.3, 0.02],
        excitation: vec![vec![0.0, 0.0], vec![0.9, 0.0]],
        decay: 1.0,
        horizon: 25.0,
        coupling_scales: vec![0.2, 5.0],
    }
}

pub fn coupled_data(count: usize, seed: u64) -> Dataset {
    Dataset::new(simulate_dataset(&coupled_spec(), count, 3, &Rng::new(seed)).unwrap(), 2)
}
