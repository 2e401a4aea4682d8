//! Next-event metrics: MAPE and sample-based CRPS on raw intervals, and mark
//! accuracy, aggregated over a test split.

use rayon::prelude::*;

use crate::data::{intervalize, Dataset};
use crate::encoder::encode_history;
use crate::error::{Error, Result};
use crate::math::Rng;
use crate::sample::{predict_point, SampleConfig};
use crate::train::{vlb, ModelState};

/// `100 · mean(|pred − truth| / truth)`.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: pred.len() });
    }
    if truth.is_empty() {
        return Err(Error::EmptyData("no predictions for MAPE"));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if !(*t > 0.0) {
            return Err(Error::NonPositiveInterval(*t));
        }
        sum += (p - t).abs() / t;
    }
    Ok(100.0 * sum / truth.len() as f64)
}

/// `(1/L)Σ|x_l − y| − (1/2L²)ΣΣ|x_l − x_g|` in `O(L log L)`: with the draws
/// sorted, the pair sum equals `2Σ_i x_(i)(2i − L + 1)` (0-based `i`).
pub fn crps(samples: &[f64], truth: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyData("CRPS needs at least one sample"));
    }
    let l = samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let first = sorted.iter().map(|x| (x - truth).abs()).sum::<f64>() / l;
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - l + 1.0))
        .sum::<f64>()
        / (l * l);
    Ok((first - spread).max(0.0))
}

/// The quadratic reference evaluation of [`crps`].
pub fn crps_direct(samples: &[f64], truth: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyData("CRPS needs at least one sample"));
    }
    let l = samples.len() as f64;
    let first = samples.iter().map(|x| (x - truth).abs()).sum::<f64>() / l;
    let pairs: f64 = samples.iter().map(|a| samples.iter().map(|b| (a - b).abs()).sum::<f64>()).sum();
    Ok(first - pairs / (2.0 * l * l))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: pred.len() });
    }
    if truth.is_empty() {
        return Err(Error::EmptyData("no predictions for accuracy"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Percent.
    pub mape: f64,
    pub crps: f64,
    pub acc: f64,
    /// Nats per event.
    pub vlb: Option<f64>,
    pub num_events: usize,
    pub num_sequences: usize,
}

impl EvalReport {
    /// One machine-readable line.
    pub fn json_line(&self) -> String {
        let vlb = self.vlb.map_or_else(|| "null".to_string(), |v| format!("{v:?}"));
        format!(
            "{{\"mape\": {:?}, \"crps\": {:?}, \"acc\": {:?}, \"vlb\": {vlb}, \"events\": {}, \"sequences\": {}}}",
            self.mape, self.crps, self.acc, self.num_events, self.num_sequences
        )
    }

    pub fn table(&self) -> String {
        let vlb = self.vlb.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        format!(
            "metric     value\nMAPE(%)    {:.4}\nCRPS       {:.6}\nACC        {:.4}\nVLB        {vlb}\nevents     {}\nsequences  {}\n",
            self.mape, self.crps, self.acc, self.num_events, self.num_sequences
        )
    }
}

/// Per-event evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct EventOutcome {
    pub sequence_hash: u64,
    pub index: usize,
    pub true_tau: f64,
    pub true_mark: usize,
    pub pred_tau: f64,
    pub pred_mark: usize,
    pub crps: f64,
    pub draws: Vec<f64>,
}

/// Predicts every event of every sequence from its prefix. Each sequence's
/// generator is forked from the seed by the sequence's content hash and the
/// records are sorted, so results do not depend on sequence order.
pub fn predict_events(data: &Dataset, state: &ModelState, cfg: &SampleConfig) -> Result<Vec<EventOutcome>> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let per_seq: Vec<Result<Vec<EventOutcome>>> = data
        .sequences
        .par_iter()
        .map(|seq| {
            let hash = seq.content_hash();
            let mut rng = root.fork(hash);
            let events = state.normalize_events(seq)?;
            let hist = encode_history(&state.model, &events)?;
            let iv = intervalize(seq);
            let mut out = Vec::with_capacity(events.len());
            for i in 0..events.len() {
                let p = predict_point(&hist[i], state, cfg, &mut rng)?;
                out.push(EventOutcome {
                    sequence_hash: hash,
                    index: i,
                    true_tau: iv.intervals[i],
                    true_mark: iv.marks[i],
                    pred_tau: p.tau,
                    pred_mark: p.mark,
                    crps: crps(&p.draws, iv.intervals[i])?,
                    draws: p.draws,
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_seq {
        all.extend(r?);
    }
    all.sort_by(|a, b| (a.sequence_hash, a.index).cmp(&(b.sequence_hash, b.index)));
    Ok(all)
}

/// MAPE, CRPS and ACC over all test events, plus the variational bound.
pub fn evaluate(data: &Dataset, state: &ModelState, cfg: &SampleConfig) -> Result<EvalReport> {
    if data.sequences.is_empty() {
        return Err(Error::EmptyData("test split has no sequences"));
    }
    let outcomes = predict_events(data, state, cfg)?;
    let pred: Vec<f64> = outcomes.iter().map(|o| o.pred_tau).collect();
    let truth: Vec<f64> = outcomes.iter().map(|o| o.true_tau).collect();
    let pred_marks: Vec<usize> = outcomes.iter().map(|o| o.pred_mark).collect();
    let true_marks: Vec<usize> = outcomes.iter().map(|o| o.true_mark).collect();
    Ok(EvalReport {
        mape: mape(&pred, &truth)?,
        crps: outcomes.iter().map(|o| o.crps).sum::<f64>() / outcomes.len() as f64,
        acc: accuracy(&pred_marks, &true_marks)?,
        vlb: Some(vlb(data, state, &Rng::new(cfg.seed).fork(u64::MAX))?),
        num_events: outcomes.len(),
        num_sequences: data.sequences.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mape(&[2.0], &[1.0]).unwrap(), 100.0);
        assert_eq!(mape(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 50.0);
        assert!(matches!(mape(&[1.0], &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(mape(&[1.0], &[0.0]), Err(Error::NonPositiveInterval(_))));
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps(&[1.5; 4], 1.5).unwrap(), 0.0);
        assert!((crps(&[0.0, 2.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((crps_direct(&[0.0, 2.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(crps(&[], 0.0).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }
}
