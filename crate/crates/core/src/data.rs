//! Marked event records, ingestion, interval computation, log-normalization
//! and dataset splitting.
//!
//! The on-disk format is newline-delimited: one sequence per line, written as
//! `{"seq": [[time, mark], ...]}` with 0-based marks. The number of marks is
//! supplied by the caller, not the file.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Rng;

/// Smallest standard deviation `fit_norm` will report.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkedEvent {
    pub time: f64,
    pub mark: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    events: Vec<MarkedEvent>,
}

impl EventSequence {
    /// Checks strict time ordering, non-negative times and mark range.
    pub fn new(events: Vec<MarkedEvent>, num_marks: usize) -> Result<Self> {
        validate(&events, num_marks, 0)?;
        Ok(Self { events })
    }

    pub fn events(&self) -> &[MarkedEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    pub fn marks(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.mark).collect()
    }

    /// Serializes to one line of the dataset format (no trailing newline).
    pub fn to_line(&self) -> String {
        let mut s = String::from("{\"seq\": [");
        for (i, e) in self.events.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            // `{:?}` prints the shortest representation that parses back exactly
            let _ = write!(s, "[{:?}, {}]", e.time, e.mark);
        }
        s.push_str("]}");
        s
    }

    /// Stable 64-bit FNV-1a digest of times and marks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.events {
            for b in e.time.to_bits().to_le_bytes().into_iter().chain((e.mark as u64).to_le_bytes()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

fn validate(events: &[MarkedEvent], num_marks: usize, line: usize) -> Result<()> {
    let invalid = |msg: String| Error::Validation { line, msg };
    if events.is_empty() {
        return Err(invalid("sequence has no events".into()));
    }
    let mut prev = 0.0_f64;
    for (i, e) in events.iter().enumerate() {
        if !e.time.is_finite() || e.time < 0.0 {
            return Err(invalid(format!("event {i}: time {} must be finite and >= 0", e.time)));
        }
        if e.mark >= num_marks {
            return Err(invalid(format!("event {i}: mark {} >= M = {num_marks}", e.mark)));
        }
        // strict ordering; the first event also has to lie after the origin
        if e.time <= prev {
            return Err(invalid(format!(
                "event {i}: time {} does not strictly follow {}",
                e.time, prev
            )));
        }
        prev = e.time;
    }
    Ok(())
}

/// Inter-event intervals (`τ₁` measured from time 0) with their marks.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalizedSequence {
    pub intervals: Vec<f64>,
    pub marks: Vec<usize>,
}

impl IntervalizedSequence {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Cumulative sums, i.e. the original timestamps.
    pub fn times(&self) -> Vec<f64> {
        self.intervals
            .iter()
            .scan(0.0, |acc, &tau| {
                *acc += tau;
                Some(*acc)
            })
            .collect()
    }
}

pub fn intervalize(seq: &EventSequence) -> IntervalizedSequence {
    let mut prev = 0.0;
    let mut intervals = Vec::with_capacity(seq.len());
    for e in seq.events() {
        intervals.push(e.time - prev);
        prev = e.time;
    }
    IntervalizedSequence { intervals, marks: seq.marks() }
}

/// Mean and population standard deviation of `ln τ` over the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean_log_tau: f64,
    pub std_log_tau: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean_log_tau: 0.0, std_log_tau: 1.0 }
    }

    pub fn normalize(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::NonPositiveInterval(tau));
        }
        Ok((tau.ln() - self.mean_log_tau) / self.std_log_tau)
    }

    /// Inverse of [`NormStats::normalize`]; always positive.
    pub fn denormalize(&self, z: f64) -> f64 {
        (self.mean_log_tau + z * self.std_log_tau).exp()
    }
}

pub fn fit_norm(train: &[IntervalizedSequence]) -> Result<NormStats> {
    let logs: Vec<f64> = train
        .iter()
        .flat_map(|s| s.intervals.iter())
        .map(|&tau| if tau > 0.0 { Ok(tau.ln()) } else { Err(Error::NonPositiveInterval(tau)) })
        .collect::<Result<_>>()?;
    if logs.is_empty() {
        return Err(Error::EmptyData("no intervals to fit normalization on"));
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(NormStats { mean_log_tau: mean, std_log_tau: var.sqrt().max(STD_FLOOR) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub num_marks: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_marks: usize) -> Self {
        Self { sequences, num_marks, split: Split::All }
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    pub fn intervalized(&self) -> Vec<IntervalizedSequence> {
        self.sequences.iter().map(intervalize).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for seq in &self.sequences {
            s.push_str(&seq.to_line());
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn load_dataset(path: &Path, num_marks: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, num_marks)
}

/// Parses the newline-delimited format; blank lines are skipped.
pub fn parse_dataset(text: &str, num_marks: usize) -> Result<Dataset> {
    if num_marks == 0 {
        return Err(Error::InvalidArgument("number of marks must be positive".into()));
    }
    let mut sequences = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let events = parse_record(raw, line)?;
        validate(&events, num_marks, line)?;
        sequences.push(EventSequence { events });
    }
    Ok(Dataset::new(sequences, num_marks))
}

fn parse_record(raw: &str, line: usize) -> Result<Vec<MarkedEvent>> {
    let err = |msg: &str| Error::Parse { line, msg: msg.to_string() };
    let mut p = Cursor { s: raw.as_bytes(), pos: 0 };
    p.expect(b'{').map_err(|_| err("expected '{'"))?;
    let key = p.string().map_err(|_| err("expected key \"seq\""))?;
    if key != "seq" {
        return Err(err(&format!("unknown field \"{key}\", expected \"seq\"")));
    }
    p.expect(b':').map_err(|_| err("expected ':'"))?;
    p.expect(b'[').map_err(|_| err("expected '[' opening the event list"))?;
    let mut events = Vec::new();
    if !p.peek_is(b']') {
        loop {
            p.expect(b'[').map_err(|_| err("expected '[' opening an event"))?;
            let time = p.number().map_err(|_| err("bad event time"))?;
            p.expect(b',').map_err(|_| err("expected ',' between time and mark"))?;
            let mark = p.number().map_err(|_| err("bad event mark"))?;
            p.expect(b']').map_err(|_| err("expected ']' closing an event"))?;
            if mark < 0.0 || mark.fract() != 0.0 || mark > u32::MAX as f64 {
                return Err(err(&format!("mark {mark} is not a nonnegative integer")));
            }
            events.push(MarkedEvent { time, mark: mark as usize });
            if p.peek_is(b',') {
                p.expect(b',').unwrap();
            } else {
                break;
            }
        }
    }
    p.expect(b']').map_err(|_| err("expected ']' closing the event list"))?;
    p.expect(b'}').map_err(|_| err("expected '}'"))?;
    if !p.at_end() {
        return Err(err("trailing characters after record"));
    }
    Ok(events)
}

struct Cursor<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek_is(&mut self, c: u8) -> bool {
        self.skip_ws();
        self.s.get(self.pos) == Some(&c)
    }

    fn expect(&mut self, c: u8) -> std::result::Result<(), ()> {
        if self.peek_is(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(())
        }
    }

    fn string(&mut self) -> std::result::Result<String, ()> {
        self.expect(b'"')?;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != b'"' {
            self.pos += 1;
        }
        if self.pos >= self.s.len() {
            return Err(());
        }
        let out = std::str::from_utf8(&self.s[start..self.pos]).map_err(|_| ())?.to_string();
        self.pos += 1;
        Ok(out)
    }

    fn number(&mut self) -> std::result::Result<f64, ()> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len()
            && matches!(self.s[self.pos], b'0'..=b'9' | b'-' | b'+' | b'.' | b'e' | b'E')
        {
            self.pos += 1;
        }
        let tok = std::str::from_utf8(&self.s[start..self.pos]).map_err(|_| ())?;
        let v: f64 = tok.parse().map_err(|_| ())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(())
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.s.len()
    }
}

/// Shuffles sequence order with `rng` and partitions it by the given
/// fractions. Sizes are rounded for train and validation; test takes the rest.
pub fn split(
    data: &Dataset,
    fractions: (f64, f64, f64),
    rng: &mut Rng,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    let ok = [a, b, c].iter().all(|f| f.is_finite() && *f >= 0.0)
        && a > 0.0
        && (a + b + c - 1.0).abs() < 1e-9;
    if !ok {
        return Err(Error::BadFractions(fractions));
    }
    let n = data.sequences.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize], split: Split| Dataset {
        sequences: idx.iter().map(|&i| data.sequences[i].clone()).collect(),
        num_marks: data.num_marks,
        split,
    };
    Ok((
        take(&order[..n_train], Split::Train),
        take(&order[n_train..n_train + n_val], Split::Validation),
        take(&order[n_train + n_val..], Split::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(times: &[f64], marks: &[usize], m: usize) -> EventSequence {
        let ev = times.iter().zip(marks).map(|(&time, &mark)| MarkedEvent { time, mark }).collect();
        EventSequence::new(ev, m).unwrap()
    }

    #[test]
    fn parses_minimal_record() {
        let d = parse_dataset("{\"seq\": [[0.5, 0], [1.2, 2]]}\n", 3).unwrap();
        assert_eq!(d.sequences.len(), 1);
        assert_eq!(d.sequences[0].len(), 2);
        assert_eq!(d.sequences[0].events()[1], MarkedEvent { time: 1.2, mark: 2 });
    }

    #[test]
    fn rejects_non_strict_times() {
        let e = parse_dataset("{\"seq\": [[1.0, 0], [1.0, 1]]}", 2).unwrap_err();
        assert!(matches!(e, Error::Validation { line: 1, .. }));
    }

    #[test]
    fn rejects_mark_out_of_range_and_zero_first_time() {
        assert!(matches!(
            parse_dataset("{\"seq\": [[1.0, 3]]}", 3),
            Err(Error::Validation { .. })
        ));
        assert!(matches!(
            parse_dataset("{\"seq\": [[0.0, 0], [1.0, 0]]}", 1),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn malformed_lines_are_parse_errors() {
        for bad in [
            "{\"seq\": [[1.0, 0]",
            "{\"sequence\": [[1.0, 0]]}",
            "{\"seq\": [[1.0 0]]}",
            "{\"seq\": [[1.0, 0.5]]}",
            "{\"seq\": [[abc, 0]]}",
            "[1.0, 0]",
        ] {
            let text = format!("{{\"seq\": [[0.1, 0]]}}\n{bad}\n");
            match parse_dataset(&text, 2) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 2, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn count_matches_lines() {
        let text = "{\"seq\": [[1, 0]]}\n{\"seq\": [[1, 1], [2, 0]]}\n\n{\"seq\": [[3, 1]]}\n";
        let d = parse_dataset(text, 2).unwrap();
        assert_eq!(d.sequences.len(), 3);
        assert_eq!(d.num_events(), 4);
    }

    #[test]
    fn text_round_trip() {
        let d = Dataset::new(vec![seq(&[0.1, 0.30000000000000004, 7.25e-3 + 1.0], &[0, 1, 1], 2)], 2);
        let back = parse_dataset(&d.to_text(), 2).unwrap();
        assert_eq!(back.sequences, d.sequences);
    }

    #[test]
    fn intervalize_examples() {
        let s = seq(&[1.0, 3.0, 6.0], &[0, 0, 0], 1);
        assert_eq!(intervalize(&s).intervals, vec![1.0, 2.0, 3.0]);
        let s = seq(&[5.0], &[0], 1);
        assert_eq!(intervalize(&s).intervals, vec![5.0]);
    }

    #[test]
    fn fit_norm_examples() {
        let e = std::f64::consts::E;
        let all_e = IntervalizedSequence { intervals: vec![e; 4], marks: vec![0; 4] };
        let s = fit_norm(&[all_e]).unwrap();
        assert!((s.mean_log_tau - 1.0).abs() < 1e-15);
        assert_eq!(s.std_log_tau, STD_FLOOR);

        let two = IntervalizedSequence { intervals: vec![1.0, e * e], marks: vec![0, 0] };
        let s = fit_norm(&[two]).unwrap();
        assert!((s.mean_log_tau - 1.0).abs() < 1e-15);
        assert!((s.std_log_tau - 1.0).abs() < 1e-15);

        assert!(matches!(fit_norm(&[]), Err(Error::EmptyData(_))));
    }

    #[test]
    fn normalize_examples() {
        let s = NormStats::identity();
        assert_eq!(s.normalize(1.0).unwrap(), 0.0);
        assert!(s.denormalize(-50.0) > 0.0);
        assert!(matches!(s.normalize(0.0), Err(Error::NonPositiveInterval(_))));
        assert!(matches!(s.normalize(-1.0), Err(Error::NonPositiveInterval(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let seqs: Vec<_> = (0..10).map(|i| seq(&[1.0 + i as f64], &[0], 1)).collect();
        let d = Dataset::new(seqs, 1);
        let (tr, va, te) = split(&d, (0.8, 0.1, 0.1), &mut Rng::new(3)).unwrap();
        assert_eq!((tr.sequences.len(), va.sequences.len(), te.sequences.len()), (8, 1, 1));
        let (tr2, _, _) = split(&d, (0.8, 0.1, 0.1), &mut Rng::new(3)).unwrap();
        assert_eq!(tr.sequences, tr2.sequences);
        assert_eq!(tr.split, Split::Train);

        let mut all: Vec<f64> = tr
            .sequences
            .iter()
            .chain(&va.sequences)
            .chain(&te.sequences)
            .map(|s| s.events()[0].time)
            .collect();
        all.sort_by(f64::total_cmp);
        let orig: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let d = Dataset::new(vec![], 1);
        for f in [(0.5, 0.5, 0.5), (0.0, 0.5, 0.5), (1.2, -0.1, -0.1)] {
            assert!(matches!(split(&d, f, &mut Rng::new(0)), Err(Error::BadFractions(_))));
        }
    }
}
