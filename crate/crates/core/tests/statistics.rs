//! Distributional checks against independent oracles.

mod common;

use common::*;
use statrs::distribution::{ContinuousCDF, Discrete, Exp, Normal, Poisson};

use markflow::continuous::{bayes_update_cont, sender_sample_cont, ContinuousParams};
use markflow::data::{fit_norm, intervalize, Dataset, NormStats};
use markflow::discrete::{alpha_step_disc, bayes_update_disc, sender_mean, sender_sample_disc, CategoricalParams};
use markflow::encoder::encode_history;
use markflow::hawkes::{simulate, simulate_dataset, HawkesSpec};
use markflow::joint::{joint_receiver_logpdf, joint_sender_sample, JointCovariance};
use markflow::math::Rng;
use markflow::sample::{generate_next, generate_traced, SampleConfig};
use markflow::train::{train, ModelState, OptimizerKind, TrainConfig};

#[test]
fn poisson_counts_follow_the_poisson_law() {
    let (rate, horizon) = (1.5, 4.0);
    let spec = HawkesSpec::poisson(rate, horizon);
    let root = Rng::new(11);
    let counts: Vec<usize> = (0..500).map(|i| simulate(&spec, &mut root.fork(i)).unwrap().len()).collect();
    let mean_count = counts.iter().sum::<usize>() as f64 / 500.0;
    assert!((mean_count - rate * horizon).abs() < 4.0 * (rate * horizon / 500.0).sqrt(), "{mean_count}");

    // bins 0..=2, 3, ..., 9, 10+ keep every expected count above 5
    let law = Poisson::new(rate * horizon).unwrap();
    let edges: Vec<(usize, usize)> = std::iter::once((0, 2)).chain((3..=9).map(|k| (k, k))).chain([(10, usize::MAX)]).collect();
    let observed: Vec<f64> =
        edges.iter().map(|&(lo, hi)| counts.iter().filter(|&&c| c >= lo && c <= hi).count() as f64).collect();
    let expected: Vec<f64> = edges
        .iter()
        .map(|&(lo, hi)| {
            let p: f64 = if hi == usize::MAX {
                1.0 - (0..lo).map(|k| law.pmf(k as u64)).sum::<f64>()
            } else {
                (lo..=hi).map(|k| law.pmf(k as u64)).sum()
            };
            500.0 * p
        })
        .collect();
    assert!(chi_square_p(&observed, &expected, 0) > 0.01);
}

#[test]
fn thinning_gives_exponential_waits_without_excitation() {
    let spec = HawkesSpec::poisson(2.0, 200.0);
    let mut rng = Rng::new(5);
    let mut waits = Vec::new();
    while waits.len() < 10_000 {
        let events = simulate(&spec, &mut rng).unwrap();
        let mut prev = 0.0;
        for e in events {
            waits.push(e.time - prev);
            prev = e.time;
        }
    }
    waits.truncate(10_000);
    let law = Exp::new(2.0).unwrap();
    assert!(ks_one_sample(&waits, |x| law.cdf(x)) > 0.01);
}

fn waits_after(data: &Dataset, mark: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for seq in &data.sequences {
        let iv = intervalize(seq);
        for i in 1..iv.len() {
            if iv.marks[i - 1] == mark {
                out.push(iv.intervals[i]);
            }
        }
    }
    out
}

#[test]
fn coupling_lengthens_waits_after_the_slow_mark() {
    let spec = HawkesSpec {
        base_rates: vec![0.5, 0.5],
        excitation: vec![vec![0.2, 0.1], vec![0.1, 0.2]],
        decay: 1.0,
        horizon: 20.0,
        coupling_scales: vec![0.2, 5.0],
    };
    let data = Dataset::new(simulate_dataset(&spec, 200, 2, &Rng::new(8)).unwrap(), 2);
    let slow = waits_after(&data, 1);
    let fast = waits_after(&data, 0);
    assert!(welch_greater(&slow, &fast) < 0.01);
}

/// Plug-in mutual information between a mark and the quartile of the next wait.
fn mark_wait_information(marks: &[usize], waits: &[f64]) -> f64 {
    let mut sorted = waits.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p) as usize];
    let cuts = [q(0.25), q(0.5), q(0.75)];
    let bin = |w: f64| cuts.iter().filter(|&&c| w > c).count();
    let n = marks.len() as f64;
    let mut joint = [[0.0; 4]; 2];
    for (&m, &w) in marks.iter().zip(waits) {
        joint[m][bin(w)] += 1.0 / n;
    }
    let pm: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pw: Vec<f64> = (0..4).map(|b| joint[0][b] + joint[1][b]).collect();
    let mut mi = 0.0;
    for m in 0..2 {
        for b in 0..4 {
            if joint[m][b] > 0.0 {
                mi += joint[m][b] * (joint[m][b] / (pm[m] * pw[b])).ln();
            }
        }
    }
    mi
}

#[test]
fn coupled_generator_has_mark_interval_dependence() {
    let data = coupled_data(200, 3);
    let (mut marks, mut waits) = (Vec::new(), Vec::new());
    for seq in &data.sequences {
        let iv = intervalize(seq);
        for i in 1..iv.len() {
            marks.push(iv.marks[i - 1]);
            waits.push(iv.intervals[i]);
        }
    }
    let observed = mark_wait_information(&marks, &waits);
    let mut rng = Rng::new(4);
    let mut exceed = 0;
    for _ in 0..200 {
        let mut shuffled = marks.clone();
        rng.shuffle(&mut shuffled);
        if mark_wait_information(&shuffled, &waits) >= observed {
            exceed += 1;
        }
    }
    assert!((exceed as f64 + 1.0) / 201.0 < 0.01, "permutation exceedances {exceed}");
}

#[test]
fn all_generated_sequences_are_valid() {
    let data = coupled_data(100, 12);
    for seq in &data.sequences {
        let times = seq.times();
        assert!(times[0] > 0.0 && times.windows(2).all(|w| w[0] < w[1]));
        assert!(seq.marks().iter().all(|&m| m < 2));
    }
}

#[test]
fn continuous_updates_compose_like_their_summed_accuracy() {
    let (tau, a1, a2) = (0.4, 0.7, 2.3);
    let mut rng = Rng::new(21);
    let (mut two, mut one) = (Vec::new(), Vec::new());
    for _ in 0..10_000 {
        let mut p = ContinuousParams::PRIOR;
        p = bayes_update_cont(p, sender_sample_cont(tau, a1, &mut rng).unwrap(), a1).unwrap();
        p = bayes_update_cont(p, sender_sample_cont(tau, a2, &mut rng).unwrap(), a2).unwrap();
        two.push(p.mu);
        let q = bayes_update_cont(ContinuousParams::PRIOR, sender_sample_cont(tau, a1 + a2, &mut rng).unwrap(), a1 + a2).unwrap();
        one.push(q.mu);
        assert!((p.rho - q.rho).abs() < 1e-12);
    }
    assert!(ks_two_sample(&two, &one) > 0.01);
}

#[test]
fn discrete_updates_compose_like_their_summed_accuracy() {
    let (mark, m, a1, a2) = (1, 3, 0.4, 1.1);
    let mut rng = Rng::new(22);
    let mut two = vec![Vec::new(); m];
    let mut one = vec![Vec::new(); m];
    for _ in 0..10_000 {
        let mut p = CategoricalParams::uniform(m);
        p = bayes_update_disc(&p, &sender_sample_disc(mark, a1, m, &mut rng).unwrap()).unwrap();
        p = bayes_update_disc(&p, &sender_sample_disc(mark, a2, m, &mut rng).unwrap()).unwrap();
        let q = bayes_update_disc(&CategoricalParams::uniform(m), &sender_sample_disc(mark, a1 + a2, m, &mut rng).unwrap())
            .unwrap();
        for j in 0..m {
            two[j].push(p.probs()[j]);
            one[j].push(q.probs()[j]);
        }
    }
    for j in 0..m {
        assert!(ks_two_sample(&two[j], &one[j]) > 0.01, "coordinate {j}");
    }
}

#[test]
fn joint_sender_marginals_match_the_separate_senders() {
    let (tau, mark, ac, ad) = (0.3, 2, 4.0, 0.5);
    let c = [0.6, -0.5, 0.4];
    let cov = JointCovariance::new(ac, ad, &c).unwrap();
    let mut rng = Rng::new(23);
    let n = 20_000;
    let mut ys = Vec::with_capacity(n);
    let mut ym = vec![Vec::with_capacity(n); 3];
    for _ in 0..n {
        let (a, b) = joint_sender_sample(tau, mark, &cov, &mut rng).unwrap();
        ys.push(a);
        for j in 0..3 {
            ym[j].push(b[j]);
        }
    }
    let law = Normal::new(tau, (1.0 / ac).sqrt()).unwrap();
    assert!(ks_one_sample(&ys, |x| law.cdf(x)) > 0.01);
    let means = sender_mean(mark, ad, 3);
    for j in 0..3 {
        let law = Normal::new(means[j], (ad * 3.0).sqrt()).unwrap();
        assert!(ks_one_sample(&ym[j], |x| law.cdf(x)) > 0.01, "mark block {j}");
    }
}

#[test]
fn receiver_density_integrates_to_one_for_one_mark() {
    // with M = 1 the mark block is a single coordinate around 0
    let cov = JointCovariance::new(2.0, 0.8, &[0.5]).unwrap();
    let (sd_t, sd_m) = ((1.0 / 2.0f64).sqrt(), (0.8f64).sqrt());
    let n = 801;
    let (lo_t, hi_t) = (0.1 - 10.0 * sd_t, 0.1 + 10.0 * sd_t);
    let (lo_m, hi_m) = (-10.0 * sd_m, 10.0 * sd_m);
    let (dt, dm) = ((hi_t - lo_t) / (n - 1) as f64, (hi_m - lo_m) / (n - 1) as f64);
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let y = [lo_t + i as f64 * dt, lo_m + j as f64 * dm];
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            mass += w * joint_receiver_logpdf(&y, 0.1, &[1.0], &cov).unwrap().exp();
        }
    }
    assert!((mass * dt * dm - 1.0).abs() < 1e-4, "{}", mass * dt * dm);
}

fn untrained(joint_noise: bool, c_raw: &[f64]) -> ModelState {
    let cfg = TrainConfig { embed_dim: 8, joint_noise, seed: 2, ..TrainConfig::default() };
    let mut s = ModelState::init(c_raw.len(), NormStats::identity(), cfg).unwrap();
    let id = s.model.c_raw;
    s.model.params.get_mut(id).data = c_raw.to_vec();
    s
}

#[test]
fn sampling_without_joint_noise_matches_zero_c() {
    let off = untrained(false, &[0.9, -0.4]);
    let zero = untrained(true, &[0.0, 0.0]);
    let h = encode_history(&off.model, &[(0.2, 1)]).unwrap().pop().unwrap();
    let cfg = SampleConfig { steps: 20, ..SampleConfig::default() };
    let draw = |s: &ModelState, seed| {
        let mut rng = Rng::new(seed);
        (0..10_000).map(|_| generate_next(&h, s, &cfg, &mut rng).unwrap().tau).collect::<Vec<_>>()
    };
    let a = draw(&off, 1);
    let b = draw(&zero, 2);
    assert!(ks_two_sample(&a, &b) > 0.01);
}

/// Replays the generation loop with a model that predicts its own input,
/// `p_O = θ`. Marks are drawn from the current belief and the update is the
/// exact posterior, so the expected entropy cannot increase from step to step.
#[test]
fn uninformed_generation_never_gains_entropy_on_average() {
    let (m, steps, beta1) = (4, 20, 3.0);
    let runs = 1000;
    let mut per_run = vec![vec![0.0; steps + 1]; runs];
    let mut rng = Rng::new(31);
    for run in per_run.iter_mut() {
        let mut theta = CategoricalParams::uniform(m);
        run[0] = theta.entropy();
        for k in 1..=steps {
            let mark = rng.categorical(theta.probs());
            let alpha = alpha_step_disc(k, steps, beta1).unwrap();
            theta = bayes_update_disc(&theta, &sender_sample_disc(mark, alpha, m, &mut rng).unwrap()).unwrap();
            run[k] = theta.entropy();
        }
    }
    for k in 1..=steps {
        let diffs: Vec<f64> = per_run.iter().map(|r| r[k] - r[k - 1]).collect();
        let se = (variance(&diffs) / runs as f64).sqrt();
        assert!(mean(&diffs) <= 3.0 * se, "step {k}: mean change {} (se {se})", mean(&diffs));
    }
    assert!(mean(&per_run.iter().map(|r| r[steps]).collect::<Vec<_>>()) < (m as f64).ln() - 0.1);
}

#[test]
fn trained_mark_prediction_ends_sharper_than_it_starts() {
    // every event has mark 0
    let seqs: Vec<_> = (0..40)
        .map(|i| {
            let events = (1..=5)
                .map(|k| markflow::data::MarkedEvent { time: k as f64 * (1.0 + 0.01 * i as f64), mark: 0 })
                .collect();
            markflow::data::EventSequence::new(events, 3).unwrap()
        })
        .collect();
    let data = Dataset::new(seqs, 3);
    let cfg = TrainConfig {
        epochs: 40,
        lr: 3e-3,
        steps: 20,
        embed_dim: 8,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let (state, _) = train(&data, &cfg).unwrap();
    assert_eq!(state.norm, fit_norm(&data.intervalized()).unwrap());
    let h = encode_history(&state.model, &[]).unwrap().pop().unwrap();
    let scfg = SampleConfig { steps: 20, ..SampleConfig::default() };
    let mut entropy = vec![0.0; 20];
    let mut rng = Rng::new(6);
    let mut marks = 0;
    for _ in 0..1000 {
        let g = generate_traced(&h, &state, &scfg, &mut rng, |k, out| entropy[k - 1] += out.probs.entropy() / 1000.0).unwrap();
        marks += (g.mark == 0) as usize;
    }
    assert!(entropy[19] < entropy[0], "{entropy:?}");
    assert_eq!(marks, 1000);
}
