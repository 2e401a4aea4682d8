use proptest::prelude::*;

use markflow::checkpoint::Checkpoint;
use markflow::config::parse_config_str;
use markflow::continuous::{bayes_update_cont, ContinuousParams};
use markflow::data::{intervalize, split, Dataset, EventSequence, MarkedEvent, NormStats};
use markflow::discrete::{bayes_update_disc, CategoricalParams};
use markflow::encoder::encode_history;
use markflow::joint::{build_joint_cov, constrain_c, JointCovariance};
use markflow::math::{cholesky, log_softmax, Rng, SymmetricMatrix};
use markflow::metrics::{crps, crps_direct};
use markflow::train::{ModelState, TrainConfig};

fn sequence(max_len: usize, num_marks: usize) -> impl Strategy<Value = EventSequence> {
    prop::collection::vec((0.01f64..5.0, 0..num_marks), 1..max_len).prop_map(move |gaps| {
        let mut t = 0.0;
        let events = gaps
            .into_iter()
            .map(|(g, mark)| {
                t += g;
                MarkedEvent { time: t, mark }
            })
            .collect();
        EventSequence::new(events, num_marks).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn continuous_update_is_the_gaussian_posterior(mu in -5.0f64..5.0, rho in 0.1f64..1e4, y in -5.0f64..5.0, alpha in 1e-3f64..1e4) {
        let p = bayes_update_cont(ContinuousParams { mu, rho }, y, alpha).unwrap();
        // posterior of N(τ; μ, 1/ρ)·N(y; τ, 1/α) in variance form
        let (v0, v1) = (1.0 / rho, 1.0 / alpha);
        let var = v0 * v1 / (v0 + v1);
        let mean = (mu * v1 + y * v0) / (v0 + v1);
        prop_assert!((p.rho - 1.0 / var).abs() <= 1e-9 * p.rho);
        prop_assert!((p.mu - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
    }

    #[test]
    fn discrete_update_stays_on_the_simplex(logits in prop::collection::vec(-30.0f64..30.0, 2..12), scale in 0.0f64..200.0, seed in any::<u64>()) {
        let m = logits.len();
        let p = CategoricalParams::from_logits(&logits);
        let y = Rng::new(seed).normals(m).iter().map(|z| scale * z).collect::<Vec<_>>();
        let q = bayes_update_disc(&p, &y).unwrap();
        prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(q.probs().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn constrained_c_always_factorizes(raw in prop::collection::vec(-1e3f64..1e3, 1..8), log_alpha in -5.0f64..5.0, log_ratio in -6.0f64..6.0) {
        let c = constrain_c(&raw);
        prop_assert!(c.iter().map(|x| x * x).sum::<f64>() < raw.len() as f64);
        let alpha = 10f64.powf(log_alpha);
        prop_assert!(cholesky(&build_joint_cov(alpha, raw.len(), &c).unwrap()).is_ok());
        let cov = JointCovariance::new(alpha, alpha * 10f64.powf(log_ratio), &c).unwrap();
        prop_assert!(cov.schur() > 0.0);
        // diagonal rescaling removes the accuracies and leaves the correlation form
        let a = cov.matrix().to_dense();
        let n = raw.len() + 1;
        let d: Vec<f64> = (0..n).map(|i| a[i * n + i].sqrt()).collect();
        let corr: Vec<f64> = (0..n * n).map(|k| a[k] / (d[k / n] * d[k % n])).collect();
        prop_assert!(cholesky(&SymmetricMatrix::from_dense(n, &corr).unwrap()).is_ok());
    }

    #[test]
    fn cholesky_reconstructs_pd_matrices(entries in prop::collection::vec(-3.0f64..3.0, 1..50), ridge in 1e-3f64..2.0) {
        let n = (entries.len() as f64).sqrt() as usize;
        prop_assume!(n >= 1);
        let b = &entries[..n * n];
        let mut dense = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                dense[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>() + if i == j { ridge } else { 0.0 };
            }
        }
        let a = SymmetricMatrix::from_dense(n, &dense).unwrap();
        let l = cholesky(&a).unwrap();
        let back = l.reconstruct().to_dense();
        let err: f64 = back.iter().zip(&dense).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err / a.frobenius_norm() < 1e-10);
    }

    #[test]
    fn crps_fast_path_matches_direct_sum(samples in prop::collection::vec(-50.0f64..50.0, 1..60), truth in -60.0f64..60.0) {
        let fast = crps(&samples, truth).unwrap();
        let direct = crps_direct(&samples, truth).unwrap();
        prop_assert!((fast - direct).abs() < 1e-10 * (1.0 + direct.abs()));
        prop_assert!(fast >= 0.0);
    }

    #[test]
    fn log_softmax_is_shift_invariant(v in prop::collection::vec(-100.0f64..100.0, 2..64), shift in -1e3f64..1e3) {
        let a = log_softmax(&v);
        let b = log_softmax(&v.iter().map(|x| x + shift).collect::<Vec<_>>());
        prop_assert!((a.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn normalization_round_trips(tau in 1e-8f64..1e8, mean in -5.0f64..5.0, sd in 1e-3f64..5.0) {
        let s = NormStats { mean_log_tau: mean, std_log_tau: sd };
        let back = s.denormalize(s.normalize(tau).unwrap());
        prop_assert!((back - tau).abs() <= 1e-10 * tau);
    }

    #[test]
    fn intervals_sum_back_to_times(seq in sequence(30, 4)) {
        let iv = intervalize(&seq);
        prop_assert!(iv.intervals.iter().all(|&x| x > 0.0));
        let mut t = 0.0;
        for (x, e) in iv.intervals.iter().zip(seq.events()) {
            t += x;
            prop_assert!((t - e.time).abs() < 1e-12 * (1.0 + e.time));
        }
    }

    #[test]
    fn split_partitions_the_sequences(seqs in prop::collection::vec(sequence(5, 2), 1..40), seed in any::<u64>(), a in 0.1f64..0.9) {
        let data = Dataset::new(seqs, 2);
        let rest = 1.0 - a;
        let (tr, va, te) = split(&data, (a, rest / 2.0, rest / 2.0), &mut Rng::new(seed)).unwrap();
        let mut all: Vec<String> = tr.sequences.iter().chain(&va.sequences).chain(&te.sequences).map(|s| s.to_line()).collect();
        let mut orig: Vec<String> = data.sequences.iter().map(|s| s.to_line()).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn config_text_round_trips(epochs in 1usize..1000, lr in 1e-6f64..1.0, steps in 1usize..500, sigma1 in 1e-4f64..0.9, seeds in prop::collection::vec(any::<u64>(), 0..4), adam in any::<bool>()) {
        let text = format!(
            "epochs = {epochs}\nlr = {lr:?}\nsteps = {steps}\nsigma1 = {sigma1:?}\noptimizer = {}\nseeds = {}\n",
            if adam { "adam" } else { "sgd" },
            seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        );
        let c = parse_config_str(&text).unwrap();
        prop_assert_eq!(c.train.epochs, epochs);
        prop_assert_eq!(parse_config_str(&c.to_text()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn history_embeddings_ignore_later_events(seq in sequence(12, 3), tau in -3.0f64..3.0, mark in 0usize..3, seed in any::<u64>()) {
        let cfg = TrainConfig { embed_dim: 8, layers: 2, seed, ..TrainConfig::default() };
        let state = ModelState::init(3, NormStats::identity(), cfg).unwrap();
        let events = state.normalize_events(&seq).unwrap();
        let full = encode_history(&state.model, &events).unwrap();
        prop_assert_eq!(full.len(), events.len() + 1);
        prop_assert!(full.iter().all(|h| h.len() == 8));
        // replace the last event; every earlier embedding must be unchanged
        let mut changed = events.clone();
        *changed.last_mut().unwrap() = (tau, mark);
        let other = encode_history(&state.model, &changed).unwrap();
        prop_assert_eq!(&full[..events.len()], &other[..events.len()]);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), m in 1usize..5, mean in -3.0f64..3.0) {
        let cfg = TrainConfig { embed_dim: 4, seed, ..TrainConfig::default() };
        let state = ModelState::init(m, NormStats { mean_log_tau: mean, std_log_tau: 0.7 }, cfg).unwrap();
        let ck = Checkpoint { state, rng: Rng::new(seed).state(), config_text: String::new() };
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }
}
