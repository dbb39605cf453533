//! Property tests over randomly generated inputs.

use std::sync::Arc;

use dfkc::correctors::{
    anneal_step, base_step, corrected_posteriors, corrected_step, geo_avg_step, product_step, reward_step,
};
use dfkc::denoiser::{denoiser_ratios, exact_posterior};
use dfkc::ising::{config_observables, IsingModel};
use dfkc::oracle::{exact_marginals, target_distribution, tv_distance, wasserstein2_1d};
use dfkc::process::PositionTable;
use dfkc::rng::{stream_rng, Stream};
use dfkc::smc::{ess, normalized_weights, resample_indices};
use dfkc::{
    BetaSchedule, MaskingSchedule, RatioTable, ResampleScheme, SeparableReward, SequenceState, StateSpace,
    TabularDataDistribution, TabularDenoiser, TargetSpec, Token, Vocabulary,
};
use proptest::prelude::*;
use rand::RngCore;

fn vocab(v: u32) -> Vocabulary {
    Vocabulary::new(v).unwrap()
}

/// (V, d, positive weights over V^d)
fn data_strategy() -> impl Strategy<Value = TabularDataDistribution> {
    (2u32..=3, 1usize..=3).prop_flat_map(|(v, d)| {
        let n = (v as usize).pow(d as u32);
        prop::collection::vec(0.01f64..1.0, n)
            .prop_map(move |w| TabularDataDistribution::from_weights(vocab(v), d, w).unwrap())
    })
}

/// A state over (V, d) with any mix of masks, plus random positive ratios for its masked positions.
fn step_inputs() -> impl Strategy<Value = (Vocabulary, SequenceState, RatioTable, RatioTable)> {
    (2u32..=4, 1usize..=4).prop_flat_map(|(v, d)| {
        prop::collection::vec(0..=v, d).prop_flat_map(move |tokens| {
            let voc = vocab(v);
            let state = SequenceState::new(tokens, voc).unwrap();
            let masked = dfkc::state::masked_positions(&state, voc);
            let n = masked.len() * v as usize;
            let table = move |vals: Vec<f64>| RatioTable(PositionTable::new(masked.clone(), v as usize, vals).unwrap());
            let t2 = table.clone();
            (
                Just(voc),
                Just(state),
                prop::collection::vec(1e-3f64..5.0, n).prop_map(table),
                prop::collection::vec(1e-3f64..5.0, n).prop_map(t2),
            )
        })
    })
}

fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_weights_form_a_distribution(lw in prop::collection::vec(-50.0f64..50.0, 1..200)) {
        let w = normalized_weights(&lw).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let e = ess(&lw);
        prop_assert!(e >= 1.0 - 1e-9 && e <= lw.len() as f64 + 1e-9);
    }

    #[test]
    fn shifting_log_weights_changes_nothing(lw in prop::collection::vec(-20.0f64..20.0, 1..50), c in -500.0f64..500.0) {
        let a = normalized_weights(&lw).unwrap();
        let shifted: Vec<f64> = lw.iter().map(|x| x + c).collect();
        let b = normalized_weights(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn systematic_counts_stay_within_one_of_expectation(
        raw in prop::collection::vec(0.0f64..1.0, 1..40),
        k in 1usize..300,
        seed in any::<u64>(),
    ) {
        prop_assume!(raw.iter().sum::<f64>() > 1e-6);
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let mut rng = stream_rng(seed, Stream::Resample, 0, 0);
        let idx = resample_indices(&mut rng, &w, k, ResampleScheme::Systematic);
        prop_assert_eq!(idx.len(), k);
        let mut counts = vec![0usize; w.len()];
        for &a in &idx {
            counts[a] += 1;
        }
        for (c, wi) in counts.iter().zip(&w) {
            let expected = wi * k as f64;
            prop_assert!((*c as f64 - expected).abs() < 1.0 + 1e-9, "count {} vs expected {}", c, expected);
        }
    }

    #[test]
    fn multinomial_never_picks_zero_weight(raw in prop::collection::vec(0.0f64..1.0, 2..20), seed in any::<u64>()) {
        let mut w = raw.clone();
        w[0] = 0.0;
        let total: f64 = w.iter().sum();
        prop_assume!(total > 1e-6);
        let w: Vec<f64> = w.iter().map(|x| x / total).collect();
        let mut rng = stream_rng(seed, Stream::Resample, 1, 0);
        let idx = resample_indices(&mut rng, &w, 64, ResampleScheme::Multinomial);
        prop_assert!(idx.iter().all(|&a| a < w.len() && w[a] > 0.0));
    }

    #[test]
    fn corrected_rates_are_nonnegative_and_reduce(
        (voc, state, r1, r2) in step_inputs(),
        t in 0.001f64..0.999,
        beta in 0.1f64..3.0,
        b0 in 0.05f64..0.95,
    ) {
        let s = MaskingSchedule::linear();
        let base = base_step(&s, voc, t, &state, &r1).unwrap();
        let steps = [
            anneal_step(&s, voc, t, &state, &r1, beta).unwrap(),
            product_step(&s, voc, t, &state, &r1, &r2).unwrap(),
            geo_avg_step(&s, voc, t, &state, &[&r1, &r2], &[b0, 1.0 - b0]).unwrap(),
        ];
        for step in steps.iter().chain(std::iter::once(&base)) {
            prop_assert!(step.rates.values().iter().all(|&x| x >= 0.0 && x.is_finite()));
            prop_assert!(step.g.is_finite());
        }
        let one = anneal_step(&s, voc, t, &state, &r1, 1.0).unwrap();
        for (a, b) in one.rates.values().iter().zip(base.rates.values()) {
            prop_assert!(rel(*a, *b) < 1e-12);
        }
        prop_assert!(one.g.abs() < 1e-9);
        let zero = |_: &SequenceState| 0.0;
        let flat = reward_step(&s, voc, t, &state, &r1, &zero, beta, 1.0).unwrap();
        prop_assert_eq!(flat.rates.values(), base.rates.values());
        prop_assert_eq!(flat.g, 0.0);
    }

    #[test]
    fn corrected_posteriors_are_distributions((voc, state, r1, r2) in step_inputs(), t in 0.001f64..0.999) {
        let s = MaskingSchedule::linear();
        let target = TargetSpec::Product;
        let step = corrected_step(&target, &s, voc, t, 1.0 - t, &state, &[r1, r2]).unwrap();
        let post = corrected_posteriors(&step).unwrap();
        for (_, row) in post.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_posteriors_sum_to_one(data in data_strategy(), t in 0.01f64..0.99, pick in any::<u64>()) {
        let space = StateSpace::new(data.vocab(), data.seq_len()).unwrap();
        let x = space.state(pick as usize % space.len());
        let post = exact_posterior(&data, t, &x).unwrap();
        for (_, row) in post.0.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn denoiser_ratios_match_marginal_ratios(data in data_strategy(), t in 0.05f64..0.95, pick in any::<u64>()) {
        let s = MaskingSchedule::linear();
        let space = StateSpace::new(data.vocab(), data.seq_len()).unwrap();
        let x = space.state(pick as usize % space.len());
        let joint = exact_marginals(&data, &s, t).unwrap();
        let den = TabularDenoiser::new(data.clone());
        let ratios = denoiser_ratios(&den, &s, t, &x).unwrap();
        for (k, row) in ratios.rows() {
            for (j, &r) in row.iter().enumerate() {
                let direct = joint.prob_of(&x.with(k, j as Token)) / joint.prob_of(&x);
                prop_assert!(rel(r, direct) < 1e-9);
            }
        }
    }

    #[test]
    fn exact_marginals_are_normalized(data in data_strategy(), t in 0.0f64..=1.0) {
        let joint = exact_marginals(&data, &MaskingSchedule::linear(), t).unwrap();
        prop_assert!((joint.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn targets_are_normalized(data in data_strategy(), beta in 0.2f64..3.0, t in 0.0f64..0.99) {
        let s = MaskingSchedule::linear();
        let reward = SeparableReward::shared(data.vocab(), (0..data.vocab().size()).map(|j| j as f64 * 0.3).collect()).unwrap();
        let targets = [
            TargetSpec::Anneal { beta },
            TargetSpec::Reward { reward: Arc::new(reward), beta: BetaSchedule::Constant { value: beta } },
        ];
        for target in &targets {
            let q = target_distribution(&[&data], target, &s, t).unwrap();
            prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_is_a_bounded_symmetric_distance(
        raw in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..30),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = raw.into_iter().unzip();
        let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(a), norm(b));
        let d = tv_distance(&p, &q).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        prop_assert!((d - tv_distance(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!(tv_distance(&p, &p).unwrap() < 1e-15);
    }

    #[test]
    fn w2_of_a_shift_is_the_shift(xs in prop::collection::vec(-10.0f64..10.0, 1..50), c in -5.0f64..5.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((wasserstein2_1d(&xs, &shifted).unwrap() - c.abs()).abs() < 1e-9);
        prop_assert!(wasserstein2_1d(&xs, &xs).unwrap() < 1e-12);
    }

    #[test]
    fn ising_energy_is_flip_and_translation_invariant(l in 2usize..=5, bits in any::<u64>(), shift in 0usize..25) {
        let model = IsingModel::ferromagnet(l).unwrap();
        let n = l * l;
        let config: Vec<Token> = (0..n).map(|i| ((bits >> (i % 64)) & 1) as Token).collect();
        let e = model.energy(&config).unwrap();
        let flipped: Vec<Token> = config.iter().map(|&s| 1 - s).collect();
        prop_assert_eq!(e, model.energy(&flipped).unwrap());
        let (dr, dc) = (shift / l % l, shift % l);
        let moved: Vec<Token> = (0..n)
            .map(|i| config[((i / l + dr) % l) * l + (i % l + dc) % l])
            .collect();
        prop_assert_eq!(e, model.energy(&moved).unwrap());
        let obs = config_observables(&model, &config).unwrap();
        prop_assert!((0.0..=1.0).contains(&obs.magnetization));
        prop_assert!(obs.correlations.iter().all(|c| c.abs() <= 1.0));
    }

    #[test]
    fn streams_are_reproducible_and_distinct(seed in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        let x = stream_rng(seed, Stream::Propagate, a, b).next_u64();
        prop_assert_eq!(x, stream_rng(seed, Stream::Propagate, a, b).next_u64());
        prop_assert_ne!(x, stream_rng(seed, Stream::Resample, a, b).next_u64());
        prop_assert_ne!(x, stream_rng(seed, Stream::Propagate, a, b + 1).next_u64());
    }
}
