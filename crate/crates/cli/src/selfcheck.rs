//! Built-in reduction identities and master-equation oracles.

use std::sync::Arc;
use std::time::Instant;

use dfkc::correctors::{anneal_step, base_step, geo_avg_step, product_step, reward_step};
use dfkc::denoiser::denoiser_ratios;
use dfkc::oracle::{exact_marginals, integrate_weighted_fke, FkeOptions};
use dfkc::{
    BetaSchedule, CorrectedStep, MaskingSchedule, SeparableReward, SequenceState, StateSpace, TabularDataDistribution,
    TabularDenoiser, TargetSpec, Token, Vocabulary,
};

pub struct CheckRow {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Deterministic positive weights from a small integer hash.
fn fixture(vocab: Vocabulary, d: usize, salt: u64) -> TabularDataDistribution {
    let n = vocab.size().pow(d as u32);
    let weights = (0..n as u64)
        .map(|i| {
            let h = dfkc::rng::mix(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i);
            0.05 + dfkc::rng::unit_f64(h)
        })
        .collect();
    TabularDataDistribution::from_weights(vocab, d, weights).expect("fixture weights are positive")
}

fn rel_err(a: &CorrectedStep, b: &CorrectedStep) -> f64 {
    let scale = |x: f64, y: f64| {
        let m = x.abs().max(y.abs());
        if m == 0.0 {
            0.0
        } else {
            (x - y).abs() / m
        }
    };
    let rates = a
        .rates
        .table()
        .values()
        .iter()
        .zip(b.rates.table().values())
        .map(|(&x, &y)| scale(x, y))
        .fold(0.0, f64::max);
    rates.max(scale(a.g, b.g))
}

fn reduction_identities(schedule: &MaskingSchedule) -> CheckRow {
    let zero = |_: &SequenceState| 0.0;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (v, d) in [(2u32, 2usize), (3, 2), (4, 1), (2, 3)] {
        let vocab = Vocabulary::new(v).expect("vocabulary size is valid");
        let data = fixture(vocab, d, 17 + v as u64 + d as u64);
        let den = TabularDenoiser::new(data);
        let space = StateSpace::new(vocab, d).expect("fixture space is small");
        for t in [0.05, 0.3, 0.6, 0.95] {
            for x in space.iter() {
                let r = denoiser_ratios(&den, schedule, t, &x).expect("fixture has full support");
                let base = base_step(schedule, vocab, t, &x, &r).expect("valid inputs");
                let checks = [
                    rel_err(&anneal_step(schedule, vocab, t, &x, &r, 1.0).expect("valid"), &base),
                    rel_err(
                        &product_step(schedule, vocab, t, &x, &r, &r).expect("valid"),
                        &anneal_step(schedule, vocab, t, &x, &r, 2.0).expect("valid"),
                    ),
                    rel_err(
                        &geo_avg_step(schedule, vocab, t, &x, &[&r], &[1.0]).expect("valid"),
                        &base,
                    ),
                    rel_err(
                        &reward_step(schedule, vocab, t, &x, &r, &zero, 1.7, 1.0).expect("valid"),
                        &base,
                    ),
                ];
                worst = checks.into_iter().fold(worst, f64::max);
                cases += 1;
            }
        }
    }
    CheckRow {
        name: "reduction identities".into(),
        pass: worst <= 1e-12,
        detail: format!("{cases} states, max relative error {worst:.1e} (limit 1e-12)"),
    }
}

fn ratio_identity(schedule: &MaskingSchedule) -> CheckRow {
    let vocab = Vocabulary::new(2).expect("vocabulary size is valid");
    let data = fixture(vocab, 2, 5);
    let den = TabularDenoiser::new(data.clone());
    let space = StateSpace::new(vocab, 2).expect("fixture space is small");
    let mut worst = 0.0f64;
    for t in [0.1, 0.5, 0.9] {
        let joint = exact_marginals(&data, schedule, t).expect("fixture is enumerable");
        for x in space.iter() {
            let ratios = denoiser_ratios(&den, schedule, t, &x).expect("fixture has full support");
            for (k, row) in ratios.rows() {
                for (j, &r) in row.iter().enumerate() {
                    let direct = joint.prob_of(&x.with(k, j as Token)) / joint.prob_of(&x);
                    worst = worst.max((r - direct).abs());
                }
            }
        }
    }
    CheckRow {
        name: "denoiser ratio = marginal ratio".into(),
        pass: worst <= 1e-10,
        detail: format!("max abs error {worst:.1e} (limit 1e-10)"),
    }
}

fn oracle_rows(schedule: &MaskingSchedule, g_scale: f64) -> Vec<CheckRow> {
    let vocab = Vocabulary::new(2).expect("vocabulary size is valid");
    let p = fixture(vocab, 2, 1);
    let q = fixture(vocab, 2, 2);
    let reward = SeparableReward::new(vocab, vec![vec![0.2, 0.9], vec![0.7, 0.1]]).expect("finite reward");
    let cases: Vec<(&str, TargetSpec, Vec<&TabularDataDistribution>, f64)> = vec![
        ("base", TargetSpec::Base, vec![&p], 1e-6),
        ("anneal(0.5)", TargetSpec::Anneal { beta: 0.5 }, vec![&p], 1e-3),
        ("anneal(2)", TargetSpec::Anneal { beta: 2.0 }, vec![&p], 1e-3),
        ("product", TargetSpec::Product, vec![&p, &q], 1e-3),
        (
            "geo_avg(0.3,0.7)",
            TargetSpec::GeoAvg { betas: vec![0.3, 0.7] },
            vec![&p, &q],
            1e-3,
        ),
        (
            "reward",
            TargetSpec::Reward {
                reward: Arc::new(reward),
                beta: BetaSchedule::Linear { scale: 1.0 },
            },
            vec![&p],
            1e-3,
        ),
    ];
    let options = FkeOptions {
        g_scale,
        ..FkeOptions::default()
    };
    let mut rows: Vec<CheckRow> = cases
        .into_iter()
        .map(
            |(name, target, datas, limit)| match integrate_weighted_fke(&datas, &target, schedule, &options) {
                Ok(report) => CheckRow {
                    name: format!("master equation {name}"),
                    pass: report.stable() && report.max_tv <= limit,
                    detail: format!("max TV {:.2e} (limit {limit:.0e})", report.max_tv),
                },
                Err(e) => CheckRow {
                    name: format!("master equation {name}"),
                    pass: false,
                    detail: e.to_string(),
                },
            },
        )
        .collect();

    let control = FkeOptions {
        g_scale: 0.0,
        ..FkeOptions::default()
    };
    let detected = integrate_weighted_fke(&[&p], &TargetSpec::Anneal { beta: 2.0 }, schedule, &control)
        .map(|r| !r.stable() || r.max_tv > 1e-2);
    rows.push(CheckRow {
        name: "negative control (weights off)".into(),
        pass: matches!(detected, Ok(true)),
        detail: match detected {
            Ok(true) => "anneal(2) without weights misses the target, as it should".into(),
            Ok(false) => "anneal(2) without weights still matched the target".into(),
            Err(e) => e.to_string(),
        },
    });
    rows
}

/// Run every check. `flip_g` negates the weight term in the oracle runs.
pub fn run(flip_g: bool) -> Vec<CheckRow> {
    let started = Instant::now();
    let schedule = MaskingSchedule::linear();
    let mut rows = vec![reduction_identities(&schedule), ratio_identity(&schedule)];
    rows.extend(oracle_rows(&schedule, if flip_g { -1.0 } else { 1.0 }));
    let secs = started.elapsed().as_secs_f64();
    rows.push(CheckRow {
        name: "runtime".into(),
        pass: secs <= 60.0,
        detail: format!("{secs:.1}s (limit 60s)"),
    });
    rows
}
