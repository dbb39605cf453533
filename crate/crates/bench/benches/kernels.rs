use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dfkc::correctors::{anneal_step, product_step};
use dfkc::denoiser::exact_posterior;
use dfkc::ising::{exact_boltzmann, BoltzmannSpec, IsingModel};
use dfkc::oracle::{integrate_weighted_fke, FkeOptions};
use dfkc::process::PositionTable;
use dfkc::rng::{mix, unit_f64};
use dfkc::smc::{self, propagate, WeightedEnsemble};
use dfkc::{
    Denoiser, MaskingSchedule, RatioTable, SequenceState, SmcConfig, StepMode, TabularDataDistribution,
    TabularDenoiser, TargetSpec, Token, Vocabulary,
};

fn pseudo(i: u64) -> f64 {
    unit_f64(mix(i))
}

/// Every other position masked, ratios in (0.01, 5).
fn step_inputs(v: u32, d: usize, salt: u64) -> (Vocabulary, SequenceState, RatioTable) {
    let vocab = Vocabulary::new(v).unwrap();
    let tokens: Vec<Token> = (0..d)
        .map(|k| if k % 2 == 0 { vocab.mask_id() } else { (k as u32) % v })
        .collect();
    let state = SequenceState::new(tokens, vocab).unwrap();
    let masked = dfkc::state::masked_positions(&state, vocab);
    let values = (0..masked.len() * v as usize)
        .map(|i| 0.01 + 5.0 * pseudo(salt + i as u64))
        .collect();
    (
        vocab,
        state,
        RatioTable(PositionTable::new(masked, v as usize, values).unwrap()),
    )
}

fn corrected_steps(c: &mut Criterion) {
    let schedule = MaskingSchedule::linear();
    let (vocab, state, r1) = step_inputs(32, 64, 1);
    let (_, _, r2) = step_inputs(32, 64, 2);
    c.bench_function("anneal_step V=32 d=64", |b| {
        b.iter(|| anneal_step(&schedule, vocab, black_box(0.4), &state, &r1, 1.5).unwrap())
    });
    c.bench_function("product_step V=32 d=64", |b| {
        b.iter(|| product_step(&schedule, vocab, black_box(0.4), &state, &r1, &r2).unwrap())
    });
}

fn ising_data(l: usize, beta: f64) -> TabularDataDistribution {
    exact_boltzmann(&BoltzmannSpec::new(IsingModel::ferromagnet(l).unwrap(), beta).unwrap())
        .unwrap()
        .data
}

fn posteriors(c: &mut Criterion) {
    let data = ising_data(4, 0.3);
    let vocab = data.vocab();
    let tokens: Vec<Token> = (0..16)
        .map(|i| if i % 3 == 0 { vocab.mask_id() } else { (i % 2) as Token })
        .collect();
    let state = SequenceState::new(tokens, vocab).unwrap();
    c.bench_function("exact_posterior Ising L=4, 6 masked", |b| {
        b.iter(|| exact_posterior(&data, 0.5, black_box(&state)).unwrap())
    });
}

fn smc_steps(c: &mut Criterion) {
    let data = ising_data(3, 0.3);
    let denoiser = TabularDenoiser::new(data.clone());
    let refs: [&dyn Denoiser; 1] = [&denoiser];
    let schedule = MaskingSchedule::linear();
    let target = TargetSpec::Anneal { beta: 4.0 / 3.0 };
    let ensemble = WeightedEnsemble::all_masked(1024, 9, data.vocab(), 3).unwrap();
    c.bench_function("propagate K=1024 Ising L=3 from all-mask", |b| {
        b.iter_batched(
            || ensemble.clone(),
            |ens| propagate(&ens, &target, &refs, &schedule, 0.3, StepMode::ExponentialClock).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let mut group = c.benchmark_group("smc_run");
    group.sample_size(10);
    group.bench_function("anneal K=1024, 50 steps, Ising L=3", |b| {
        b.iter(|| smc::run(&target, &refs, &schedule, &SmcConfig::new(1024, 50, 1)).unwrap())
    });
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let vocab = Vocabulary::new(2).unwrap();
    let data = TabularDataDistribution::new(vocab, 2, vec![0.4, 0.1, 0.3, 0.2]).unwrap();
    let mut group = c.benchmark_group("weighted_master_equation");
    group.sample_size(10);
    group.bench_function("anneal(2) V=2 d=2, 2000 steps", |b| {
        b.iter(|| {
            integrate_weighted_fke(
                &[&data],
                &TargetSpec::Anneal { beta: 2.0 },
                &MaskingSchedule::linear(),
                &FkeOptions::default(),
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, corrected_steps, posteriors, smc_steps, oracle);
criterion_main!(benches);
