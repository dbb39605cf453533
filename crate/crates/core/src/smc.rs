//! Weighted particle propagation with resampling.
//!
//! Each particle follows the corrected reverse process while its log-weight
//! accumulates `g · Δτ`, evaluated at the state before the step. Between
//! steps the ensemble may be resampled; the final self-normalized weights
//! give consistent estimates under the corrected target.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correctors::{corrected_posteriors, corrected_step, CorrectedStep, TargetSpec};
use crate::denoiser::{ratios_from_posterior, Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::process::{fill_masked, reverse_step, StepMode};
use crate::rng::{stream_rng, Stream};
use crate::schedule::MaskingSchedule;
use crate::state::{SequenceState, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleTrigger {
    #[default]
    EveryStep,
    /// Resample when ESS < threshold · K.
    EssBelow(f64),
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResamplingPolicy {
    pub scheme: ResampleScheme,
    pub trigger: ResampleTrigger,
    /// Fraction of the final steps during which resampling is disabled.
    pub freeze_tail: f64,
}

impl ResamplingPolicy {
    pub fn systematic_adaptive() -> Self {
        Self {
            scheme: ResampleScheme::Systematic,
            trigger: ResampleTrigger::EssBelow(0.5),
            freeze_tail: 0.0,
        }
    }

    pub fn never() -> Self {
        Self {
            trigger: ResampleTrigger::Never,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ResampleTrigger::EssBelow(theta) = self.trigger {
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(Error::domain(format!("ESS threshold must lie in (0, 1], got {theta}")));
            }
        }
        if !(0.0..=1.0).contains(&self.freeze_tail) {
            return Err(Error::domain("freeze_tail must lie in [0, 1]"));
        }
        Ok(())
    }

    fn should_resample(&self, step: usize, n_steps: usize, ess: f64, k: usize) -> bool {
        let frozen_from = ((1.0 - self.freeze_tail) * n_steps as f64).ceil() as usize;
        if step >= frozen_from {
            return false;
        }
        match self.trigger {
            ResampleTrigger::EveryStep => true,
            ResampleTrigger::EssBelow(theta) => ess < theta * k as f64,
            ResampleTrigger::Never => false,
        }
    }
}

/// K particles with log-weights at reverse time `tau`.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    pub particles: Vec<SequenceState>,
    pub log_weights: Vec<f64>,
    pub tau: f64,
    pub rng_seed: u64,
    /// Number of propagation steps taken so far.
    pub step: usize,
    /// Denoiser outputs per particle, valid while the particle's state is unchanged.
    cache: Vec<Option<Vec<DenoiserOutput>>>,
}

impl WeightedEnsemble {
    /// K copies of the all-mask state with uniform weights.
    pub fn all_masked(k: usize, d: usize, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("ensemble needs at least one particle"));
        }
        Ok(Self::from_particles(
            vec![SequenceState::all_masked(d, vocab); k],
            vec![-(k as f64).ln(); k],
            0.0,
            seed,
        ))
    }

    pub fn from_particles(particles: Vec<SequenceState>, log_weights: Vec<f64>, tau: f64, rng_seed: u64) -> Self {
        assert_eq!(particles.len(), log_weights.len());
        let cache = vec![None; particles.len()];
        Self {
            particles,
            log_weights,
            tau,
            rng_seed,
            step: 0,
            cache,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalized_weights(&self.log_weights)
    }

    pub fn ess(&self) -> f64 {
        ess(&self.log_weights)
    }
}

/// Softmax of log-weights with max subtraction.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate(format!(
            "{} weights, maximum log-weight {max}",
            log_weights.len()
        )));
    }
    let w: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// (Σw)² / Σw², in [1, K]; 0 for fully degenerate weights.
pub fn ess(log_weights: &[f64]) -> f64 {
    match normalized_weights(log_weights) {
        Ok(w) => 1.0 / w.iter().map(|x| x * x).sum::<f64>(),
        Err(_) => 0.0,
    }
}

/// Ancestor indices for `k` offspring drawn from normalized `weights`.
pub fn resample_indices<R: Rng + ?Sized>(rng: &mut R, weights: &[f64], k: usize, scheme: ResampleScheme) -> Vec<usize> {
    let n = weights.len();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cdf.push(acc);
    }
    let total = acc;
    let pick = |u: f64| -> usize {
        let x = u * total;
        let i = cdf.partition_point(|&c| c <= x);
        // guard against round-off past the last positive weight
        let mut i = i.min(n - 1);
        while weights[i] <= 0.0 && i > 0 {
            i -= 1;
        }
        i
    };
    match scheme {
        ResampleScheme::Multinomial => (0..k).map(|_| pick(rng.gen::<f64>())).collect(),
        ResampleScheme::Systematic => {
            let u0: f64 = rng.gen::<f64>() / k as f64;
            (0..k).map(|i| pick(u0 + i as f64 / k as f64)).collect()
        }
    }
}

/// Replace particles by ancestors drawn from their normalized weights and
/// reset every log-weight to −log K.
pub fn resample<R: Rng + ?Sized>(
    rng: &mut R,
    ensemble: &WeightedEnsemble,
    scheme: ResampleScheme,
) -> Result<WeightedEnsemble> {
    let weights = ensemble.normalized_weights()?;
    let k = ensemble.len();
    let ancestors = resample_indices(rng, &weights, k, scheme);
    Ok(WeightedEnsemble {
        particles: ancestors.iter().map(|&a| ensemble.particles[a].clone()).collect(),
        log_weights: vec![-(k as f64).ln(); k],
        tau: ensemble.tau,
        rng_seed: ensemble.rng_seed,
        step: ensemble.step,
        cache: ancestors.iter().map(|&a| ensemble.cache[a].clone()).collect(),
    })
}

/// Self-normalized importance-sampling estimate of E[φ].
pub fn snis_estimate(ensemble: &WeightedEnsemble, phi: impl Fn(&SequenceState) -> f64) -> Result<f64> {
    let w = ensemble.normalized_weights()?;
    Ok(w.iter().zip(&ensemble.particles).map(|(&wi, x)| wi * phi(x)).sum())
}

/// Reverse time → forward time at which rates are evaluated.
fn eval_time(schedule: &MaskingSchedule, tau: f64) -> f64 {
    schedule.clamp(1.0 - tau)
}

fn posteriors_for(
    denoisers: &[&dyn Denoiser],
    cached: Option<&Vec<DenoiserOutput>>,
    state: &SequenceState,
    t: f64,
) -> Result<Vec<DenoiserOutput>> {
    denoisers
        .iter()
        .enumerate()
        .map(|(n, den)| match cached {
            Some(c) if den.time_homogeneous() => Ok(c[n].clone()),
            _ => den.posterior(state, t),
        })
        .collect()
}

fn step_for(
    target: &TargetSpec,
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    t: f64,
    tau: f64,
    state: &SequenceState,
    posteriors: &[DenoiserOutput],
) -> Result<CorrectedStep> {
    let ratios = posteriors
        .iter()
        .map(|p| ratios_from_posterior(schedule, t, p))
        .collect::<Result<Vec<_>>>()?;
    corrected_step(target, schedule, vocab, t, tau, state, &ratios)
}

/// Outcome of one propagation step.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub ensemble: WeightedEnsemble,
    /// Unweighted mean of g over particles, before the step.
    pub mean_g: f64,
}

/// New state, log-weight increment, g, and the posterior cache to carry forward.
type ParticleStep = (SequenceState, f64, f64, Option<Vec<DenoiserOutput>>);

/// Advance every particle by one corrected reverse step of length `dtau`
/// and add `g · dtau` to its log-weight.
pub fn propagate(
    ensemble: &WeightedEnsemble,
    target: &TargetSpec,
    denoisers: &[&dyn Denoiser],
    schedule: &MaskingSchedule,
    dtau: f64,
    mode: StepMode,
) -> Result<Propagated> {
    if dtau.is_nan() || dtau <= 0.0 {
        return Err(Error::domain(format!("dtau must be positive, got {dtau}")));
    }
    target.validate(denoisers.len())?;
    let vocab = denoisers[0].vocab();
    let tau = ensemble.tau;
    let t = eval_time(schedule, tau);
    let step_index = ensemble.step as u64;
    let seed = ensemble.rng_seed;

    let results: Vec<Result<ParticleStep>> = (0..ensemble.len())
        .into_par_iter()
        .map(|i| {
            let state = &ensemble.particles[i];
            let wrap = |e: Error| Error::Particle {
                index: i,
                source: Box::new(e),
            };
            let posteriors = posteriors_for(denoisers, ensemble.cache[i].as_ref(), state, t).map_err(wrap)?;
            let step = step_for(target, schedule, vocab, t, tau, state, &posteriors).map_err(wrap)?;
            let mut rng = stream_rng(seed, Stream::Propagate, i as u64, step_index);
            let next = reverse_step(&mut rng, state, &step.rates, dtau, mode);
            let cache = (next == *state).then_some(posteriors);
            Ok((next, ensemble.log_weights[i] + step.g * dtau, step.g, cache))
        })
        .collect();

    let k = ensemble.len();
    let mut particles = Vec::with_capacity(k);
    let mut log_weights = Vec::with_capacity(k);
    let mut cache = Vec::with_capacity(k);
    let mut g_sum = 0.0;
    for r in results {
        let (x, lw, g, c) = r?;
        if !lw.is_finite() {
            return Err(Error::Degenerate(format!("non-finite log-weight {lw} (g = {g})")));
        }
        particles.push(x);
        log_weights.push(lw);
        cache.push(c);
        g_sum += g;
    }
    Ok(Propagated {
        ensemble: WeightedEnsemble {
            particles,
            log_weights,
            tau: tau + dtau,
            rng_seed: seed,
            step: ensemble.step + 1,
            cache,
        },
        mean_g: g_sum / k as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcConfig {
    pub k: usize,
    pub n_steps: usize,
    pub policy: ResamplingPolicy,
    pub seed: u64,
    pub step_mode: StepModeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepModeConfig {
    #[default]
    ExponentialClock,
    FirstOrder,
}

impl From<StepModeConfig> for StepMode {
    fn from(m: StepModeConfig) -> Self {
        match m {
            StepModeConfig::ExponentialClock => StepMode::ExponentialClock,
            StepModeConfig::FirstOrder => StepMode::FirstOrder,
        }
    }
}

impl SmcConfig {
    pub fn new(k: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            k,
            n_steps,
            policy: ResamplingPolicy::default(),
            seed,
            step_mode: StepModeConfig::default(),
        }
    }

    pub fn with_policy(mut self, policy: ResamplingPolicy) -> Self {
        self.policy = policy;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Reverse time after the step.
    pub tau: f64,
    /// ESS after propagation, before any resampling.
    pub ess: f64,
    pub mean_g: f64,
    pub resampled: bool,
}

#[derive(Debug, Clone)]
pub struct SmcRun {
    pub ensemble: WeightedEnsemble,
    pub trace: Vec<TraceRow>,
}

/// Generate from the corrected target: start every particle fully masked,
/// alternate propagation and resampling over the reverse-time grid
/// `[0, 1 − t_min]`, then fill any remaining masks from the corrected
/// posterior at the final time.
pub fn run(
    target: &TargetSpec,
    denoisers: &[&dyn Denoiser],
    schedule: &MaskingSchedule,
    config: &SmcConfig,
) -> Result<SmcRun> {
    if config.n_steps == 0 {
        return Err(Error::domain("n_steps must be at least 1"));
    }
    if denoisers.is_empty() {
        return Err(Error::contract("at least one denoiser is required"));
    }
    target.validate(denoisers.len())?;
    config.policy.validate()?;
    let vocab = denoisers[0].vocab();
    let d = denoisers[0].seq_len();
    if denoisers.iter().any(|den| den.vocab() != vocab || den.seq_len() != d) {
        return Err(Error::contract("denoisers disagree on vocabulary or sequence length"));
    }
    let mode: StepMode = config.step_mode.into();
    let dtau = (1.0 - schedule.t_min) / config.n_steps as f64;

    let mut ensemble = WeightedEnsemble::all_masked(config.k, d, vocab, config.seed)?;
    let mut trace = Vec::with_capacity(config.n_steps);
    for n in 0..config.n_steps {
        let Propagated { ensemble: next, mean_g } = propagate(&ensemble, target, denoisers, schedule, dtau, mode)?;
        ensemble = next;
        let current_ess = ensemble.ess();
        let resampled = config.policy.should_resample(n, config.n_steps, current_ess, config.k);
        if resampled {
            let mut rng = stream_rng(config.seed, Stream::Resample, n as u64, 0);
            ensemble = resample(&mut rng, &ensemble, config.policy.scheme)?;
        }
        trace.push(TraceRow {
            step: n,
            tau: ensemble.tau,
            ess: current_ess,
            mean_g,
            resampled,
        });
    }

    // close out residual masks at the final time
    let tau = ensemble.tau;
    let t = eval_time(schedule, tau);
    let filled: Vec<Result<SequenceState>> = (0..ensemble.len())
        .into_par_iter()
        .map(|i| {
            let state = &ensemble.particles[i];
            if state.is_fully_unmasked(vocab) {
                return Ok(state.clone());
            }
            let wrap = |e: Error| Error::Particle {
                index: i,
                source: Box::new(e),
            };
            let posteriors = posteriors_for(denoisers, ensemble.cache[i].as_ref(), state, t).map_err(wrap)?;
            let step = step_for(target, schedule, vocab, t, tau, state, &posteriors).map_err(wrap)?;
            let probs = corrected_posteriors(&step).map_err(wrap)?;
            let mut rng = stream_rng(config.seed, Stream::Fill, i as u64, 0);
            fill_masked(&mut rng, state, &probs).map_err(wrap)
        })
        .collect();
    let particles = filled.into_iter().collect::<Result<Vec<_>>>()?;
    ensemble.cache = vec![None; particles.len()];
    ensemble.particles = particles;
    Ok(SmcRun { ensemble, trace })
}

/// Trace as CSV: `step,tau,ess,mean_g,resampled`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,tau,ess,mean_g,resampled")?;
    for row in trace {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.step, row.tau, row.ess, row.mean_g, row.resampled
        )?;
    }
    Ok(())
}

/// SNIS estimate of the full distribution over data states (`V^d` entries,
/// lexicographic order). Particles must be fully unmasked.
pub fn weighted_histogram(ensemble: &WeightedEnsemble, vocab: Vocabulary) -> Result<Vec<f64>> {
    let d = ensemble
        .particles
        .first()
        .map(|p| p.len())
        .ok_or_else(|| Error::domain("empty ensemble"))?;
    let n = crate::state::check_capacity("histogram", vocab.size(), d, crate::state::DEFAULT_ENUMERATION_LIMIT)?;
    let w = ensemble.normalized_weights()?;
    let mut hist = vec![0.0; n];
    for (x, wi) in ensemble.particles.iter().zip(w) {
        if !x.is_fully_unmasked(vocab) {
            return Err(Error::contract("histogram needs fully unmasked particles"));
        }
        hist[crate::state::data_index(x.tokens(), vocab.size())] += wi;
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{TabularDataDistribution, TabularDenoiser};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.0; 8]) - 8.0).abs() < 1e-12);
        assert!((ess(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]) - 1.0).abs() < 1e-12);
        let lw = [2f64.ln(), 0.0, 0.0];
        assert!((ess(&lw) - 16.0 / 6.0).abs() < 1e-12);
        // shift invariance
        let shifted: Vec<f64> = lw.iter().map(|x| x - 1000.0).collect();
        assert!((ess(&shifted) - 16.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn systematic_with_equal_weights_keeps_every_ancestor_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = resample_indices(&mut rng, &[0.125; 8], 8, ResampleScheme::Systematic);
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn point_mass_collapses_ensemble() {
        let voc = Vocabulary::new(2).unwrap();
        let particles: Vec<SequenceState> = (0..4).map(|i| SequenceState::new(vec![i % 2], voc).unwrap()).collect();
        let ens = WeightedEnsemble::from_particles(
            particles,
            vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            0.5,
            0,
        );
        for scheme in [ResampleScheme::Multinomial, ResampleScheme::Systematic] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let out = resample(&mut rng, &ens, scheme).unwrap();
            assert!(out.particles.iter().all(|p| p.tokens() == [0]));
            assert!(out.log_weights.iter().all(|&lw| (lw + 4f64.ln()).abs() < 1e-15));
        }
    }

    #[test]
    fn degenerate_weights_error() {
        let voc = Vocabulary::new(2).unwrap();
        let ens = WeightedEnsemble::from_particles(
            vec![SequenceState::all_masked(1, voc); 2],
            vec![f64::NEG_INFINITY; 2],
            0.0,
            0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            resample(&mut rng, &ens, ResampleScheme::Multinomial),
            Err(Error::Degenerate(_))
        ));
        assert!(snis_estimate(&ens, |_| 1.0).is_err());
    }

    #[test]
    fn snis_examples() {
        let voc = Vocabulary::new(2).unwrap();
        let a = SequenceState::new(vec![0], voc).unwrap();
        let b = SequenceState::new(vec![1], voc).unwrap();
        let phi = |s: &SequenceState| if s.get(0) == 0 { 2.0 } else { 4.0 };
        let ens = WeightedEnsemble::from_particles(vec![a.clone(), b.clone()], vec![0.0, 0.0], 1.0, 0);
        assert!((snis_estimate(&ens, phi).unwrap() - 3.0).abs() < 1e-15);
        let ens = WeightedEnsemble::from_particles(vec![a, b], vec![3f64.ln(), 0.0], 1.0, 0);
        assert!((snis_estimate(&ens, phi).unwrap() - 2.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = resample(&mut rng, &ens, ResampleScheme::Multinomial).unwrap();
        let mean = res.particles.iter().map(phi).sum::<f64>() / 2.0;
        assert!((snis_estimate(&res, phi).unwrap() - mean).abs() < 1e-15);
    }

    fn fixture() -> TabularDenoiser {
        let voc = Vocabulary::new(2).unwrap();
        TabularDenoiser::new(TabularDataDistribution::new(voc, 1, vec![0.8, 0.2]).unwrap())
    }

    #[test]
    fn base_propagation_keeps_weights() {
        let den = fixture();
        let sched = MaskingSchedule::linear();
        let ens = WeightedEnsemble::all_masked(16, 1, den.vocab(), 5).unwrap();
        let out = propagate(
            &ens,
            &TargetSpec::Base,
            &[&den],
            &sched,
            0.01,
            StepMode::ExponentialClock,
        )
        .unwrap();
        assert_eq!(out.ensemble.log_weights, ens.log_weights);
        assert_eq!(out.mean_g, 0.0);
    }

    #[test]
    fn anneal_increment_example() {
        let den = fixture();
        let sched = MaskingSchedule::linear();
        let mut ens = WeightedEnsemble::all_masked(4, 1, den.vocab(), 5).unwrap();
        ens.tau = 0.5;
        let out = propagate(
            &ens,
            &TargetSpec::Anneal { beta: 2.0 },
            &[&den],
            &sched,
            0.01,
            StepMode::ExponentialClock,
        )
        .unwrap();
        for (a, b) in out.ensemble.log_weights.iter().zip(&ens.log_weights) {
            assert!((a - b + 0.0128).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_run_is_valid() {
        let den = fixture();
        let sched = MaskingSchedule::linear();
        let cfg = SmcConfig::new(32, 1, 9);
        let out = run(&TargetSpec::Anneal { beta: 2.0 }, &[&den], &sched, &cfg).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert!(out.ensemble.particles.iter().all(|p| p.is_fully_unmasked(den.vocab())));
    }

    #[test]
    fn wrong_denoiser_count_is_rejected() {
        let den = fixture();
        let sched = MaskingSchedule::linear();
        let cfg = SmcConfig::new(4, 4, 0);
        assert!(matches!(
            run(&TargetSpec::Product, &[&den], &sched, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn freeze_tail_disables_final_resampling() {
        let policy = ResamplingPolicy {
            freeze_tail: 0.05,
            ..ResamplingPolicy::default()
        };
        assert!(policy.should_resample(94, 100, 1.0, 8));
        assert!(!policy.should_resample(95, 100, 1.0, 8));
        let ess_policy = ResamplingPolicy::systematic_adaptive();
        assert!(ess_policy.should_resample(0, 10, 3.9, 8));
        assert!(!ess_policy.should_resample(0, 10, 4.0, 8));
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            step: 0,
            tau: 0.5,
            ess: 8.0,
            mean_g: -1.25,
            resampled: true,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,tau,ess,mean_g,resampled\n0,0.5,8,-1.25,true\n"
        );
    }
}
