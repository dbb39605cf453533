//! Ising testbed: Boltzmann distributions on small periodic lattices,
//! reference MCMC samplers, observables and temperature annealing through
//! the corrected sampler.
//!
//! Spins `σ ∈ {−1, +1}` are stored as tokens `{0, 1}`; site `i = row · L + col`
//! is sequence position `i`.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correctors::TargetSpec;
use crate::denoiser::{TabularDataDistribution, TabularDenoiser};
use crate::error::{Error, Result};
use crate::oracle::wasserstein2_weighted;
use crate::rng::{stream_rng, Stream};
use crate::schedule::MaskingSchedule;
use crate::smc::{self, ResamplingPolicy, SmcConfig, StepModeConfig};
use crate::state::{check_capacity, data_index, Token, Vocabulary, DEFAULT_ENUMERATION_LIMIT};

/// Inverse temperature of the 2D Ising phase transition, `ln(1 + √2) / 2`.
pub const BETA_CRITICAL: f64 = 0.440_686_793_509_771_5;

/// Nearest-neighbour Ising model on an `L × L` torus with coupling `J` and field `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsingModel {
    l: usize,
    j: f64,
    h: f64,
}

impl IsingModel {
    pub fn new(l: usize, j: f64, h: f64) -> Result<Self> {
        if l < 2 {
            return Err(Error::domain(format!("lattice side must be at least 2, got {l}")));
        }
        if !(j.is_finite() && h.is_finite()) {
            return Err(Error::domain("coupling and field must be finite"));
        }
        Ok(Self { l, j, h })
    }

    /// Zero-field ferromagnet with unit coupling.
    pub fn ferromagnet(l: usize) -> Result<Self> {
        Self::new(l, 1.0, 0.0)
    }

    pub fn side(&self) -> usize {
        self.l
    }

    pub fn coupling(&self) -> f64 {
        self.j
    }

    pub fn field(&self) -> f64 {
        self.h
    }

    pub fn n_sites(&self) -> usize {
        self.l * self.l
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(2).expect("two spin values")
    }

    /// Right neighbour on the torus.
    pub fn right(&self, i: usize) -> usize {
        let (r, c) = (i / self.l, i % self.l);
        r * self.l + (c + 1) % self.l
    }

    /// Lower neighbour on the torus.
    pub fn down(&self, i: usize) -> usize {
        (i + self.l) % self.n_sites()
    }

    /// Right, left, down and up neighbours; repeated when L = 2.
    pub fn neighbours(&self, i: usize) -> [usize; 4] {
        let (r, c) = (i / self.l, i % self.l);
        let n = self.n_sites();
        [
            self.right(i),
            r * self.l + (c + self.l - 1) % self.l,
            self.down(i),
            (i + n - self.l) % n,
        ]
    }

    fn check_config(&self, config: &[Token]) -> Result<()> {
        if config.len() != self.n_sites() {
            return Err(Error::contract(format!(
                "configuration has {} spins, lattice has {}",
                config.len(),
                self.n_sites()
            )));
        }
        if config.iter().any(|&t| t > 1) {
            return Err(Error::domain("configuration contains a masked or invalid spin"));
        }
        Ok(())
    }

    /// `H = −J Σ σ_i σ_j − h Σ σ_i` over the 2L² right and down bonds.
    pub fn energy(&self, config: &[Token]) -> Result<f64> {
        self.check_config(config)?;
        Ok(self.energy_unchecked(config))
    }

    fn energy_unchecked(&self, config: &[Token]) -> f64 {
        let mut bonds = 0i64;
        let mut total = 0i64;
        for i in 0..self.n_sites() {
            let s = spin(config[i]);
            bonds += s * (spin(config[self.right(i)]) + spin(config[self.down(i)]));
            total += s;
        }
        -self.j * bonds as f64 - self.h * total as f64
    }

    fn local_field(&self, config: &[Token], i: usize) -> f64 {
        let nb: i64 = self.neighbours(i).iter().map(|&k| spin(config[k])).sum();
        self.j * nb as f64 + self.h
    }
}

#[inline]
fn spin(token: Token) -> i64 {
    2 * token as i64 - 1
}

/// A Boltzmann distribution `p_β(σ) ∝ exp(−β H(σ))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoltzmannSpec {
    pub model: IsingModel,
    pub beta: f64,
}

impl BoltzmannSpec {
    pub fn new(model: IsingModel, beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::domain(format!(
                "beta must be finite and nonnegative, got {beta}"
            )));
        }
        Ok(Self { model, beta })
    }
}

/// Per-configuration observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigObservables {
    pub energy: f64,
    /// |mean spin|
    pub magnetization: f64,
    /// C(r) for r = 1..=⌊L/2⌋: mean over sites of σ_i σ_{i + r} along rows.
    pub correlations: Vec<f64>,
}

pub fn config_observables(model: &IsingModel, config: &[Token]) -> Result<ConfigObservables> {
    model.check_config(config)?;
    let l = model.l;
    let n = model.n_sites() as f64;
    let magnetization = (config.iter().map(|&t| spin(t)).sum::<i64>() as f64 / n).abs();
    let correlations = (1..=l / 2)
        .map(|r| {
            let mut acc = 0i64;
            for row in 0..l {
                for col in 0..l {
                    acc += spin(config[row * l + col]) * spin(config[row * l + (col + r) % l]);
                }
            }
            acc as f64 / n
        })
        .collect();
    Ok(ConfigObservables {
        energy: model.energy_unchecked(config),
        magnetization,
        correlations,
    })
}

/// Observables of a batch of configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub energies: Vec<f64>,
    pub magnetizations: Vec<f64>,
    /// One C(r) vector per configuration.
    pub row_correlations: Vec<Vec<f64>>,
}

impl Observables {
    /// Weighted mean of C(r) for each r.
    pub fn mean_correlations(&self, weights: &[f64]) -> Vec<f64> {
        let width = self.row_correlations.first().map_or(0, Vec::len);
        let mut out = vec![0.0; width];
        for (c, &w) in self.row_correlations.iter().zip(weights) {
            for (o, x) in out.iter_mut().zip(c) {
                *o += w * x;
            }
        }
        out
    }
}

pub fn observables(model: &IsingModel, configs: &[Vec<Token>]) -> Result<Observables> {
    let mut obs = Observables {
        energies: Vec::with_capacity(configs.len()),
        magnetizations: Vec::with_capacity(configs.len()),
        row_correlations: Vec::with_capacity(configs.len()),
    };
    for c in configs {
        let o = config_observables(model, c)?;
        obs.energies.push(o.energy);
        obs.magnetizations.push(o.magnetization);
        obs.row_correlations.push(o.correlations);
    }
    Ok(obs)
}

/// Exact Boltzmann distribution with its observable moments.
#[derive(Debug, Clone)]
pub struct ExactBoltzmann {
    pub spec: BoltzmannSpec,
    pub data: TabularDataDistribution,
    pub log_partition: f64,
    pub mean_energy: f64,
    pub mean_magnetization: f64,
    pub correlations: Vec<f64>,
    /// Energy and |m| of every configuration, in data order.
    pub energies: Vec<f64>,
    pub magnetizations: Vec<f64>,
}

/// Enumerate all `2^{L²}` configurations.
pub fn exact_boltzmann(spec: &BoltzmannSpec) -> Result<ExactBoltzmann> {
    let model = spec.model;
    let n_sites = model.n_sites();
    let n = check_capacity("Boltzmann enumeration", 2, n_sites, DEFAULT_ENUMERATION_LIMIT)?;
    let per_config: Vec<ConfigObservables> = (0..n)
        .into_par_iter()
        .map(|i| {
            let config = config_from_index(i, n_sites);
            config_observables(&model, &config).expect("enumerated configurations are valid")
        })
        .collect();
    let energies: Vec<f64> = per_config.iter().map(|o| o.energy).collect();
    let magnetizations: Vec<f64> = per_config.iter().map(|o| o.magnetization).collect();
    let min_e = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = energies.iter().map(|e| (-spec.beta * (e - min_e)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let width = model.l / 2;
    let mut correlations = vec![0.0; width];
    for (o, p) in per_config.iter().zip(&probs) {
        for (c, x) in correlations.iter_mut().zip(&o.correlations) {
            *c += p * x;
        }
    }
    Ok(ExactBoltzmann {
        spec: *spec,
        log_partition: total.ln() - spec.beta * min_e,
        mean_energy: probs.iter().zip(&energies).map(|(p, e)| p * e).sum(),
        mean_magnetization: probs.iter().zip(&magnetizations).map(|(p, m)| p * m).sum(),
        correlations,
        data: TabularDataDistribution::new(model.vocab(), n_sites, probs)?,
        energies,
        magnetizations,
    })
}

/// Configuration at a data index (site 0 is the most significant bit).
pub fn config_from_index(index: usize, n_sites: usize) -> Vec<Token> {
    (0..n_sites)
        .map(|k| ((index >> (n_sites - 1 - k)) & 1) as Token)
        .collect()
}

pub fn config_index(config: &[Token]) -> usize {
    data_index(config, 2)
}

/// One heat-bath update of a uniformly chosen spin.
pub fn glauber_step<R: Rng + ?Sized>(rng: &mut R, spec: &BoltzmannSpec, config: &mut [Token]) -> Result<()> {
    spec.model.check_config(config)?;
    glauber_update(rng, spec, config);
    Ok(())
}

fn glauber_update<R: Rng + ?Sized>(rng: &mut R, spec: &BoltzmannSpec, config: &mut [Token]) {
    let i = rng.gen_range(0..config.len());
    let field = spec.model.local_field(config, i);
    let p_up = 1.0 / (1.0 + (-2.0 * spec.beta * field).exp());
    config[i] = Token::from(rng.gen::<f64>() < p_up);
}

/// Probability that an aligned bond is opened in a Swendsen-Wang update.
pub fn bond_probability(spec: &BoltzmannSpec) -> f64 {
    -(-2.0 * spec.beta * spec.model.j).exp_m1()
}

/// Union-find over lattice sites.
struct Clusters {
    parent: Vec<usize>,
}

impl Clusters {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Bonds as (site, neighbour) pairs: right bonds then down bonds per site.
fn bonds(model: &IsingModel) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..model.n_sites()).flat_map(move |i| [(i, model.right(i)), (i, model.down(i))])
}

/// Cluster label (smallest site index) of every site, given which bonds are open.
fn cluster_labels(model: &IsingModel, open: impl Iterator<Item = bool>) -> Vec<usize> {
    let mut uf = Clusters::new(model.n_sites());
    for ((a, b), is_open) in bonds(model).zip(open) {
        if is_open {
            uf.union(a, b);
        }
    }
    (0..model.n_sites()).map(|i| uf.find(i)).collect()
}

/// One Swendsen-Wang update: open aligned bonds with probability
/// `1 − exp(−2βJ)`, then give each cluster a fresh spin from its
/// conditional distribution (a fair coin when `h = 0`).
pub fn swendsen_wang_step<R: Rng + ?Sized>(rng: &mut R, spec: &BoltzmannSpec, config: &mut [Token]) -> Result<()> {
    if spec.model.j <= 0.0 {
        return Err(Error::domain("Swendsen-Wang needs a ferromagnetic coupling J > 0"));
    }
    spec.model.check_config(config)?;
    swendsen_wang_update(rng, spec, config);
    Ok(())
}

fn swendsen_wang_update<R: Rng + ?Sized>(rng: &mut R, spec: &BoltzmannSpec, config: &mut [Token]) {
    let model = &spec.model;
    let p_bond = bond_probability(spec);
    let open: Vec<bool> = bonds(model)
        .map(|(a, b)| config[a] == config[b] && rng.gen::<f64>() < p_bond)
        .collect();
    let labels = cluster_labels(model, open.into_iter());
    let n = model.n_sites();
    let mut sizes = vec![0usize; n];
    for &c in &labels {
        sizes[c] += 1;
    }
    let mut new_spin = vec![0 as Token; n];
    for root in 0..n {
        if sizes[root] > 0 {
            let p_up = 1.0 / (1.0 + (-2.0 * spec.beta * model.h * sizes[root] as f64).exp());
            new_spin[root] = Token::from(rng.gen::<f64>() < p_up);
        }
    }
    for (slot, &c) in config.iter_mut().zip(&labels) {
        *slot = new_spin[c];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Glauber,
    SwendsenWang,
}

/// Settings for a reference MCMC chain. One recorded sample every `thin`
/// updates after `burn_in` updates; a Glauber update is one sweep of `L²`
/// single-spin steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSettings {
    pub sampler: Sampler,
    pub burn_in: usize,
    pub thin: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// Run one chain from a random start and pass every recorded sample to `visit`.
pub fn run_chain(
    spec: &BoltzmannSpec,
    settings: &ChainSettings,
    chain: u64,
    mut visit: impl FnMut(&[Token]),
) -> Result<()> {
    if settings.thin == 0 {
        return Err(Error::domain("thin must be at least 1"));
    }
    if settings.sampler == Sampler::SwendsenWang && spec.model.j <= 0.0 {
        return Err(Error::domain("Swendsen-Wang needs a ferromagnetic coupling J > 0"));
    }
    let mut rng = stream_rng(settings.seed, Stream::Mcmc, chain, 0);
    let n = spec.model.n_sites();
    let mut config: Vec<Token> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let update = |rng: &mut rand_chacha::ChaCha8Rng, config: &mut Vec<Token>| match settings.sampler {
        Sampler::Glauber => {
            for _ in 0..n {
                glauber_update(rng, spec, config);
            }
        }
        Sampler::SwendsenWang => swendsen_wang_update(rng, spec, config),
    };
    for _ in 0..settings.burn_in {
        update(&mut rng, &mut config);
    }
    for _ in 0..settings.n_samples {
        for _ in 0..settings.thin {
            update(&mut rng, &mut config);
        }
        visit(&config);
    }
    Ok(())
}

/// Parameters of the annealing experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealParams {
    pub k: usize,
    pub n_steps: usize,
    pub policy: ResamplingPolicy,
    pub seed: u64,
    pub schedule: MaskingSchedule,
    pub step_mode: StepModeConfig,
    /// Swendsen-Wang samples at the target temperature; 0 skips the chain.
    pub reference_samples: usize,
    pub reference_burn_in: usize,
}

impl Default for AnnealParams {
    fn default() -> Self {
        Self {
            k: 4096,
            n_steps: 200,
            policy: ResamplingPolicy::default(),
            seed: 0,
            schedule: MaskingSchedule::linear(),
            step_mode: StepModeConfig::ExponentialClock,
            reference_samples: 20_000,
            reference_burn_in: 1_000,
        }
    }
}

/// Metrics of one annealing run against exact enumeration and a reference chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealReport {
    pub lattice: usize,
    pub beta_data: f64,
    pub beta_mult: f64,
    pub beta_target: f64,
    pub k: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub terminal_ess: f64,
    pub mean_energy: f64,
    pub exact_mean_energy: f64,
    pub mean_magnetization: f64,
    pub exact_mean_magnetization: f64,
    pub correlations: Vec<f64>,
    pub exact_correlations: Vec<f64>,
    pub w2_energy: f64,
    pub w2_magnetization: f64,
    pub correlation_mse: f64,
    pub reference: Option<ReferenceMetrics>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub samples: usize,
    pub correlations: Vec<f64>,
    pub w2_energy: f64,
    pub w2_magnetization: f64,
    pub correlation_mse: f64,
}

/// One weighted particle of the final ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub config_index: usize,
    pub energy: f64,
    pub magnetization: f64,
    pub log_weight: f64,
}

#[derive(Debug, Clone)]
pub struct AnnealOutcome {
    pub report: AnnealReport,
    pub samples: Vec<SampleRow>,
}

/// Exact data distribution and denoiser at one temperature, reusable across runs.
pub struct AnnealExperiment {
    data: ExactBoltzmann,
    denoiser: TabularDenoiser,
}

impl AnnealExperiment {
    pub fn new(spec_data: &BoltzmannSpec) -> Result<Self> {
        let data = exact_boltzmann(spec_data)?;
        let denoiser = TabularDenoiser::from_arc(Arc::new(data.data.clone()));
        Ok(Self { data, denoiser })
    }

    pub fn data(&self) -> &ExactBoltzmann {
        &self.data
    }

    /// Sample `p_β_data^β_mult` with the corrected sampler and compare to the
    /// Boltzmann distribution at `β_data · β_mult`.
    pub fn run(&self, beta_mult: f64, params: &AnnealParams) -> Result<AnnealOutcome> {
        let started = std::time::Instant::now();
        let spec = self.data.spec;
        let model = spec.model;
        let beta_target = spec.beta * beta_mult;
        let exact = exact_boltzmann(&BoltzmannSpec::new(model, beta_target)?)?;
        let target = TargetSpec::Anneal { beta: beta_mult };
        let mut config = SmcConfig::new(params.k, params.n_steps, params.seed).with_policy(params.policy);
        config.step_mode = params.step_mode;
        let run = smc::run(&target, &[&self.denoiser], &params.schedule, &config)?;
        let ens = &run.ensemble;
        let weights = ens.normalized_weights()?;
        let configs: Vec<Vec<Token>> = ens.particles.iter().map(|p| p.tokens().to_vec()).collect();
        let obs = observables(&model, &configs)?;

        let weighted = |xs: &[f64]| xs.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>();
        let exact_probs = exact.data.probs();
        let correlations = obs.mean_correlations(&weights);
        let w2_energy = wasserstein2_weighted(&obs.energies, &weights, &exact.energies, exact_probs)?;
        let w2_magnetization =
            wasserstein2_weighted(&obs.magnetizations, &weights, &exact.magnetizations, exact_probs)?;

        let reference = if params.reference_samples > 0 {
            let settings = ChainSettings {
                sampler: Sampler::SwendsenWang,
                burn_in: params.reference_burn_in,
                thin: 1,
                n_samples: params.reference_samples,
                seed: params.seed,
            };
            let mut chain_configs = Vec::with_capacity(params.reference_samples);
            run_chain(&exact.spec, &settings, 0, |c| chain_configs.push(c.to_vec()))?;
            let chain_obs = observables(&model, &chain_configs)?;
            let uniform = vec![1.0 / chain_configs.len() as f64; chain_configs.len()];
            let chain_corr = chain_obs.mean_correlations(&uniform);
            Some(ReferenceMetrics {
                samples: chain_configs.len(),
                correlation_mse: mse(&correlations, &chain_corr),
                correlations: chain_corr,
                w2_energy: wasserstein2_weighted(&obs.energies, &weights, &chain_obs.energies, &uniform)?,
                w2_magnetization: wasserstein2_weighted(
                    &obs.magnetizations,
                    &weights,
                    &chain_obs.magnetizations,
                    &uniform,
                )?,
            })
        } else {
            None
        };

        let samples = configs
            .iter()
            .enumerate()
            .map(|(i, c)| SampleRow {
                config_index: config_index(c),
                energy: obs.energies[i],
                magnetization: obs.magnetizations[i],
                log_weight: ens.log_weights[i],
            })
            .collect();
        let report = AnnealReport {
            lattice: model.l,
            beta_data: spec.beta,
            beta_mult,
            beta_target,
            k: params.k,
            n_steps: params.n_steps,
            seed: params.seed,
            terminal_ess: ens.ess(),
            mean_energy: weighted(&obs.energies),
            exact_mean_energy: exact.mean_energy,
            mean_magnetization: weighted(&obs.magnetizations),
            exact_mean_magnetization: exact.mean_magnetization,
            correlation_mse: mse(&correlations, &exact.correlations),
            correlations,
            exact_correlations: exact.correlations.clone(),
            w2_energy,
            w2_magnetization,
            reference,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        Ok(AnnealOutcome { report, samples })
    }
}

/// Build the experiment for `spec_data` and run it once.
pub fn anneal_experiment(spec_data: &BoltzmannSpec, beta_mult: f64, params: &AnnealParams) -> Result<AnnealOutcome> {
    AnnealExperiment::new(spec_data)?.run(beta_mult, params)
}

/// Per-sample CSV: `config_index,energy,magnetization,log_weight`.
pub fn write_samples_csv<W: std::io::Write>(rows: &[SampleRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "config_index,energy,magnetization,log_weight")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.config_index, r.energy, r.magnetization, r.log_weight
        )?;
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}
