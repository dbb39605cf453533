//! De-masking posteriors p(x_0[k] = j | x_t) and the exact tabular model.

use std::path::Path;
use std::sync::Arc;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ising::{exact_boltzmann, BoltzmannSpec, IsingModel};
use crate::process::{score_from_denoiser, PositionTable, RatioTable};
use crate::schedule::MaskingSchedule;
use crate::state::{
    check_capacity, data_tokens, masked_positions, SequenceState, Token, Vocabulary, DEFAULT_ENUMERATION_LIMIT,
};

/// Per masked position, a distribution over the `V` ordinary tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput(pub Arc<PositionTable>);

impl std::ops::Deref for DenoiserOutput {
    type Target = PositionTable;
    fn deref(&self) -> &PositionTable {
        &self.0
    }
}

/// Anything that can predict clean tokens for the masked coordinates of a state.
pub trait Denoiser: Send + Sync {
    fn vocab(&self) -> Vocabulary;

    fn seq_len(&self) -> usize;

    /// Posterior for every masked position of `state`, in ascending position order.
    fn posterior(&self, state: &SequenceState, t: f64) -> Result<DenoiserOutput>;

    /// Whether `posterior` ignores `t`. Callers may then reuse an output for
    /// as long as the state is unchanged.
    fn time_homogeneous(&self) -> bool {
        false
    }
}

/// Turn a posterior into the probability-ratio table the reverse rates consume.
pub fn ratios_from_posterior(schedule: &MaskingSchedule, t: f64, posterior: &PositionTable) -> Result<RatioTable> {
    let mut values = Vec::with_capacity(posterior.values().len());
    for (_, row) in posterior.rows() {
        values.extend(score_from_denoiser(schedule, t, row)?);
    }
    Ok(RatioTable(PositionTable::new(
        posterior.positions().to_vec(),
        posterior.width(),
        values,
    )?))
}

pub fn denoiser_ratios(
    denoiser: &dyn Denoiser,
    schedule: &MaskingSchedule,
    t: f64,
    state: &SequenceState,
) -> Result<RatioTable> {
    let posterior = denoiser.posterior(state, t)?;
    ratios_from_posterior(schedule, t, &posterior)
}

/// An explicit distribution over all `V^d` unmasked sequences, stored in
/// lexicographic order (position 0 most significant).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataDistribution {
    vocab: Vocabulary,
    d: usize,
    probs: Vec<f64>,
}

impl TabularDataDistribution {
    pub fn new(vocab: Vocabulary, d: usize, probs: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::domain("sequence length must be at least 1"));
        }
        let n = check_capacity("data distribution", vocab.size(), d, DEFAULT_ENUMERATION_LIMIT)?;
        if probs.len() != n {
            return Err(Error::contract(format!(
                "expected {n} probabilities for V={} d={d}, got {}",
                vocab.size(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::domain("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { vocab, d, probs })
    }

    /// Normalize nonnegative weights into a distribution.
    pub fn from_weights(vocab: Vocabulary, d: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Degenerate("data weights have no mass".into()));
        }
        Self::new(vocab, d, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(vocab: Vocabulary, d: usize) -> Result<Self> {
        let n = check_capacity("data distribution", vocab.size(), d, DEFAULT_ENUMERATION_LIMIT)?;
        Self::new(vocab, d, vec![1.0 / n as f64; n])
    }

    /// Independent coordinates with the given per-position marginals.
    pub fn product_form(vocab: Vocabulary, marginals: &[Vec<f64>]) -> Result<Self> {
        let d = marginals.len();
        let v = vocab.size();
        if marginals.iter().any(|m| m.len() != v) {
            return Err(Error::contract("every marginal needs V entries"));
        }
        let n = check_capacity("data distribution", v, d, DEFAULT_ENUMERATION_LIMIT)?;
        let probs = (0..n)
            .map(|i| {
                data_tokens(i, v, d)
                    .iter()
                    .zip(marginals)
                    .map(|(&tok, m)| m[tok as usize])
                    .product()
            })
            .collect();
        Self::from_weights(vocab, d, probs)
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.d
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, tokens: &[Token]) -> f64 {
        self.probs[crate::state::data_index(tokens, self.vocab.size())]
    }

    pub fn tokens(&self, index: usize) -> Vec<Token> {
        data_tokens(index, self.vocab.size(), self.d)
    }

    pub fn from_spec(spec: &DataSpec) -> Result<Self> {
        match spec {
            DataSpec::Table(t) => Self::new(Vocabulary::new(t.v)?, t.d, t.probs.clone()),
            DataSpec::Ising(i) => {
                let model = IsingModel::new(i.l, i.j, i.h)?;
                let spec = BoltzmannSpec::new(model, i.beta)?;
                Ok(exact_boltzmann(&spec)?.data)
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: DataSpec = serde_json::from_str(&text)?;
        Self::from_spec(&spec)
    }

    pub fn to_spec(&self) -> DataSpec {
        DataSpec::Table(TableSpec {
            d: self.d,
            v: self.vocab.size() as u32,
            probs: self.probs.clone(),
        })
    }
}

/// On-disk form of a data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSpec {
    Ising(IsingSpec),
    Table(TableSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub d: usize,
    #[serde(rename = "V")]
    pub v: u32,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IsingTag {
    #[serde(rename = "ising")]
    Ising,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsingSpec {
    #[serde(rename = "type")]
    pub kind: IsingTag,
    #[serde(rename = "L")]
    pub l: usize,
    pub beta: f64,
    #[serde(rename = "J", default = "one")]
    pub j: f64,
    #[serde(default)]
    pub h: f64,
}

fn one() -> f64 {
    1.0
}

/// Exact Bayes posterior p(x_0[k] = j | x_t = state) for every masked k,
/// conditioning jointly on all unmasked coordinates. Under masking
/// diffusion the observed pattern carries all the evidence, so `t` only
/// has to be a valid time.
pub fn exact_posterior(data: &TabularDataDistribution, t: f64, state: &SequenceState) -> Result<DenoiserOutput> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("t = {t} outside [0, 1]")));
    }
    Ok(DenoiserOutput(Arc::new(posterior_table(data, state)?)))
}

fn posterior_table(data: &TabularDataDistribution, state: &SequenceState) -> Result<PositionTable> {
    let vocab = data.vocab;
    let v = vocab.size();
    let d = data.d;
    if state.len() != d {
        return Err(Error::contract(format!(
            "state has length {}, data has length {d}",
            state.len()
        )));
    }
    let masked = masked_positions(state, vocab);
    let m = masked.len();
    if m == 0 {
        return Ok(PositionTable::empty(v));
    }

    // Place value of each position in the data index.
    let mut place = vec![1usize; d];
    for k in (0..d.saturating_sub(1)).rev() {
        place[k] = place[k + 1] * v;
    }
    let base: usize = state
        .tokens()
        .iter()
        .zip(&place)
        .filter(|(&tok, _)| tok != vocab.mask_id())
        .map(|(&tok, &w)| tok as usize * w)
        .sum();

    let mut acc = vec![0.0; m * v];
    let mut total = 0.0;
    let mut digits = vec![0usize; m];
    let mut index = base;
    'completions: loop {
        let p = data.probs[index];
        if p > 0.0 {
            total += p;
            for (i, &dig) in digits.iter().enumerate() {
                acc[i * v + dig] += p;
            }
        }
        // odometer over the masked digits, last masked position fastest
        let mut i = m;
        loop {
            if i == 0 {
                break 'completions;
            }
            i -= 1;
            let w = place[masked[i]];
            if digits[i] + 1 < v {
                digits[i] += 1;
                index += w;
                continue 'completions;
            }
            index -= digits[i] * w;
            digits[i] = 0;
        }
    }

    if total.is_nan() || total <= 0.0 {
        return Err(Error::Evidence(state.tokens().to_vec()));
    }
    for x in &mut acc {
        *x /= total;
    }
    PositionTable::new(masked, v, acc)
}

/// Minimum number of completions before a posterior is worth memoizing.
const CACHE_MIN_WORK: usize = 256;
const CACHE_MAX_ENTRIES: usize = 200_000;

/// The exact posterior of a tabular data distribution, memoized for states
/// whose posterior is expensive to enumerate.
pub struct TabularDenoiser {
    data: Arc<TabularDataDistribution>,
    cache: DashMap<Vec<Token>, Arc<PositionTable>>,
}

impl TabularDenoiser {
    pub fn new(data: TabularDataDistribution) -> Self {
        Self::from_arc(Arc::new(data))
    }

    pub fn from_arc(data: Arc<TabularDataDistribution>) -> Self {
        Self {
            data,
            cache: DashMap::new(),
        }
    }

    pub fn data(&self) -> &TabularDataDistribution {
        &self.data
    }
}

impl std::fmt::Debug for TabularDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TabularDenoiser")
            .field("vocab", &self.data.vocab)
            .field("d", &self.data.d)
            .field("cached", &self.cache.len())
            .finish()
    }
}

impl Denoiser for TabularDenoiser {
    fn vocab(&self) -> Vocabulary {
        self.data.vocab
    }

    fn seq_len(&self) -> usize {
        self.data.d
    }

    fn posterior(&self, state: &SequenceState, t: f64) -> Result<DenoiserOutput> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("t = {t} outside [0, 1]")));
        }
        let m = state.num_masked(self.data.vocab);
        let work = self.data.vocab.size().saturating_pow(m as u32);
        if work < CACHE_MIN_WORK {
            return Ok(DenoiserOutput(Arc::new(posterior_table(&self.data, state)?)));
        }
        if let Some(hit) = self.cache.get(state.tokens()) {
            return Ok(DenoiserOutput(hit.clone()));
        }
        let table = Arc::new(posterior_table(&self.data, state)?);
        if self.cache.len() < CACHE_MAX_ENTRIES {
            self.cache.insert(state.tokens().to_vec(), table.clone());
        }
        Ok(DenoiserOutput(table))
    }

    fn time_homogeneous(&self) -> bool {
        true
    }
}

/// The exact posterior with deterministic multiplicative noise on every
/// entry: `p_j · exp(scale · u_j)` renormalized, `u_j ∈ [−1, 1)` a hash of
/// `(seed, state, position, j)`. Stands in for an imperfect trained model.
#[derive(Debug)]
pub struct NoisyTabularDenoiser {
    inner: TabularDenoiser,
    scale: f64,
    seed: u64,
}

impl NoisyTabularDenoiser {
    pub fn new(data: TabularDataDistribution, scale: f64, seed: u64) -> Self {
        Self {
            inner: TabularDenoiser::new(data),
            scale,
            seed,
        }
    }
}

impl Denoiser for NoisyTabularDenoiser {
    fn vocab(&self) -> Vocabulary {
        self.inner.vocab()
    }

    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    fn posterior(&self, state: &SequenceState, t: f64) -> Result<DenoiserOutput> {
        let exact = self.inner.posterior(state, t)?;
        let mut h = self.seed;
        for &tok in state.tokens() {
            h = crate::rng::mix(h ^ u64::from(tok));
        }
        let width = exact.width();
        let mut values = Vec::with_capacity(exact.values().len());
        for (k, row) in exact.rows() {
            let noisy: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    let u = crate::rng::unit_f64(crate::rng::mix(h ^ ((k as u64) << 32) ^ j as u64));
                    p * (self.scale * (2.0 * u - 1.0)).exp()
                })
                .collect();
            let total: f64 = noisy.iter().sum();
            values.extend(noisy.into_iter().map(|x| x / total));
        }
        Ok(DenoiserOutput(Arc::new(PositionTable::new(
            exact.positions().to_vec(),
            width,
            values,
        )?)))
    }

    fn time_homogeneous(&self) -> bool {
        true
    }
}
