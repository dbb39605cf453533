//! Corrected reverse rates and Feynman-Kac weight functions.
//!
//! Every corrector consumes the same inputs as the base sampler: the
//! schedule coefficient (1/α_t)(∂α_t/∂t) and, per masked position `k`, the
//! ratios `r_k[j] = p_t(x with k←j) / p_t(x)`. Each returns new
//! nonnegative rates for the masked positions together with the value of
//! the weight function `g` at the current state; integrating `g` along a
//! trajectory and exponentiating gives its importance weight.
//!
//! Writing `c = (1/α_t)(∂α_t/∂t) < 0` and summing over masked positions `k`
//! and tokens `j`:
//!
//! | target | rate_k[j] | g |
//! |---|---|---|
//! | base `p` | `−c r` | `0` |
//! | anneal `p^β` | `−β c r^β` | `β c Σ (r − r^β)` |
//! | product `p¹p²` | `−2 c r¹ r²` | `c Σ (r¹ + r² − 2 r¹ r²)` |
//! | geometric `Π pⁿ^βₙ`, `Σβₙ = 1` | `−c Π (rⁿ)^βₙ` | `c Σ (Σ βₙ rⁿ − Π (rⁿ)^βₙ)` |
//! | reward `p·exp(β_τ r)` | `−c r e^{β_τ Δ}` | `c Σ (r − r e^{β_τ Δ}) + β'_τ R(x)` |
//!
//! with `Δ = R(x with k←j) − R(x)`. For the single-position linear schedule
//! the annealing weight reads `β (1−t)^{β−1} / t^β · Σ_j post_j^β − β/t`, where
//! `post_j^β = exp(β log post_j)` are the unnormalized tempered denoiser
//! probabilities; the `−β/t` offset is common to every particle with the same
//! number of masks.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::process::{check_covers_masks, PositionTable, RatioTable, ReverseRates};
use crate::schedule::MaskingSchedule;
use crate::state::{SequenceState, Token, Vocabulary};

/// A reward defined on every state, masked coordinates included.
pub trait RewardFn: Send + Sync {
    fn reward(&self, state: &SequenceState) -> f64;
}

impl<F> RewardFn for F
where
    F: Fn(&SequenceState) -> f64 + Send + Sync,
{
    fn reward(&self, state: &SequenceState) -> f64 {
        self(state)
    }
}

/// `R(x) = Σ_k φ_k(x[k])` with `φ_k(mask) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableReward {
    vocab: Vocabulary,
    /// One row of `V` values per position, or a single row shared by all.
    phi: Vec<Vec<f64>>,
}

impl SeparableReward {
    pub fn new(vocab: Vocabulary, phi: Vec<Vec<f64>>) -> Result<Self> {
        if phi.is_empty() || phi.iter().any(|row| row.len() != vocab.size()) {
            return Err(Error::contract("reward table needs rows of V values"));
        }
        if phi.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::domain("reward table must be finite"));
        }
        Ok(Self { vocab, phi })
    }

    pub fn shared(vocab: Vocabulary, phi: Vec<f64>) -> Result<Self> {
        Self::new(vocab, vec![phi])
    }

    pub fn token_value(&self, position: usize, token: Token) -> f64 {
        if token == self.vocab.mask_id() {
            return 0.0;
        }
        let row = if self.phi.len() == 1 {
            &self.phi[0]
        } else {
            &self.phi[position]
        };
        row[token as usize]
    }
}

impl RewardFn for SeparableReward {
    fn reward(&self, state: &SequenceState) -> f64 {
        state
            .tokens()
            .iter()
            .enumerate()
            .map(|(k, &tok)| self.token_value(k, tok))
            .sum()
    }
}

/// Extends a reward on clean sequences to partially masked ones by filling
/// each masked coordinate with the denoiser's most probable token.
pub struct DenoiserFillReward {
    inner: Arc<dyn RewardFn>,
    denoiser: Arc<dyn Denoiser>,
    t: f64,
}

impl DenoiserFillReward {
    pub fn new(inner: Arc<dyn RewardFn>, denoiser: Arc<dyn Denoiser>, t: f64) -> Self {
        Self { inner, denoiser, t }
    }
}

impl RewardFn for DenoiserFillReward {
    fn reward(&self, state: &SequenceState) -> f64 {
        if state.is_fully_unmasked(self.denoiser.vocab()) {
            return self.inner.reward(state);
        }
        let Ok(post) = self.denoiser.posterior(state, self.t) else {
            return f64::NAN;
        };
        let mut filled = state.clone();
        for (k, row) in post.rows() {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &p)| if p > acc.1 { (j, p) } else { acc },
                )
                .0;
            filled.set(k, best as Token);
        }
        self.inner.reward(&filled)
    }
}

/// Inverse-temperature schedule for reward tilting, on reverse time τ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// β_τ = scale · τ
    Linear { scale: f64 },
    /// β_τ = value
    Constant { value: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Linear { scale: 1.0 }
    }
}

impl BetaSchedule {
    pub fn value(&self, tau: f64) -> f64 {
        match *self {
            BetaSchedule::Linear { scale } => scale * tau,
            BetaSchedule::Constant { value } => value,
        }
    }

    pub fn derivative(&self, _tau: f64) -> f64 {
        match *self {
            BetaSchedule::Linear { scale } => scale,
            BetaSchedule::Constant { .. } => 0.0,
        }
    }
}

/// Which corrected distribution to sample.
#[derive(Clone)]
pub enum TargetSpec {
    Base,
    /// p^β
    Anneal {
        beta: f64,
    },
    /// Π_n pⁿ over all supplied denoisers (two or more).
    Product,
    /// Π_n pⁿ^βₙ with Σ βₙ = 1.
    GeoAvg {
        betas: Vec<f64>,
    },
    /// p · exp(β_τ R)
    Reward {
        reward: Arc<dyn RewardFn>,
        beta: BetaSchedule,
    },
}

impl fmt::Debug for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSpec::Base => write!(f, "Base"),
            TargetSpec::Anneal { beta } => write!(f, "Anneal {{ beta: {beta} }}"),
            TargetSpec::Product => write!(f, "Product"),
            TargetSpec::GeoAvg { betas } => write!(f, "GeoAvg {{ betas: {betas:?} }}"),
            TargetSpec::Reward { beta, .. } => write!(f, "Reward {{ beta: {beta:?} }}"),
        }
    }
}

impl TargetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TargetSpec::Base => "base",
            TargetSpec::Anneal { .. } => "anneal",
            TargetSpec::Product => "product",
            TargetSpec::GeoAvg { .. } => "geo_avg",
            TargetSpec::Reward { .. } => "reward",
        }
    }

    /// Check parameters and that `n_denoisers` fits the variant.
    pub fn validate(&self, n_denoisers: usize) -> Result<()> {
        let expect = |n: usize| {
            if n_denoisers == n {
                Ok(())
            } else {
                Err(Error::contract(format!(
                    "{} target needs {n} denoiser(s), got {n_denoisers}",
                    self.name()
                )))
            }
        };
        match self {
            TargetSpec::Base | TargetSpec::Reward { .. } => expect(1),
            TargetSpec::Anneal { beta } => {
                if !(*beta > 0.0 && beta.is_finite()) {
                    return Err(Error::domain(format!("anneal beta must be > 0, got {beta}")));
                }
                expect(1)
            }
            TargetSpec::Product => {
                if n_denoisers < 2 {
                    return Err(Error::contract("product target needs at least 2 denoisers"));
                }
                Ok(())
            }
            TargetSpec::GeoAvg { betas } => {
                check_geo_betas(betas)?;
                expect(betas.len())
            }
        }
    }
}

fn check_geo_betas(betas: &[f64]) -> Result<()> {
    if betas.is_empty() {
        return Err(Error::contract("geometric average needs at least one factor"));
    }
    if betas.iter().any(|b| !b.is_finite()) {
        return Err(Error::domain("geometric-average exponents must be finite"));
    }
    let sum: f64 = betas.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::contract(format!(
            "geometric-average exponents sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Corrected rates for the masked positions plus g at the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedStep {
    pub rates: ReverseRates,
    pub g: f64,
}

fn check_inputs(vocab: Vocabulary, state: &SequenceState, ratios: &[&RatioTable]) -> Result<()> {
    for r in ratios {
        check_covers_masks(vocab, state, r)?;
    }
    Ok(())
}

fn build(layout: &PositionTable, values: Vec<f64>, g: f64) -> Result<CorrectedStep> {
    let rates = PositionTable::new(layout.positions().to_vec(), layout.width(), values)?;
    Ok(CorrectedStep {
        rates: ReverseRates::from_table(rates),
        g,
    })
}

/// Uncorrected reverse rates; g = 0.
pub fn base_step(
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    t: f64,
    state: &SequenceState,
    ratios: &RatioTable,
) -> Result<CorrectedStep> {
    check_inputs(vocab, state, &[ratios])?;
    let coeff = -schedule.log_alpha_rate(t);
    build(ratios, ratios.values().iter().map(|&r| coeff * r).collect(), 0.0)
}

/// Target p_t^β: tempered ratios, scaled rates, and the annealing weight.
pub fn anneal_step(
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    t: f64,
    state: &SequenceState,
    ratios: &RatioTable,
    beta: f64,
) -> Result<CorrectedStep> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::domain(format!("anneal beta must be > 0, got {beta}")));
    }
    check_inputs(vocab, state, &[ratios])?;
    let lar = schedule.log_alpha_rate(t);
    let coeff = -beta * lar;
    let mut values = Vec::with_capacity(ratios.values().len());
    let mut bracket = 0.0;
    for &r in ratios.values() {
        let tempered = r.powf(beta);
        values.push(coeff * tempered);
        bracket += r - tempered;
    }
    build(ratios, values, beta * lar * bracket)
}

/// Target p¹_t p²_t.
pub fn product_step(
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    t: f64,
    state: &SequenceState,
    ratios1: &RatioTable,
    ratios2: &RatioTable,
) -> Result<CorrectedStep> {
    if !ratios1.same_layout(ratios2) {
        return Err(Error::contract("product factors cover different masked positions"));
    }
    check_inputs(vocab, state, &[ratios1, ratios2])?;
    let lar = schedule.log_alpha_rate(t);
    let coeff = -2.0 * lar;
    let mut values = Vec::with_capacity(ratios1.values().len());
    let mut bracket = 0.0;
    for (&a, &b) in ratios1.values().iter().zip(ratios2.values()) {
        let joint = a * b;
        values.push(coeff * joint);
        bracket += (a - joint) + (b - joint);
    }
    build(ratios1, values, lar * bracket)
}

/// Target Π_n (pⁿ_t)^βₙ with Σ βₙ = 1.
pub fn geo_avg_step(
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    t: f64,
    state: &SequenceState,
    ratios: &[&RatioTable],
    betas: &[f64],
) -> Result<CorrectedStep> {
    check_geo_betas(betas)?;
    if ratios.len() != betas.len() {
        return Err(Error::contract(format!(
            "{} ratio tables for {} exponents",
            ratios.len(),
            betas.len()
        )));
    }
    if ratios.iter().any(|r| !r.same_layout(ratios[0])) {
        return Err(Error::contract(
            "geometric-average factors cover different masked positions",
        ));
    }
    check_inputs(vocab, state, ratios)?;
    let lar = schedule.log_alpha_rate(t);
    let coeff = -lar;
    let n = ratios[0].values().len();
    let mut values = Vec::with_capacity(n);
    let mut bracket = 0.0;
    for idx in 0..n {
        let mut geo = 1.0;
        let mut arith = 0.0;
        for (table, &b) in ratios.iter().zip(betas) {
            let r = table.values()[idx];
            geo *= r.powf(b);
            arith += b * r;
        }
        values.push(coeff * geo);
        bracket += arith - geo;
    }
    build(ratios[0], values, lar * bracket)
}

/// Target Π_n pⁿ_t for any number of factors, as the geometric average
/// with exponents 1/N annealed at β = N. For N = 2 this is `product_step`.
pub fn product_n_step(
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    t: f64,
    state: &SequenceState,
    ratios: &[&RatioTable],
) -> Result<CorrectedStep> {
    let n = ratios.len();
    if n < 2 {
        return Err(Error::contract("product target needs at least 2 factors"));
    }
    if n == 2 {
        return product_step(schedule, vocab, t, state, ratios[0], ratios[1]);
    }
    let betas = vec![1.0 / n as f64; n];
    // exponents 1/N may not sum to exactly 1 in floating point; the
    // composition below only needs them to be equal.
    if ratios.iter().any(|r| !r.same_layout(ratios[0])) {
        return Err(Error::contract("product factors cover different masked positions"));
    }
    check_inputs(vocab, state, ratios)?;
    let lar = schedule.log_alpha_rate(t);
    let nf = n as f64;
    let len = ratios[0].values().len();
    let mut values = Vec::with_capacity(len);
    let mut geo_bracket = 0.0;
    let mut anneal_bracket = 0.0;
    for idx in 0..len {
        let mut geo = 1.0;
        let mut arith = 0.0;
        for (table, &b) in ratios.iter().zip(&betas) {
            let r = table.values()[idx];
            geo *= r.powf(b);
            arith += b * r;
        }
        let annealed = geo.powf(nf);
        values.push(-nf * lar * annealed);
        geo_bracket += arith - geo;
        anneal_bracket += geo - annealed;
    }
    // annealing a weighted process at β scales its weight by β
    let g = nf * lar * anneal_bracket + nf * lar * geo_bracket;
    build(ratios[0], values, g)
}

/// Target p_t · exp(β_τ R): rates tilted by reward differences, plus the
/// reward-growth term β'_τ R(x), which is present even when nothing is masked.
#[allow(clippy::too_many_arguments)]
pub fn reward_step(
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    t: f64,
    state: &SequenceState,
    ratios: &RatioTable,
    reward: &dyn RewardFn,
    beta_t: f64,
    dbeta_t: f64,
) -> Result<CorrectedStep> {
    check_inputs(vocab, state, &[ratios])?;
    let checked = |s: &SequenceState| {
        let r = reward.reward(s);
        if r.is_finite() {
            Ok(r)
        } else {
            Err(Error::Reward {
                value: r,
                state: s.tokens().to_vec(),
            })
        }
    };
    let here = checked(state)?;
    let lar = schedule.log_alpha_rate(t);
    let coeff = -lar;
    let mut values = Vec::with_capacity(ratios.values().len());
    let mut bracket = 0.0;
    for (k, row) in ratios.rows() {
        for (j, &r) in row.iter().enumerate() {
            let delta = checked(&state.with(k, j as Token))? - here;
            let tilted = r * (beta_t * delta).exp();
            values.push(coeff * tilted);
            bracket += r - tilted;
        }
    }
    build(ratios, values, lar * bracket + dbeta_t * here)
}

/// Dispatch on `target`. `ratios` holds one table per denoiser; `tau` is
/// the reverse time used by reward schedules.
pub fn corrected_step(
    target: &TargetSpec,
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    t: f64,
    tau: f64,
    state: &SequenceState,
    ratios: &[RatioTable],
) -> Result<CorrectedStep> {
    match target {
        TargetSpec::Base => base_step(schedule, vocab, t, state, &ratios[0]),
        TargetSpec::Anneal { beta } => anneal_step(schedule, vocab, t, state, &ratios[0], *beta),
        TargetSpec::Product => {
            let refs: Vec<&RatioTable> = ratios.iter().collect();
            product_n_step(schedule, vocab, t, state, &refs)
        }
        TargetSpec::GeoAvg { betas } => {
            let refs: Vec<&RatioTable> = ratios.iter().collect();
            geo_avg_step(schedule, vocab, t, state, &refs, betas)
        }
        TargetSpec::Reward { reward, beta } => reward_step(
            schedule,
            vocab,
            t,
            state,
            &ratios[0],
            reward.as_ref(),
            beta.value(tau),
            beta.derivative(tau),
        ),
    }
}

/// The corrected rates at `position`, normalized into the distribution of
/// the token it unmasks to.
pub fn corrected_posterior(step: &CorrectedStep, position: usize) -> Result<Vec<f64>> {
    let row = step
        .rates
        .row_for_position(position)
        .ok_or_else(|| Error::contract(format!("position {position} is not masked in this step")))?;
    let total: f64 = row.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate(format!(
            "corrected rates at position {position} carry no mass"
        )));
    }
    Ok(row.iter().map(|&x| x / total).collect())
}

/// All corrected posteriors of a step as one table.
pub fn corrected_posteriors(step: &CorrectedStep) -> Result<PositionTable> {
    let mut values = Vec::with_capacity(step.rates.values().len());
    for &k in step.rates.positions() {
        values.extend(corrected_posterior(step, k)?);
    }
    PositionTable::new(step.rates.positions().to_vec(), step.rates.width(), values)
}
