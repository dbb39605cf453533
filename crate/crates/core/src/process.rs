//! Forward masking and reverse de-masking processes.
//!
//! The forward process masks every coordinate independently; its rate into the
//! mask is −(1/α_t)(∂α_t/∂t). The reverse process only ever moves a masked
//! coordinate to an ordinary token, at rate
//! `−(1/α_t)(∂α_t/∂t) · p_t(x with k←j) / p_t(x)`, so both are stored in
//! factorized form: one row of `V` entries per masked position.

use rand::Rng;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::MaskingSchedule;
use crate::state::{masked_positions, SequenceState, Token, Vocabulary};

/// One row of `width` values for each listed position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    positions: Vec<usize>,
    width: usize,
    values: Vec<f64>,
}

impl PositionTable {
    pub fn new(positions: Vec<usize>, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != positions.len() * width {
            return Err(Error::contract(format!(
                "table with {} positions of width {width} needs {} values, got {}",
                positions.len(),
                positions.len() * width,
                values.len()
            )));
        }
        Ok(Self {
            positions,
            width,
            values,
        })
    }

    pub fn empty(width: usize) -> Self {
        Self {
            positions: Vec::new(),
            width,
            values: Vec::new(),
        }
    }

    #[inline]
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    /// Row belonging to sequence position `k`, if listed.
    pub fn row_for_position(&self, k: usize) -> Option<&[f64]> {
        self.positions.binary_search(&k).ok().map(|i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.positions
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.width.max(1)))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            positions: self.positions.clone(),
            width: self.width,
            values: self.values.iter().map(|&x| f(x)).collect(),
        }
    }

    pub(crate) fn same_layout(&self, other: &Self) -> bool {
        self.positions == other.positions && self.width == other.width
    }
}

/// Per masked position, the probability ratios p_t(x with k←j) / p_t(x).
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable(pub PositionTable);

impl std::ops::Deref for RatioTable {
    type Target = PositionTable;
    fn deref(&self) -> &PositionTable {
        &self.0
    }
}

/// Off-diagonal reverse jump rates per masked position, plus the per-position
/// total hazard. The diagonal of the generator is the negative hazard.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseRates {
    rates: PositionTable,
    hazards: Vec<f64>,
}

impl ReverseRates {
    pub fn from_table(rates: PositionTable) -> Self {
        let hazards = (0..rates.len()).map(|i| rates.row(i).iter().sum()).collect();
        Self { rates, hazards }
    }

    pub fn empty(width: usize) -> Self {
        Self::from_table(PositionTable::empty(width))
    }

    pub fn table(&self) -> &PositionTable {
        &self.rates
    }

    pub fn hazards(&self) -> &[f64] {
        &self.hazards
    }

    pub fn total_hazard(&self) -> f64 {
        self.hazards.iter().sum()
    }
}

impl std::ops::Deref for ReverseRates {
    type Target = PositionTable;
    fn deref(&self) -> &PositionTable {
        &self.rates
    }
}

/// How a masked position's unmasking probability over a step is derived
/// from its hazard λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepMode {
    /// 1 − exp(−λ·Δτ): exact for rates held constant over the step.
    #[default]
    ExponentialClock,
    /// min(λ·Δτ, 1): the literal first-order Euler kernel.
    FirstOrder,
}

/// Forward kernel p(x_s = j | x_t = i) for a single coordinate, t ≤ s.
pub fn forward_transition_prob(
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    s: f64,
    t: f64,
    i: Token,
    j: Token,
) -> Result<f64> {
    let keep = schedule.alpha_ratio(s, t)?;
    let m = vocab.mask_id();
    if i > m || j > m {
        return Err(Error::domain("token outside vocabulary"));
    }
    let delta = |a: Token, b: Token| if a == b { 1.0 } else { 0.0 };
    Ok((1.0 - keep) * delta(m, j) + keep * delta(i, j))
}

/// Forward generator entry A_t(i, j) = (1/α_t)(∂α_t/∂t)(δ_ij − δ_mj).
pub fn forward_rate(schedule: &MaskingSchedule, vocab: Vocabulary, t: f64, i: Token, j: Token) -> f64 {
    let m = vocab.mask_id();
    let delta = |a: Token, b: Token| if a == b { 1.0 } else { 0.0 };
    schedule.log_alpha_rate(t) * (delta(i, j) - delta(m, j))
}

/// p_t(j)/p_t(m) = α_t/(1−α_t) · p(x_0 = j | x_t = m) for j ≠ m.
pub fn score_from_denoiser(schedule: &MaskingSchedule, t: f64, posterior: &[f64]) -> Result<Vec<f64>> {
    if !(t >= schedule.t_min && t < 1.0) {
        return Err(Error::domain(format!(
            "score needs t in [{}, 1), got {t}",
            schedule.t_min
        )));
    }
    let odds = schedule.odds(t);
    Ok(posterior.iter().map(|&p| odds * p).collect())
}

/// Base reverse rates B(x → x with k←j) = −(1/α_t)(∂α_t/∂t) · ratio_k[j].
pub fn reverse_rates(
    schedule: &MaskingSchedule,
    vocab: Vocabulary,
    t: f64,
    state: &SequenceState,
    ratios: &RatioTable,
) -> Result<ReverseRates> {
    check_covers_masks(vocab, state, ratios)?;
    let coeff = -schedule.log_alpha_rate(t);
    Ok(ReverseRates::from_table(ratios.map(|r| coeff * r)))
}

pub(crate) fn check_covers_masks(vocab: Vocabulary, state: &SequenceState, table: &PositionTable) -> Result<()> {
    let masked = masked_positions(state, vocab);
    if table.positions() != masked.as_slice() {
        return Err(Error::contract(format!(
            "table covers positions {:?} but state is masked at {:?}",
            table.positions(),
            masked
        )));
    }
    if table.width() != vocab.size() {
        return Err(Error::contract(format!(
            "table width {} does not match vocabulary size {}",
            table.width(),
            vocab.size()
        )));
    }
    Ok(())
}

/// Draw an index proportionally to nonnegative `weights` (which need not be normalized).
pub(crate) fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return None;
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = Some(j);
            if u < acc {
                return Some(j);
            }
        }
    }
    last
}

/// Advance `state` by one reverse step of length `dtau`.
///
/// Each masked position runs its own clock; positions are visited in
/// ascending order so the random stream is consumed deterministically.
/// Unmasked positions never change.
pub fn reverse_step<R: Rng + ?Sized>(
    rng: &mut R,
    state: &SequenceState,
    rates: &ReverseRates,
    dtau: f64,
    mode: StepMode,
) -> SequenceState {
    debug_assert!(dtau > 0.0);
    let mut next = state.clone();
    for (i, (k, row)) in rates.rows().enumerate() {
        let hazard = rates.hazards[i];
        let p_jump = match mode {
            StepMode::ExponentialClock => -(-hazard * dtau).exp_m1(),
            StepMode::FirstOrder => (hazard * dtau).min(1.0),
        };
        if p_jump > 0.0 && rng.gen::<f64>() < p_jump {
            if let Some(j) = sample_categorical(rng, row) {
                next.set(k, j as Token);
            }
        }
    }
    next
}

/// Fill each listed masked position with a draw from its probability row.
pub fn fill_masked<R: Rng + ?Sized>(
    rng: &mut R,
    state: &SequenceState,
    probs: &PositionTable,
) -> Result<SequenceState> {
    let mut next = state.clone();
    for (k, row) in probs.rows() {
        let j = sample_categorical(rng, row)
            .ok_or_else(|| Error::Degenerate(format!("no mass to fill position {k} of {:?}", state.tokens())))?;
        next.set(k, j as Token);
    }
    Ok(next)
}

/// Close out every remaining mask by sampling the denoiser's posterior at `t`.
pub fn force_fill<R: Rng + ?Sized>(
    rng: &mut R,
    state: &SequenceState,
    denoiser: &dyn Denoiser,
    t: f64,
) -> Result<SequenceState> {
    let vocab = denoiser.vocab();
    if state.is_fully_unmasked(vocab) {
        return Ok(state.clone());
    }
    let posterior = denoiser.posterior(state, t)?;
    fill_masked(rng, state, &posterior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(n: u32) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    #[test]
    fn forward_kernel_examples() {
        let s = MaskingSchedule::linear();
        let voc = v(2);
        let m = voc.mask_id();
        assert_eq!(forward_transition_prob(&s, voc, 1.0, 0.0, 0, m).unwrap(), 1.0);
        assert_eq!(forward_transition_prob(&s, voc, 0.5, 0.0, 0, 0).unwrap(), 0.5);
        assert_eq!(forward_transition_prob(&s, voc, 0.5, 0.0, 0, m).unwrap(), 0.5);
        assert_eq!(forward_transition_prob(&s, voc, 0.5, 0.0, m, m).unwrap(), 1.0);
        assert!(forward_transition_prob(&s, voc, 0.2, 0.5, 0, 0).is_err());
    }

    #[test]
    fn chapman_kolmogorov() {
        let voc = v(3);
        for sched in [MaskingSchedule::linear(), MaskingSchedule::cosine()] {
            for &(t, r, s) in &[(0.0, 0.3, 0.7), (0.1, 0.5, 0.95), (0.4, 0.4, 0.6)] {
                for i in 0..=voc.mask_id() {
                    for j in 0..=voc.mask_id() {
                        let direct = forward_transition_prob(&sched, voc, s, t, i, j).unwrap();
                        let chained: f64 = (0..=voc.mask_id())
                            .map(|k| {
                                forward_transition_prob(&sched, voc, r, t, i, k).unwrap()
                                    * forward_transition_prob(&sched, voc, s, r, k, j).unwrap()
                            })
                            .sum();
                        assert!((direct - chained).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_rate_examples() {
        let s = MaskingSchedule::linear();
        let voc = v(2);
        let m = voc.mask_id();
        assert!((forward_rate(&s, voc, 0.5, 0, m) - 2.0).abs() < 1e-15);
        assert_eq!(forward_rate(&s, voc, 0.5, 0, 1), 0.0);
        assert_eq!(forward_rate(&s, voc, 0.5, m, m), 0.0);
        // rows of the generator sum to zero
        for i in 0..=m {
            let row: f64 = (0..=m).map(|j| forward_rate(&s, voc, 0.3, i, j)).sum();
            assert!(row.abs() < 1e-14);
        }
    }

    #[test]
    fn score_examples() {
        let s = MaskingSchedule::linear();
        assert_eq!(score_from_denoiser(&s, 0.5, &[0.8, 0.2]).unwrap(), vec![0.8, 0.2]);
        let r = score_from_denoiser(&s, 1.0 - 1e-9, &[0.8, 0.2]).unwrap();
        assert!(r.iter().all(|&x| x < 1e-8));
        // alpha/(1-alpha) = 2 at t = 1/3
        let r = score_from_denoiser(&s, 1.0 / 3.0, &[0.25; 4]).unwrap();
        for x in r {
            assert!((x - 0.5).abs() < 1e-12);
        }
        assert!(score_from_denoiser(&s, 1.0, &[1.0]).is_err());
        assert!(score_from_denoiser(&s, 1e-4, &[1.0]).is_err());
    }

    #[test]
    fn reverse_rate_examples() {
        let sched = MaskingSchedule::linear();
        let voc = v(2);
        let full = SequenceState::new(vec![0, 1], voc).unwrap();
        let rates = reverse_rates(&sched, voc, 0.5, &full, &RatioTable(PositionTable::empty(2))).unwrap();
        assert!(rates.is_empty());
        assert_eq!(rates.total_hazard(), 0.0);

        let one = SequenceState::all_masked(1, voc);
        let ratios = RatioTable(PositionTable::new(vec![0], 2, vec![0.8, 0.2]).unwrap());
        let rates = reverse_rates(&sched, voc, 0.5, &one, &ratios).unwrap();
        assert!((rates.row(0)[0] - 1.6).abs() < 1e-14);
        assert!((rates.row(0)[1] - 0.4).abs() < 1e-14);
        assert!((rates.hazards()[0] - 2.0).abs() < 1e-14);

        let two = SequenceState::all_masked(2, voc);
        let ratios = RatioTable(PositionTable::new(vec![0, 1], 2, vec![0.3, 0.6, 0.3, 0.6]).unwrap());
        let rates = reverse_rates(&sched, voc, 0.25, &two, &ratios).unwrap();
        assert_eq!(rates.row(0), rates.row(1));

        let missing = RatioTable(PositionTable::new(vec![0], 2, vec![0.3, 0.6]).unwrap());
        assert!(matches!(
            reverse_rates(&sched, voc, 0.25, &two, &missing),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_hazard_leaves_state() {
        let voc = v(2);
        let s = SequenceState::all_masked(2, voc);
        let rates = ReverseRates::from_table(PositionTable::new(vec![0, 1], 2, vec![0.0; 4]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(reverse_step(&mut rng, &s, &rates, 0.1, StepMode::ExponentialClock), s);
        }
    }

    #[test]
    fn huge_hazard_always_unmasks() {
        let voc = v(2);
        let s = SequenceState::all_masked(1, voc);
        let rates = ReverseRates::from_table(PositionTable::new(vec![0], 2, vec![1e300, 1e300]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert!(reverse_step(&mut rng, &s, &rates, 1.0, StepMode::ExponentialClock).is_fully_unmasked(voc));
        }
    }

    #[test]
    fn step_statistics_match_exponential_clock() {
        let voc = v(2);
        let s = SequenceState::all_masked(1, voc);
        let rates = ReverseRates::from_table(PositionTable::new(vec![0], 2, vec![1.6, 0.4]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let next = reverse_step(&mut rng, &s, &rates, 0.1, StepMode::ExponentialClock);
            counts[next.get(0) as usize] += 1;
        }
        let p_unmask = 1.0 - (-0.2f64).exp();
        assert!((p_unmask - 0.18127).abs() < 1e-5);
        let emp = (counts[0] + counts[1]) as f64 / n as f64;
        let sigma = (p_unmask * (1.0 - p_unmask) / n as f64).sqrt();
        assert!((emp - p_unmask).abs() < 4.0 * sigma);
        let cond0 = counts[0] as f64 / (counts[0] + counts[1]) as f64;
        assert!((cond0 - 0.8).abs() < 0.01);
    }

    #[test]
    fn first_order_mode_caps_at_one() {
        let voc = v(2);
        let s = SequenceState::all_masked(1, voc);
        let rates = ReverseRates::from_table(PositionTable::new(vec![0], 2, vec![50.0, 0.0]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let next = reverse_step(&mut rng, &s, &rates, 0.1, StepMode::FirstOrder);
        assert_eq!(next.tokens(), &[0]);
    }

    #[test]
    fn fill_is_deterministic_for_point_mass() {
        let voc = v(2);
        let s = SequenceState::all_masked(1, voc);
        let probs = PositionTable::new(vec![0], 2, vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            assert_eq!(fill_masked(&mut rng, &s, &probs).unwrap().tokens(), &[0]);
        }
        let zero = PositionTable::new(vec![0], 2, vec![0.0, 0.0]).unwrap();
        assert!(fill_masked(&mut rng, &s, &zero).is_err());
    }
}
