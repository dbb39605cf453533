//! Token sequences over a vocabulary extended with a single mask token,
//! and exhaustive enumeration of small state spaces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Default cap on the number of states any exhaustive enumeration may touch.
pub const DEFAULT_ENUMERATION_LIMIT: u64 = 1 << 20;

/// `size` ordinary tokens `0..size`; the mask token is always `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size == 0 {
            return Err(Error::domain("vocabulary must contain at least one token"));
        }
        Ok(Self { size })
    }

    /// Number of non-mask tokens.
    #[inline]
    pub fn size(&self) -> usize {
        self.size as usize
    }

    #[inline]
    pub fn mask_id(&self) -> Token {
        self.size
    }

    /// Number of token values including the mask.
    #[inline]
    pub fn extended_size(&self) -> usize {
        self.size as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceState {
    tokens: Vec<Token>,
}

impl SequenceState {
    pub fn new(tokens: Vec<Token>, vocab: Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::domain("sequence length must be at least 1"));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t > vocab.mask_id()) {
            return Err(Error::domain(format!(
                "token {bad} exceeds mask id {}",
                vocab.mask_id()
            )));
        }
        Ok(Self { tokens })
    }

    pub fn all_masked(d: usize, vocab: Vocabulary) -> Self {
        assert!(d >= 1, "sequence length must be at least 1");
        Self {
            tokens: vec![vocab.mask_id(); d],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    #[inline]
    pub fn get(&self, k: usize) -> Token {
        self.tokens[k]
    }

    #[inline]
    pub fn set(&mut self, k: usize, token: Token) {
        self.tokens[k] = token;
    }

    /// Copy of `self` with position `k` set to `token`.
    pub fn with(&self, k: usize, token: Token) -> Self {
        let mut out = self.clone();
        out.tokens[k] = token;
        out
    }

    pub fn is_fully_unmasked(&self, vocab: Vocabulary) -> bool {
        self.tokens.iter().all(|&t| t != vocab.mask_id())
    }

    pub fn num_masked(&self, vocab: Vocabulary) -> usize {
        self.tokens.iter().filter(|&&t| t == vocab.mask_id()).count()
    }
}

/// Ascending indices of the masked coordinates of `state`.
pub fn masked_positions(state: &SequenceState, vocab: Vocabulary) -> Vec<usize> {
    state
        .tokens
        .iter()
        .enumerate()
        .filter_map(|(k, &t)| (t == vocab.mask_id()).then_some(k))
        .collect()
}

/// `base^d` as an exact integer, used for capacity checks.
pub(crate) fn state_count(base: usize, d: usize) -> u128 {
    (base as u128).saturating_pow(d as u32)
}

pub(crate) fn check_capacity(what: &str, base: usize, d: usize, limit: u64) -> Result<usize> {
    let required = state_count(base, d);
    if required > limit as u128 {
        return Err(Error::Capacity {
            what: what.to_string(),
            required,
            limit,
        });
    }
    Ok(required as usize)
}

/// Lexicographic enumeration of every length-`d` sequence over `V + 1` token
/// values (partially and fully masked states included). Position 0 is the
/// most significant digit, so index 0 is `[0, 0, ..., 0]` and the last index
/// is the all-mask state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    vocab: Vocabulary,
    d: usize,
    len: usize,
}

impl StateSpace {
    pub fn new(vocab: Vocabulary, d: usize) -> Result<Self> {
        Self::with_limit(vocab, d, DEFAULT_ENUMERATION_LIMIT)
    }

    pub fn with_limit(vocab: Vocabulary, d: usize, limit: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::domain("sequence length must be at least 1"));
        }
        let len = check_capacity("joint state space", vocab.extended_size(), d, limit)?;
        Ok(Self { vocab, d, len })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn state(&self, mut index: usize) -> SequenceState {
        assert!(index < self.len, "state index {index} out of range");
        let base = self.vocab.extended_size();
        let mut tokens = vec![0; self.d];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % base) as Token;
            index /= base;
        }
        SequenceState { tokens }
    }

    pub fn index(&self, state: &SequenceState) -> usize {
        let base = self.vocab.extended_size();
        state.tokens.iter().fold(0usize, |acc, &t| acc * base + t as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = SequenceState> + '_ {
        (0..self.len).map(|i| self.state(i))
    }

    pub fn all_masked_index(&self) -> usize {
        self.len - 1
    }
}

/// Enumerate all `(V+1)^d` states in lexicographic order.
pub fn enumerate_states(vocab: Vocabulary, d: usize) -> Result<Vec<SequenceState>> {
    let space = StateSpace::new(vocab, d)?;
    Ok(space.iter().collect())
}

/// Index of a fully unmasked sequence among the `V^d` data states
/// (lexicographic, position 0 most significant).
pub(crate) fn data_index(tokens: &[Token], v: usize) -> usize {
    tokens.iter().fold(0usize, |acc, &t| acc * v + t as usize)
}

pub(crate) fn data_tokens(mut index: usize, v: usize, d: usize) -> Vec<Token> {
    let mut tokens = vec![0; d];
    for slot in tokens.iter_mut().rev() {
        *slot = (index % v) as Token;
        index /= v;
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(v: u32) -> Vocabulary {
        Vocabulary::new(v).unwrap()
    }

    #[test]
    fn single_token_single_position() {
        let states = enumerate_states(vocab(1), 1).unwrap();
        assert_eq!(states.len(), 2);
        assert_eq!(states[0].tokens(), &[0]);
        assert_eq!(states[1].tokens(), &[1]);
    }

    #[test]
    fn two_by_two_has_nine_states() {
        let states = enumerate_states(vocab(2), 2).unwrap();
        assert_eq!(states.len(), 9);
        assert_eq!(states[0].tokens(), &[0, 0]);
        assert_eq!(states[8].tokens(), &[2, 2]);
    }

    #[test]
    fn enumeration_is_a_bijection() {
        for v in 1..=3 {
            for d in 1..=4 {
                let space = StateSpace::new(vocab(v), d).unwrap();
                for k in 0..space.len() {
                    assert_eq!(space.index(&space.state(k)), k);
                }
            }
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let err = StateSpace::with_limit(vocab(2), 20, 1 << 20).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn masked_positions_cases() {
        let v = vocab(2);
        let s = SequenceState::new(vec![0, 2, 1], v).unwrap();
        assert_eq!(masked_positions(&s, v), vec![1]);
        let s = SequenceState::new(vec![0, 1, 1], v).unwrap();
        assert!(masked_positions(&s, v).is_empty());
        let s = SequenceState::all_masked(3, v);
        assert_eq!(masked_positions(&s, v), vec![0, 1, 2]);
    }

    #[test]
    fn rejects_tokens_above_mask() {
        assert!(SequenceState::new(vec![0, 3], vocab(2)).is_err());
        assert!(SequenceState::new(vec![], vocab(2)).is_err());
    }
}
