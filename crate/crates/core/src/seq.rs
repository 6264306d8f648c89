//! Token sequences, diffusion states and the `fill` operation.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};

pub type Token = u32;

/// Ordinary tokens are `0..size`; the mask token is `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(config_err!("vocab size must be at least 2, got {size}"));
        }
        Ok(Self { size })
    }

    pub fn size(self) -> usize {
        self.size as usize
    }

    pub fn mask_id(self) -> Token {
        self.size
    }

    pub fn is_ordinary(self, t: Token) -> bool {
        t < self.size
    }
}

/// A fixed-length token sequence in which some positions may be masked.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedSequence {
    vocab: Vocab,
    tokens: Vec<Token>,
}

impl MaskedSequence {
    pub fn new(vocab: Vocab, tokens: Vec<Token>) -> Result<Self> {
        if let Some((i, &t)) = tokens
            .iter()
            .enumerate()
            .find(|&(_, &t)| t > vocab.mask_id())
        {
            return Err(contract!("token {t} at position {i} outside vocab of size {}", vocab.size()));
        }
        Ok(Self { vocab, tokens })
    }

    pub fn fully_masked(vocab: Vocab, len: usize) -> Self {
        Self { vocab, tokens: alloc::vec![vocab.mask_id(); len] }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn get(&self, i: usize) -> Option<Token> {
        self.tokens.get(i).copied()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.vocab.mask_id()
    }

    /// Strictly increasing positions holding the mask token.
    pub fn mask_set(&self) -> Vec<usize> {
        let mask = self.vocab.mask_id();
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == mask).then_some(i))
            .collect()
    }

    pub fn visible_set(&self) -> Vec<usize> {
        let mask = self.vocab.mask_id();
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t != mask).then_some(i))
            .collect()
    }

    pub fn mask_count(&self) -> usize {
        let mask = self.vocab.mask_id();
        self.tokens.iter().filter(|&&t| t == mask).count()
    }

    pub(crate) fn set(&mut self, i: usize, t: Token) {
        self.tokens[i] = t;
    }

    /// Tokens with the mask rendered as `-1`.
    pub fn to_signed(&self) -> Vec<i64> {
        let mask = self.vocab.mask_id();
        self.tokens
            .iter()
            .map(|&t| if t == mask { -1 } else { i64::from(t) })
            .collect()
    }

    /// Inverse of [`MaskedSequence::to_signed`].
    pub fn from_signed(vocab: Vocab, values: &[i64]) -> Result<Self> {
        let tokens = values
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                -1 => Ok(vocab.mask_id()),
                v if v >= 0 && (v as u64) < vocab.size() as u64 => Ok(v as Token),
                v => Err(contract!("value {v} at position {i} is neither -1 nor an ordinary token")),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vocab, tokens)
    }
}

/// The RL state: a prompt and a partially masked completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiffusionState {
    pub prompt: MaskedSequence,
    pub completion: MaskedSequence,
}

impl DiffusionState {
    pub fn new(prompt: MaskedSequence, completion: MaskedSequence) -> Result<Self> {
        if prompt.vocab() != completion.vocab() {
            return Err(contract!("prompt and completion use different vocabularies"));
        }
        Ok(Self { prompt, completion })
    }

    pub fn vocab(&self) -> Vocab {
        self.completion.vocab()
    }

    pub fn mask_set(&self) -> Vec<usize> {
        self.completion.mask_set()
    }

    /// The same state with a replacement prompt (used for prompt corruption).
    pub fn with_prompt(&self, prompt: MaskedSequence) -> Self {
        Self { prompt, completion: self.completion.clone() }
    }
}

/// A joint token assignment to the masked positions of a state.
///
/// Assignments are kept sorted by position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Action {
    assignments: Vec<(usize, Token)>,
}

impl Action {
    pub fn new(mut assignments: Vec<(usize, Token)>) -> Result<Self> {
        assignments.sort_unstable_by_key(|&(i, _)| i);
        if assignments.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(contract!("action assigns the same position twice"));
        }
        Ok(Self { assignments })
    }

    /// Build from positions and tokens that are already aligned and sorted.
    pub(crate) fn from_sorted(assignments: Vec<(usize, Token)>) -> Self {
        debug_assert!(assignments.windows(2).all(|w| w[0].0 < w[1].0));
        Self { assignments }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn assignments(&self) -> &[(usize, Token)] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn get(&self, pos: usize) -> Option<Token> {
        self.assignments
            .binary_search_by_key(&pos, |&(i, _)| i)
            .ok()
            .map(|k| self.assignments[k].1)
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.assignments.iter().map(|&(i, _)| i)
    }

    /// Check that the key set is exactly the mask set of `seq` and that every
    /// value is an ordinary token.
    pub fn validate_for(&self, seq: &MaskedSequence) -> Result<()> {
        let vocab = seq.vocab();
        let mut expected = seq.mask_set().into_iter();
        for &(i, t) in &self.assignments {
            match expected.next() {
                Some(m) if m == i => {}
                _ => return Err(contract!("action keys do not match the mask set (unexpected position {i})")),
            }
            if !vocab.is_ordinary(t) {
                return Err(contract!("action assigns non-ordinary token {t} to position {i}"));
            }
        }
        if let Some(m) = expected.next() {
            return Err(contract!("action leaves masked position {m} unassigned"));
        }
        Ok(())
    }
}

/// Fill every masked position of the state's completion with the action.
pub fn fill(state: &DiffusionState, action: &Action) -> Result<MaskedSequence> {
    action.validate_for(&state.completion)?;
    let mut out = state.completion.clone();
    for &(i, t) in action.assignments() {
        out.set(i, t);
    }
    Ok(out)
}
