//! Synthetic string matching: reward is the fraction of positions equal to a
//! target string.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::seq::{MaskedSequence, Token, Vocab};

/// Fraction of positions equal to `target`; masked positions never match and
/// a length mismatch scores zero.
pub fn stringmatch_reward(target: &[Token], completion: &MaskedSequence) -> f64 {
    if target.is_empty() || completion.len() != target.len() {
        return 0.0;
    }
    let hits = target
        .iter()
        .enumerate()
        .filter(|&(i, &t)| !completion.is_masked(i) && completion.tokens()[i] == t)
        .count();
    hits as f64 / target.len() as f64
}

/// How the target relates to the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Target equals the prompt.
    #[default]
    Copy,
    /// Target is the prompt reversed.
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StringMatchInstance {
    pub vocab_size: u32,
    pub prompt: Vec<Token>,
    pub target: Vec<Token>,
}

impl StringMatchInstance {
    pub fn new(vocab_size: u32, prompt: Vec<Token>, target: Vec<Token>) -> Result<Self> {
        let v = Vocab::new(vocab_size)?;
        if prompt.iter().chain(&target).any(|&t| !v.is_ordinary(t)) || target.is_empty() {
            return Err(contract!("string-match tokens must be ordinary and the target nonempty"));
        }
        Ok(Self { vocab_size, prompt, target })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size).expect("validated")
    }

    pub fn prompt(&self) -> MaskedSequence {
        MaskedSequence::new(self.vocab(), self.prompt.clone()).expect("validated")
    }

    pub fn reward(&self, completion: &MaskedSequence) -> f64 {
        stringmatch_reward(&self.target, completion)
    }
}

pub fn generate_stringmatch(vocab_size: u32, len: usize, rule: MatchRule, rng: &mut impl Rng) -> Result<StringMatchInstance> {
    let prompt: Vec<Token> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
    let target = match rule {
        MatchRule::Copy => prompt.clone(),
        MatchRule::Reverse => prompt.iter().rev().copied().collect(),
    };
    StringMatchInstance::new(vocab_size, prompt, target)
}
