//! Terminal rewards and instance generators for the toy tasks.

pub mod countdown;
pub mod stringmatch;
pub mod sudoku;

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use countdown::{encode_postfix, generate_countdown, CountdownInstance};
pub use stringmatch::{generate_stringmatch, stringmatch_reward, MatchRule, StringMatchInstance};
pub use sudoku::{generate_sudoku, SudokuInstance};

use crate::error::{config_err, Result};
use crate::seq::{MaskedSequence, Token, Vocab};

/// Task family and its size parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskSpec {
    Sudoku { blanks: usize },
    Countdown { numbers: usize },
    StringMatch {
        vocab: u32,
        len: usize,
        #[serde(default)]
        rule: MatchRule,
    },
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Sudoku { blanks: 6 }
    }
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Sudoku { .. } => "sudoku",
            TaskSpec::Countdown { .. } => "countdown",
            TaskSpec::StringMatch { .. } => "stringmatch",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Sudoku { blanks } if !(1..=12).contains(&blanks) => Err(config_err!("sudoku blanks must be in 1..=12")),
            TaskSpec::Countdown { numbers } if !(2..=countdown::MAX_SLOTS).contains(&numbers) => {
                Err(config_err!("countdown numbers must be in 2..=4"))
            }
            TaskSpec::StringMatch { vocab, len, .. } if vocab < 2 || len == 0 => {
                Err(config_err!("string-match needs vocab >= 2 and len >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn vocab(&self) -> Vocab {
        let size = match *self {
            TaskSpec::Sudoku { .. } => sudoku::VOCAB,
            TaskSpec::Countdown { .. } => countdown::VOCAB,
            TaskSpec::StringMatch { vocab, .. } => vocab,
        };
        Vocab::new(size).expect("validated vocab")
    }

    pub fn prompt_len(&self) -> usize {
        match *self {
            TaskSpec::Sudoku { .. } => sudoku::CELLS,
            TaskSpec::Countdown { numbers } => CountdownInstance::prompt_len(numbers),
            TaskSpec::StringMatch { len, .. } => len,
        }
    }

    pub fn completion_len(&self) -> usize {
        match *self {
            TaskSpec::Sudoku { blanks } => blanks,
            TaskSpec::Countdown { numbers } => CountdownInstance::completion_len(numbers),
            TaskSpec::StringMatch { len, .. } => len,
        }
    }

    pub fn generate(&self, rng: &mut impl Rng) -> Result<TaskInstance> {
        self.validate()?;
        Ok(match *self {
            TaskSpec::Sudoku { blanks } => TaskInstance::Sudoku(generate_sudoku(blanks, rng)?),
            TaskSpec::Countdown { numbers } => TaskInstance::Countdown(generate_countdown(numbers, rng)?.0),
            TaskSpec::StringMatch { vocab, len, rule } => TaskInstance::StringMatch(generate_stringmatch(vocab, len, rule, rng)?),
        })
    }
}

/// One prompt with its reward function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskInstance {
    Sudoku(SudokuInstance),
    Countdown(CountdownInstance),
    StringMatch(StringMatchInstance),
}

impl TaskInstance {
    pub fn vocab(&self) -> Vocab {
        match self {
            TaskInstance::Sudoku(_) => SudokuInstance::vocab(),
            TaskInstance::Countdown(_) => CountdownInstance::vocab(),
            TaskInstance::StringMatch(s) => s.vocab(),
        }
    }

    pub fn prompt(&self) -> MaskedSequence {
        match self {
            TaskInstance::Sudoku(s) => s.prompt(),
            TaskInstance::Countdown(c) => c.prompt(),
            TaskInstance::StringMatch(s) => s.prompt(),
        }
    }

    pub fn completion_len(&self) -> usize {
        match self {
            TaskInstance::Sudoku(s) => s.blanks().len(),
            TaskInstance::Countdown(c) => CountdownInstance::completion_len(c.numbers.len()),
            TaskInstance::StringMatch(s) => s.target.len(),
        }
    }

    /// Deterministic terminal reward of a completion.
    pub fn reward(&self, completion: &MaskedSequence) -> f64 {
        match self {
            TaskInstance::Sudoku(s) => s.reward(completion),
            TaskInstance::Countdown(c) => c.reward(completion),
            TaskInstance::StringMatch(s) => s.reward(completion),
        }
    }

    /// A reward-1 completion when one is stored with the instance.
    pub fn reference_completion(&self) -> Option<Vec<Token>> {
        match self {
            TaskInstance::Sudoku(s) => Some(s.target()),
            TaskInstance::Countdown(_) => None,
            TaskInstance::StringMatch(s) => Some(s.target.clone()),
        }
    }

    /// Whether the instance fits a spec's shapes.
    pub fn matches(&self, spec: &TaskSpec) -> bool {
        self.vocab() == spec.vocab() && self.prompt().len() == spec.prompt_len() && self.completion_len() == spec.completion_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamSeed;

    #[test]
    fn specs_generate_matching_instances() {
        let specs = [
            TaskSpec::Sudoku { blanks: 6 },
            TaskSpec::Countdown { numbers: 3 },
            TaskSpec::StringMatch { vocab: 4, len: 5, rule: MatchRule::Copy },
        ];
        for spec in specs {
            for seed in 0..5 {
                let inst = spec.generate(&mut StreamSeed::root(seed).rng()).unwrap();
                assert!(inst.matches(&spec), "{spec:?}");
                if let Some(best) = inst.reference_completion() {
                    let seq = MaskedSequence::new(inst.vocab(), best).unwrap();
                    assert_eq!(inst.reward(&seq), 1.0);
                }
                let empty = MaskedSequence::fully_masked(inst.vocab(), inst.completion_len());
                assert_eq!(inst.reward(&empty), 0.0);
            }
        }
        assert!(TaskSpec::Sudoku { blanks: 13 }.validate().is_err());
        assert!(TaskSpec::Countdown { numbers: 1 }.validate().is_err());
    }
}
