//! 4x4 Sudoku with one token per cell.
//!
//! Prompt: 16 tokens in row-major order; digit `d` in `1..=4` is token
//! `d - 1` and an empty cell is [`BLANK`]. Completion: one token per empty
//! cell, in row-major order of the empty cells.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::rollout::Trajectory;
use crate::seq::{MaskedSequence, Token, Vocab};

pub const CELLS: usize = 16;
pub const BLANK: Token = 4;
pub const VOCAB: u32 = 5;

/// A puzzle and its unique solution. Cells hold `0` (empty) or `1..=4`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SudokuInstance {
    pub givens: [u8; CELLS],
    pub solution: [u8; CELLS],
}

fn units() -> impl Iterator<Item = [usize; 4]> {
    let rows = (0..4).map(|r| [4 * r, 4 * r + 1, 4 * r + 2, 4 * r + 3]);
    let cols = (0..4).map(|c| [c, c + 4, c + 8, c + 12]);
    let boxes = (0..4).map(|b| {
        let base = (b / 2) * 8 + (b % 2) * 2;
        [base, base + 1, base + 4, base + 5]
    });
    rows.chain(cols).chain(boxes)
}

/// True when no row, column or box repeats a nonzero value.
pub fn is_consistent(grid: &[u8; CELLS]) -> bool {
    units().all(|u| {
        let mut seen = 0u8;
        u.iter().all(|&i| {
            let v = grid[i];
            if v == 0 {
                return true;
            }
            let bit = 1 << v;
            let fresh = seen & bit == 0;
            seen |= bit;
            fresh
        })
    })
}

pub fn is_solved(grid: &[u8; CELLS]) -> bool {
    grid.iter().all(|&v| (1..=4).contains(&v)) && is_consistent(grid)
}

/// Number of completions of `grid`, counting up to `limit`.
pub fn count_solutions(grid: &[u8; CELLS], limit: usize) -> usize {
    fn go(g: &mut [u8; CELLS], limit: usize, found: &mut usize) {
        let Some(i) = g.iter().position(|&v| v == 0) else {
            *found += 1;
            return;
        };
        for v in 1..=4 {
            g[i] = v;
            if is_consistent(g) {
                go(g, limit, found);
                if *found >= limit {
                    break;
                }
            }
        }
        g[i] = 0;
    }
    if !is_consistent(grid) {
        return 0;
    }
    let mut g = *grid;
    let mut found = 0;
    go(&mut g, limit, &mut found);
    found
}

impl SudokuInstance {
    pub fn new(givens: [u8; CELLS], solution: [u8; CELLS]) -> Result<Self> {
        if !is_solved(&solution) {
            return Err(contract!("sudoku solution is not valid"));
        }
        if givens.iter().zip(&solution).any(|(&g, &s)| g != 0 && g != s) {
            return Err(contract!("sudoku givens disagree with the solution"));
        }
        Ok(Self { givens, solution })
    }

    pub fn vocab() -> Vocab {
        Vocab::new(VOCAB).expect("static vocab")
    }

    /// Row-major indices of the empty cells.
    pub fn blanks(&self) -> Vec<usize> {
        (0..CELLS).filter(|&i| self.givens[i] == 0).collect()
    }

    pub fn prompt(&self) -> MaskedSequence {
        let tokens = self.givens.iter().map(|&g| if g == 0 { BLANK } else { Token::from(g) - 1 }).collect();
        MaskedSequence::new(Self::vocab(), tokens).expect("valid tokens")
    }

    /// Solution restricted to the empty cells, as completion tokens.
    pub fn target(&self) -> Vec<Token> {
        self.blanks().iter().map(|&i| Token::from(self.solution[i]) - 1).collect()
    }

    /// Grid with committed completion cells filled in; masked positions stay
    /// empty and a committed [`BLANK`] is `None`.
    fn overlay(&self, completion: &MaskedSequence) -> Option<[u8; CELLS]> {
        let mut grid = self.givens;
        for (k, &cell) in self.blanks().iter().enumerate() {
            let t = completion.tokens()[k];
            if completion.is_masked(k) {
                continue;
            }
            if t >= BLANK {
                return None;
            }
            grid[cell] = t as u8 + 1;
        }
        Some(grid)
    }

    /// Fraction of empty cells filled with the solution digit; zero when the
    /// completion has the wrong length.
    pub fn reward(&self, completion: &MaskedSequence) -> f64 {
        let blanks = self.blanks();
        if completion.len() != blanks.len() || blanks.is_empty() {
            return 0.0;
        }
        let correct = blanks
            .iter()
            .enumerate()
            .filter(|&(k, &cell)| !completion.is_masked(k) && completion.tokens()[k] == Token::from(self.solution[cell]) - 1)
            .count();
        correct as f64 / blanks.len() as f64
    }

    /// Whether the committed cells of a partial completion break a row,
    /// column or box constraint (a committed blank token also counts).
    pub fn violates(&self, completion: &MaskedSequence) -> bool {
        self.overlay(completion).is_none_or(|g| !is_consistent(&g))
    }

    /// Earliest 1-based step whose post-commit state violates a constraint.
    pub fn first_violation_time(&self, trajectory: &Trajectory) -> Option<usize> {
        (1..=trajectory.steps()).find(|&t| self.violates(&trajectory.states()[t].completion))
    }
}

const BASE: [u8; CELLS] = [1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1];

/// Random grid with exactly `blanks` empty cells and a unique solution.
pub fn generate_sudoku(blanks: usize, rng: &mut impl Rng) -> Result<SudokuInstance> {
    if blanks == 0 || blanks > 12 {
        return Err(config_err!("sudoku blanks must be in 1..=12, got {blanks}"));
    }
    loop {
        let solution = random_solution(rng);
        let mut givens = solution;
        let mut order: Vec<usize> = (0..CELLS).collect();
        order.shuffle(rng);
        let mut removed = 0;
        for &i in &order {
            if removed == blanks {
                break;
            }
            let keep = givens[i];
            givens[i] = 0;
            if count_solutions(&givens, 2) == 1 {
                removed += 1;
            } else {
                givens[i] = keep;
            }
        }
        if removed == blanks {
            return SudokuInstance::new(givens, solution);
        }
    }
}

/// Valid-preserving shuffle of a base grid: relabel digits, permute rows
/// within bands and bands, the same for columns, and optionally transpose.
fn random_solution(rng: &mut impl Rng) -> [u8; CELLS] {
    let mut digits = [1u8, 2, 3, 4];
    digits.shuffle(rng);
    let lines = |rng: &mut dyn rand::RngCore| {
        let mut bands = [0usize, 1];
        bands.shuffle(rng);
        let mut out = [0usize; 4];
        for (b, &band) in bands.iter().enumerate() {
            let flip = rng.random::<bool>() as usize;
            out[2 * b] = 2 * band + flip;
            out[2 * b + 1] = 2 * band + 1 - flip;
        }
        out
    };
    let rows = lines(rng);
    let cols = lines(rng);
    let transpose = rng.random::<bool>();
    let mut g = [0u8; CELLS];
    for r in 0..4 {
        for c in 0..4 {
            let (sr, sc) = if transpose { (cols[c], rows[r]) } else { (rows[r], cols[c]) };
            g[4 * r + c] = digits[usize::from(BASE[4 * sr + sc]) - 1];
        }
    }
    g
}
