//! Countdown: combine the given numbers with `+ - * /` to hit a target.
//!
//! Token layout (vocab 19): digits `0..=9`, number slots `10..=13`,
//! operators `14..=17`, padding `18`. The prompt spells each number with
//! two digits and the target with three. The completion is a postfix
//! expression over slot tokens and operators, right-padded.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub, Zero};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::seq::{MaskedSequence, Token, Vocab};

pub const VOCAB: u32 = 19;
pub const SLOT0: Token = 10;
pub const MAX_SLOTS: usize = 4;
pub const PAD: Token = 18;
pub const MAX_NUMBER: u32 = 99;
pub const MAX_TARGET: u32 = 999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    pub fn token(self) -> Token {
        14 + self as Token
    }

    pub fn from_token(t: Token) -> Option<Op> {
        (14..18).contains(&t).then(|| Op::ALL[(t - 14) as usize])
    }

    pub fn symbol(self) -> char {
        ['+', '-', '*', '/'][self as usize]
    }

    fn apply(self, a: Ratio<i64>, b: Ratio<i64>) -> Option<Ratio<i64>> {
        match self {
            Op::Add => a.checked_add(&b),
            Op::Sub => a.checked_sub(&b),
            Op::Mul => a.checked_mul(&b),
            Op::Div if b.is_zero() => None,
            Op::Div => a.checked_div(&b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountdownInstance {
    pub numbers: Vec<u32>,
    pub target: u32,
}

/// Outcome of parsing and evaluating a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Invalid,
    Valid(Ratio<i64>),
}

impl CountdownInstance {
    pub fn new(numbers: Vec<u32>, target: u32) -> Result<Self> {
        if !(1..=MAX_SLOTS).contains(&numbers.len()) {
            return Err(contract!("countdown needs 1..={MAX_SLOTS} numbers"));
        }
        if numbers.iter().any(|&n| !(1..=MAX_NUMBER).contains(&n)) || !(1..=MAX_TARGET).contains(&target) {
            return Err(contract!("countdown numbers must be in 1..={MAX_NUMBER}, target in 1..={MAX_TARGET}"));
        }
        Ok(Self { numbers, target })
    }

    pub fn vocab() -> Vocab {
        Vocab::new(VOCAB).expect("static vocab")
    }

    pub fn prompt_len(numbers: usize) -> usize {
        2 * numbers + 3
    }

    /// Room for a postfix expression using every number once.
    pub fn completion_len(numbers: usize) -> usize {
        2 * numbers - 1
    }

    pub fn prompt(&self) -> MaskedSequence {
        let mut tokens = Vec::with_capacity(Self::prompt_len(self.numbers.len()));
        for &n in &self.numbers {
            tokens.extend([n / 10, n % 10]);
        }
        tokens.extend([self.target / 100, self.target / 10 % 10, self.target % 10]);
        MaskedSequence::new(Self::vocab(), tokens).expect("digit tokens")
    }

    /// Parse a postfix completion: slots and operators, then only padding.
    /// Each slot may appear at most once and the stack must end with one
    /// value.
    pub fn evaluate(&self, completion: &MaskedSequence) -> Verdict {
        let mut stack: Vec<Ratio<i64>> = Vec::new();
        let mut used = [false; MAX_SLOTS];
        let mut padded = false;
        for (i, &t) in completion.tokens().iter().enumerate() {
            if completion.is_masked(i) {
                return Verdict::Invalid;
            }
            if t == PAD {
                padded = true;
                continue;
            }
            if padded {
                return Verdict::Invalid;
            }
            if let Some(op) = Op::from_token(t) {
                let (Some(b), Some(a)) = (stack.pop(), stack.pop()) else {
                    return Verdict::Invalid;
                };
                match op.apply(a, b) {
                    Some(v) => stack.push(v),
                    None => return Verdict::Invalid,
                }
            } else if (SLOT0..SLOT0 + MAX_SLOTS as Token).contains(&t) {
                let slot = (t - SLOT0) as usize;
                if slot >= self.numbers.len() || used[slot] {
                    return Verdict::Invalid;
                }
                used[slot] = true;
                stack.push(Ratio::from_integer(i64::from(self.numbers[slot])));
            } else {
                return Verdict::Invalid;
            }
        }
        match stack.as_slice() {
            [v] => Verdict::Valid(*v),
            _ => Verdict::Invalid,
        }
    }

    /// 1.0 on hitting the target exactly, 0.1 for a well-formed expression
    /// that misses, else 0.
    pub fn reward(&self, completion: &MaskedSequence) -> f64 {
        match self.evaluate(completion) {
            Verdict::Valid(v) if v == Ratio::from_integer(i64::from(self.target)) => 1.0,
            Verdict::Valid(_) => 0.1,
            Verdict::Invalid => 0.0,
        }
    }
}

/// Encode whitespace-separated postfix text, with slots written `a`..`d`,
/// into a padded completion of length `len`.
pub fn encode_postfix(text: &str, len: usize) -> Result<MaskedSequence> {
    let mut tokens = Vec::with_capacity(len);
    for word in text.split_whitespace() {
        let t = match word {
            "a" | "b" | "c" | "d" => SLOT0 + Token::from(word.as_bytes()[0] - b'a'),
            "+" => Op::Add.token(),
            "-" => Op::Sub.token(),
            "*" => Op::Mul.token(),
            "/" => Op::Div.token(),
            _ => return Err(contract!("unknown postfix word {word:?}")),
        };
        tokens.push(t);
    }
    if tokens.len() > len {
        return Err(contract!("postfix expression longer than {len}"));
    }
    tokens.resize(len, PAD);
    MaskedSequence::new(CountdownInstance::vocab(), tokens)
}

/// Infix rendering of a postfix completion, or `None` when malformed.
pub fn render(instance: &CountdownInstance, completion: &MaskedSequence) -> Option<String> {
    if instance.evaluate(completion) == Verdict::Invalid {
        return None;
    }
    let mut stack: Vec<String> = Vec::new();
    for &t in completion.tokens() {
        if t == PAD {
            break;
        }
        if let Some(op) = Op::from_token(t) {
            let b = stack.pop()?;
            let a = stack.pop()?;
            stack.push(alloc::format!("({a} {} {b})", op.symbol()));
        } else {
            stack.push(alloc::format!("{}", instance.numbers[(t - SLOT0) as usize]));
        }
    }
    stack.pop()
}

enum Node {
    Leaf(usize),
    Bin(Op, Box<Node>, Box<Node>),
}

impl Node {
    fn postfix(&self, out: &mut Vec<Token>) {
        match self {
            Node::Leaf(s) => out.push(SLOT0 + *s as Token),
            Node::Bin(op, a, b) => {
                a.postfix(out);
                b.postfix(out);
                out.push(op.token());
            }
        }
    }
}

/// Random solvable instance: draw numbers, combine a random subset of at
/// least two into a random expression with positive integer intermediates,
/// and use its value as the target.
pub fn generate_countdown(numbers: usize, rng: &mut impl Rng) -> Result<(CountdownInstance, MaskedSequence)> {
    if !(2..=MAX_SLOTS).contains(&numbers) {
        return Err(config_err!("countdown numbers must be in 2..={MAX_SLOTS}, got {numbers}"));
    }
    loop {
        let nums: Vec<u32> = (0..numbers).map(|_| rng.random_range(1..=20)).collect();
        let mut slots: Vec<usize> = (0..numbers).collect();
        slots.shuffle(rng);
        slots.truncate(rng.random_range(2..=numbers));
        let mut pool: Vec<(Node, i64)> = slots.iter().map(|&s| (Node::Leaf(s), i64::from(nums[s]))).collect();
        let mut ok = true;
        while pool.len() > 1 {
            let i = rng.random_range(0..pool.len());
            let (a, va) = pool.swap_remove(i);
            let j = rng.random_range(0..pool.len());
            let (b, vb) = pool.swap_remove(j);
            let op = Op::ALL[rng.random_range(0..4)];
            let v = match op {
                Op::Add => va + vb,
                Op::Sub => va - vb,
                Op::Mul => va * vb,
                Op::Div if vb != 0 && va % vb == 0 => va / vb,
                Op::Div => 0,
            };
            if v <= 0 {
                ok = false;
                break;
            }
            pool.push((Node::Bin(op, Box::new(a), Box::new(b)), v));
        }
        if !ok {
            continue;
        }
        let (node, value) = pool.pop().expect("nonempty pool");
        if value > i64::from(MAX_TARGET) {
            continue;
        }
        let inst = CountdownInstance::new(nums, value as u32)?;
        let mut tokens = Vec::new();
        node.postfix(&mut tokens);
        tokens.resize(CountdownInstance::completion_len(numbers), PAD);
        let witness = MaskedSequence::new(CountdownInstance::vocab(), tokens)?;
        debug_assert_eq!(inst.reward(&witness), 1.0);
        return Ok((inst, witness));
    }
}
