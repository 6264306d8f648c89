//! A small differentiable conditional policy over masked positions.
//!
//! Each masked position `i` of a state gets a logits row computed from a
//! sparse feature vector `phi(s, i)`:
//!
//! * a bias,
//! * a one-hot of the completion position,
//! * one-hots of the completion tokens in a radius-`w` window around `i`
//!   (mask and out-of-range neighbours get their own slots),
//! * optionally a normalized histogram of prompt tokens,
//! * optionally a position-by-prompt cross block (one-hot of every prompt
//!   token, separately for each completion position).
//!
//! The linear architecture uses `row = W phi`; the MLP adds one tanh hidden
//! layer. Both expose exact gradients by hand-derived backpropagation.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{AddAssign, Index};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Error, Result};
use crate::seq::{Action, DiffusionState, Token, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub window: usize,
    pub prompt_histogram: bool,
    pub prompt_cross: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { window: 2, prompt_histogram: true, prompt_cross: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Linear,
    Mlp { hidden: usize },
}

/// Shape of the policy: sequence lengths, vocabulary, features and kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab: Vocab,
    pub prompt_len: usize,
    pub completion_len: usize,
    pub features: FeatureSpec,
    pub kind: PolicyKind,
}

impl Architecture {
    pub fn linear(vocab: Vocab, prompt_len: usize, completion_len: usize, features: FeatureSpec) -> Self {
        Self { vocab, prompt_len, completion_len, features, kind: PolicyKind::Linear }
    }

    fn v(&self) -> usize {
        self.vocab.size()
    }

    fn window_base(&self) -> usize {
        1 + self.completion_len
    }

    fn histogram_base(&self) -> usize {
        self.window_base() + 2 * self.features.window * (self.v() + 2)
    }

    fn cross_base(&self) -> usize {
        self.histogram_base() + if self.features.prompt_histogram { self.v() + 1 } else { 0 }
    }

    pub fn feature_dim(&self) -> usize {
        self.cross_base()
            + if self.features.prompt_cross {
                self.completion_len * self.prompt_len * (self.v() + 1)
            } else {
                0
            }
    }

    pub fn param_dim(&self) -> usize {
        let f = self.feature_dim();
        let v = self.v();
        match self.kind {
            PolicyKind::Linear => v * f,
            PolicyKind::Mlp { hidden } => hidden * f + hidden + v * hidden + v,
        }
    }

    fn check_state(&self, state: &DiffusionState) -> Result<()> {
        if state.vocab() != self.vocab
            || state.prompt.len() != self.prompt_len
            || state.completion.len() != self.completion_len
        {
            return Err(config_err!(
                "state shape (vocab {}, prompt {}, completion {}) does not match architecture (vocab {}, prompt {}, completion {})",
                state.vocab().size(),
                state.prompt.len(),
                state.completion.len(),
                self.v(),
                self.prompt_len,
                self.completion_len
            ));
        }
        Ok(())
    }

    /// Sparse features `phi(s, pos)` as `(index, value)` pairs.
    pub fn features(&self, state: &DiffusionState, pos: usize) -> Vec<(usize, f64)> {
        let v = self.v();
        let w = self.features.window as isize;
        let mut out = Vec::with_capacity(2 + 2 * self.features.window + v + 1);
        out.push((0, 1.0));
        out.push((1 + pos, 1.0));
        let completion = state.completion.tokens();
        let mut k = 0;
        for off in (-w..=w).filter(|&o| o != 0) {
            let j = pos as isize + off;
            let class = if j < 0 || j as usize >= completion.len() {
                v + 1
            } else {
                completion[j as usize] as usize
            };
            out.push((self.window_base() + k * (v + 2) + class, 1.0));
            k += 1;
        }
        let prompt = state.prompt.tokens();
        if self.features.prompt_histogram && !prompt.is_empty() {
            let mut counts = vec![0usize; v + 1];
            for &t in prompt {
                counts[t as usize] += 1;
            }
            let base = self.histogram_base();
            let n = prompt.len() as f64;
            out.extend(
                counts
                    .iter()
                    .enumerate()
                    .filter(|&(_, &c)| c > 0)
                    .map(|(c, &n_c)| (base + c, n_c as f64 / n)),
            );
        }
        if self.features.prompt_cross {
            let base = self.cross_base() + pos * self.prompt_len * (v + 1);
            out.extend(
                prompt
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| (base + j * (v + 1) + t as usize, 1.0)),
            );
        }
        out
    }
}

/// A flat gradient (or parameter-sized) vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Gradient) {
        debug_assert_eq!(self.dim(), x.dim());
        for (s, &xi) in self.0.iter_mut().zip(&x.0) {
            *s += a * xi;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.0.iter_mut().for_each(|x| *x *= a);
    }

    pub fn scaled(mut self, a: f64) -> Self {
        self.scale(a);
        self
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl AddAssign<&Gradient> for Gradient {
    fn add_assign(&mut self, rhs: &Gradient) {
        self.axpy(1.0, rhs);
    }
}

impl Index<usize> for Gradient {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Logits rows for a set of positions (normally the mask set of a state).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    vocab_size: usize,
    positions: Vec<usize>,
    logits: Vec<f64>,
}

impl LogitsGrid {
    pub fn new(vocab_size: usize, positions: Vec<usize>, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != positions.len() * vocab_size {
            return Err(contract!("logits grid has {} entries, expected {}", logits.len(), positions.len() * vocab_size));
        }
        Ok(Self { vocab_size, positions, logits })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.logits[r * self.vocab_size..(r + 1) * self.vocab_size]
    }

    pub fn row_for(&self, pos: usize) -> Option<&[f64]> {
        self.positions.binary_search(&pos).ok().map(|r| self.row(r))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&x| libm::exp(x - m)).sum();
    let lse = m + libm::log(s);
    row.iter().map(|&x| x - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(libm::exp).collect()
}

/// Draw one token from `softmax(row)` by inverse CDF.
pub fn sample_token(row: &[f64], rng: &mut impl rand::Rng) -> Token {
    let probs = softmax(row);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (t, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = t;
        }
        acc += p;
        if u < acc {
            return t as Token;
        }
    }
    last as Token
}

/// Sample every row of the grid independently.
pub fn sample_action(grid: &LogitsGrid, rng: &mut impl rand::Rng) -> Action {
    Action::from_sorted(
        (0..grid.rows())
            .map(|r| (grid.positions()[r], sample_token(grid.row(r), rng)))
            .collect(),
    )
}

/// Everything needed to differentiate one evaluated row.
#[derive(Debug, Clone)]
pub(crate) struct RowEval {
    pub position: usize,
    pub features: Vec<(usize, f64)>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub logp: Vec<f64>,
}

impl RowEval {
    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|&l| libm::exp(l)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionLogProb {
    pub total: f64,
    pub per_position: Vec<(usize, f64)>,
}

/// Policy parameters together with their architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct PolicyParams {
    arch: Architecture,
    theta: Vec<f64>,
}

#[derive(Deserialize)]
struct RawParams {
    arch: Architecture,
    theta: Vec<f64>,
}

impl TryFrom<RawParams> for PolicyParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        PolicyParams::new(raw.arch, raw.theta)
    }
}

impl PolicyParams {
    pub fn new(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.param_dim() {
            return Err(config_err!(
                "parameter vector has length {}, architecture expects {}",
                theta.len(),
                arch.param_dim()
            ));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self { arch, theta: vec![0.0; arch.param_dim()] }
    }

    /// Gaussian initialization with standard deviation `scale`.
    pub fn random(arch: Architecture, scale: f64, rng: &mut impl rand::Rng) -> Self {
        let normal = Normal::new(0.0, scale).expect("finite positive scale");
        let theta = (0..arch.param_dim()).map(|_| normal.sample(rng)).collect();
        Self { arch, theta }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient::zeros(self.dim())
    }

    pub(crate) fn eval_row(&self, state: &DiffusionState, pos: usize) -> RowEval {
        let features = self.arch.features(state, pos);
        let v = self.arch.v();
        let f = self.arch.feature_dim();
        let (hidden, logits): (Vec<f64>, Vec<f64>) = match self.arch.kind {
            PolicyKind::Linear => {
                let logits = (0..v)
                    .map(|t| {
                        let w = &self.theta[t * f..(t + 1) * f];
                        features.iter().map(|&(k, x)| w[k] * x).sum()
                    })
                    .collect();
                (Vec::new(), logits)
            }
            PolicyKind::Mlp { hidden } => {
                let (w1, rest) = self.theta.split_at(hidden * f);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(v * hidden);
                let h: Vec<f64> = (0..hidden)
                    .map(|j| {
                        let w = &w1[j * f..(j + 1) * f];
                        libm::tanh(b1[j] + features.iter().map(|&(k, x)| w[k] * x).sum::<f64>())
                    })
                    .collect();
                let logits = (0..v)
                    .map(|t| {
                        b2[t] + w2[t * hidden..(t + 1) * hidden]
                            .iter()
                            .zip(&h)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    })
                    .collect();
                (h, logits)
            }
        };
        let logp = log_softmax(&logits);
        RowEval { position: pos, features, hidden, logits, logp }
    }

    pub(crate) fn eval_rows(&self, state: &DiffusionState, positions: &[usize]) -> Result<Vec<RowEval>> {
        self.arch.check_state(state)?;
        if let Some(&p) = positions.iter().find(|&&p| p >= self.arch.completion_len) {
            return Err(contract!("position {p} outside completion of length {}", self.arch.completion_len));
        }
        Ok(positions.iter().map(|&p| self.eval_row(state, p)).collect())
    }

    /// Accumulate `scale * d(objective)/d(theta)` for a row whose objective
    /// has gradient `dlogits` with respect to the row's logits.
    pub(crate) fn backprop(&self, row: &RowEval, dlogits: &[f64], scale: f64, grad: &mut Gradient) {
        let v = self.arch.v();
        let f = self.arch.feature_dim();
        let g = grad.as_mut_slice();
        match self.arch.kind {
            PolicyKind::Linear => {
                for (t, &d) in dlogits.iter().enumerate() {
                    let c = scale * d;
                    if c == 0.0 {
                        continue;
                    }
                    let base = t * f;
                    for &(k, x) in &row.features {
                        g[base + k] += c * x;
                    }
                }
            }
            PolicyKind::Mlp { hidden } => {
                let off_b1 = hidden * f;
                let off_w2 = off_b1 + hidden;
                let off_b2 = off_w2 + v * hidden;
                let w2 = &self.theta[off_w2..off_b2];
                let mut dh = vec![0.0; hidden];
                for (t, &d) in dlogits.iter().enumerate() {
                    let c = scale * d;
                    g[off_b2 + t] += c;
                    for j in 0..hidden {
                        g[off_w2 + t * hidden + j] += c * row.hidden[j];
                        dh[j] += w2[t * hidden + j] * c;
                    }
                }
                for j in 0..hidden {
                    let dpre = dh[j] * (1.0 - row.hidden[j] * row.hidden[j]);
                    if dpre == 0.0 {
                        continue;
                    }
                    g[off_b1 + j] += dpre;
                    for &(k, x) in &row.features {
                        g[j * f + k] += dpre * x;
                    }
                }
            }
        }
    }

    /// Add `scale * grad log softmax(row)[token]`.
    pub(crate) fn backprop_logprob(&self, row: &RowEval, token: Token, scale: f64, grad: &mut Gradient) {
        let mut d = row.probs();
        d.iter_mut().for_each(|p| *p = -*p);
        d[token as usize] += 1.0;
        self.backprop(row, &d, scale, grad);
    }

    /// Logits rows for every masked position of the state.
    pub fn forward(&self, state: &DiffusionState) -> Result<LogitsGrid> {
        self.forward_at(state, &state.mask_set())
    }

    /// Logits rows for arbitrary completion positions.
    pub fn forward_at(&self, state: &DiffusionState, positions: &[usize]) -> Result<LogitsGrid> {
        let rows = self.eval_rows(state, positions)?;
        let logits = rows.into_iter().flat_map(|r| r.logits).collect();
        LogitsGrid::new(self.arch.v(), positions.to_vec(), logits)
    }

    pub fn action_logprob(&self, state: &DiffusionState, action: &Action) -> Result<ActionLogProb> {
        action.validate_for(&state.completion)?;
        let positions: Vec<usize> = action.positions().collect();
        let rows = self.eval_rows(state, &positions)?;
        let per_position: Vec<(usize, f64)> = rows
            .iter()
            .zip(action.assignments())
            .map(|(r, &(i, t))| (i, r.logp[t as usize]))
            .collect();
        let total = per_position.iter().map(|&(_, l)| l).sum();
        Ok(ActionLogProb { total, per_position })
    }

    /// Exact gradient of `sum_{i in positions} log pi(action[i] | s, i)`.
    pub fn grad_action_logprob(&self, state: &DiffusionState, action: &Action, positions: &[usize]) -> Result<Gradient> {
        action.validate_for(&state.completion)?;
        let mut grad = self.zero_gradient();
        let mut tokens = Vec::with_capacity(positions.len());
        for &p in positions {
            match action.get(p) {
                Some(t) => tokens.push(t),
                None => return Err(contract!("gradient position {p} is not masked in the state")),
            }
        }
        for (row, &t) in self.eval_rows(state, positions)?.iter().zip(&tokens) {
            self.backprop_logprob(row, t, 1.0, &mut grad);
        }
        Ok(grad)
    }
}
