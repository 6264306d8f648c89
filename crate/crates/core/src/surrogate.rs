//! One-step masked-token surrogate log-probabilities.
//!
//! The sequence-level surrogate scores a completion with a single forward
//! pass on a fully masked completion; the state-wise surrogate scores an
//! action with a single forward pass on the state itself, summing only over
//! the currently masked positions. Both average over random prompt-masking
//! patterns. Patterns are drawn once and passed explicitly so that the
//! current, behaviour and reference policies can share them.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::meter::PassCounter;
use crate::policy::{Gradient, PolicyParams, RowEval};
use crate::seq::{fill, Action, DiffusionState, MaskedSequence};

/// How the prompt-masking ratio is chosen for each pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CorruptionLaw {
    /// Never mask the prompt; the surrogate becomes deterministic.
    Disabled,
    /// Ratio `p ~ Uniform(0, 1)` per pattern, then i.i.d. Bernoulli(p) masks.
    UniformRatio,
    /// A fixed ratio for every pattern.
    FixedRatio { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub n_mc: usize,
    pub law: CorruptionLaw,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { n_mc: 2, law: CorruptionLaw::UniformRatio }
    }
}

impl SurrogateConfig {
    pub fn deterministic() -> Self {
        Self { n_mc: 1, law: CorruptionLaw::Disabled }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return Err(config_err!("surrogate needs at least one Monte Carlo pattern"));
        }
        if let CorruptionLaw::FixedRatio { p } = self.law {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("fixed masking ratio {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptMaskPattern {
    pub mask: Vec<bool>,
    pub ratio: f64,
}

impl PromptMaskPattern {
    pub fn clear(len: usize) -> Self {
        Self { mask: alloc::vec![false; len], ratio: 0.0 }
    }

    pub fn apply(&self, prompt: &MaskedSequence) -> MaskedSequence {
        let mut out = prompt.clone();
        let mask = prompt.vocab().mask_id();
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                out.set(i, mask);
            }
        }
        out
    }
}

/// Draw one masking pattern for a prompt of length `len`.
pub fn draw_pattern(len: usize, law: CorruptionLaw, rng: &mut impl rand::Rng) -> PromptMaskPattern {
    let ratio = match law {
        CorruptionLaw::Disabled => return PromptMaskPattern::clear(len),
        CorruptionLaw::UniformRatio => rng.random::<f64>(),
        CorruptionLaw::FixedRatio { p } => p,
    };
    let mask = (0..len).map(|_| rng.random::<f64>() < ratio).collect();
    PromptMaskPattern { mask, ratio }
}

/// Corrupt a fully visible prompt. The completion is never touched.
pub fn corrupt_prompt(
    prompt: &MaskedSequence,
    law: CorruptionLaw,
    rng: &mut impl rand::Rng,
) -> (PromptMaskPattern, MaskedSequence) {
    let pattern = draw_pattern(prompt.len(), law, rng);
    let corrupted = pattern.apply(prompt);
    (pattern, corrupted)
}

/// `n_mc` independent patterns.
pub fn draw_patterns(len: usize, cfg: &SurrogateConfig, rng: &mut impl rand::Rng) -> Vec<PromptMaskPattern> {
    (0..cfg.n_mc).map(|_| draw_pattern(len, cfg.law, rng)).collect()
}

/// One policy's rows at the masked positions of a state, for each pattern.
///
/// Construction costs one forward pass per pattern; every action at this
/// state can then be scored and differentiated without further passes.
pub struct StateEvaluation<'a> {
    params: &'a PolicyParams,
    positions: Vec<usize>,
    per_pattern: Vec<Vec<RowEval>>,
}

impl<'a> StateEvaluation<'a> {
    pub fn new(
        params: &'a PolicyParams,
        state: &DiffusionState,
        patterns: &[PromptMaskPattern],
        passes: &PassCounter,
    ) -> Result<Self> {
        if patterns.is_empty() {
            return Err(contract!("surrogate evaluation needs at least one pattern"));
        }
        let positions = state.mask_set();
        let per_pattern = patterns
            .iter()
            .map(|pat| {
                if pat.mask.len() != state.prompt.len() {
                    return Err(contract!("pattern length {} does not match prompt length {}", pat.mask.len(), state.prompt.len()));
                }
                let corrupted = state.with_prompt(pat.apply(&state.prompt));
                passes.bump();
                params.eval_rows(&corrupted, &positions)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, positions, per_pattern })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn patterns(&self) -> usize {
        self.per_pattern.len()
    }

    fn check(&self, action: &Action) -> Result<()> {
        if action.len() != self.positions.len() || !action.positions().eq(self.positions.iter().copied()) {
            return Err(contract!("action keys do not match the evaluated mask set"));
        }
        Ok(())
    }

    /// Pattern-averaged `sum_{i in M} log pi(a_i | s^(m), i)`.
    pub fn logprob(&self, action: &Action) -> Result<f64> {
        self.check(action)?;
        let total: f64 = self
            .per_pattern
            .iter()
            .map(|rows| {
                rows.iter()
                    .zip(action.assignments())
                    .map(|(r, &(_, t))| r.logp[t as usize])
                    .sum::<f64>()
            })
            .sum();
        Ok(total / self.per_pattern.len() as f64)
    }

    /// `grad += scale * d logprob(action) / d theta`.
    pub fn accumulate_grad(&self, action: &Action, scale: f64, grad: &mut Gradient) -> Result<()> {
        self.check(action)?;
        let s = scale / self.per_pattern.len() as f64;
        for rows in &self.per_pattern {
            for (r, &(_, t)) in rows.iter().zip(action.assignments()) {
                self.params.backprop_logprob(r, t, s, grad);
            }
        }
        Ok(())
    }

    pub fn grad(&self, action: &Action) -> Result<Gradient> {
        let mut g = self.params.zero_gradient();
        self.accumulate_grad(action, 1.0, &mut g)?;
        Ok(g)
    }

    /// Pattern-averaged `sum_i KL(pi_self(.|s^(m), i) || pi_ref(.|s^(m), i))`.
    ///
    /// When `grad` is given, `scale` times the gradient of the value with
    /// respect to this evaluation's parameters is added to it. Both
    /// evaluations must come from the same state and patterns.
    pub fn kl_to(&self, reference: &StateEvaluation<'_>, scale: f64, grad: Option<&mut Gradient>) -> Result<f64> {
        if reference.positions != self.positions || reference.per_pattern.len() != self.per_pattern.len() {
            return Err(contract!("KL evaluations disagree on positions or patterns"));
        }
        let n = self.per_pattern.len() as f64;
        let mut total = 0.0;
        let mut grad = grad;
        for (rows, ref_rows) in self.per_pattern.iter().zip(&reference.per_pattern) {
            for (r, rr) in rows.iter().zip(ref_rows) {
                let p = r.probs();
                let diff: Vec<f64> = r.logp.iter().zip(&rr.logp).map(|(a, b)| a - b).collect();
                let kl: f64 = p.iter().zip(&diff).map(|(pi, d)| pi * d).sum();
                total += kl;
                if let Some(g) = grad.as_deref_mut() {
                    // d KL / d logit_v = p_v (log p_v - log q_v - KL)
                    let dl: Vec<f64> = p.iter().zip(&diff).map(|(pi, d)| pi * (d - kl)).collect();
                    self.params.backprop(r, &dl, scale / n, g);
                }
            }
        }
        Ok(total / n)
    }
}

/// Which positions a state-wise score covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Only the currently masked (newly filled) positions.
    ActionOnly,
    /// All completion positions: visible positions are additionally scored
    /// with their visible token as target, in the context of the filled
    /// completion.
    AllTokens,
}

/// Pattern-averaged log-probability of the visible tokens of `state`, scored
/// in the context of `fill(state, action)`, with its gradient. Costs one
/// forward pass per pattern.
pub fn visible_token_terms(
    params: &PolicyParams,
    state: &DiffusionState,
    action: &Action,
    patterns: &[PromptMaskPattern],
    passes: &PassCounter,
) -> Result<(f64, Gradient)> {
    let filled = DiffusionState::new(state.prompt.clone(), fill(state, action)?)?;
    let visible = state.completion.visible_set();
    let mut grad = params.zero_gradient();
    let mut total = 0.0;
    let n = patterns.len() as f64;
    for pat in patterns {
        let corrupted = filled.with_prompt(pat.apply(&filled.prompt));
        passes.bump();
        for r in params.eval_rows(&corrupted, &visible)? {
            let t = filled.completion.tokens()[r.position];
            total += r.logp[t as usize];
            params.backprop_logprob(&r, t, 1.0 / n, &mut grad);
        }
    }
    Ok((total / n, grad))
}

/// The fully masked state used by the sequence-level surrogate.
pub fn sequence_state(prompt: &MaskedSequence, completion_len: usize) -> Result<DiffusionState> {
    DiffusionState::new(prompt.clone(), MaskedSequence::fully_masked(prompt.vocab(), completion_len))
}

/// The completion viewed as an action on the fully masked state.
pub fn sequence_action(completion: &MaskedSequence) -> Result<Action> {
    if completion.mask_count() != 0 {
        return Err(contract!("sequence surrogate needs a fully visible completion"));
    }
    Ok(Action::from_sorted(completion.tokens().iter().copied().enumerate().collect()))
}

/// Sequence-level surrogate `E_m[sum_j log p(o_j | q^(m), fully masked)]`.
pub fn seq_surrogate_logprob(
    params: &PolicyParams,
    prompt: &MaskedSequence,
    completion: &MaskedSequence,
    cfg: &SurrogateConfig,
    rng: &mut impl rand::Rng,
    passes: &PassCounter,
) -> Result<f64> {
    let state = sequence_state(prompt, completion.len())?;
    let action = sequence_action(completion)?;
    let patterns = draw_patterns(prompt.len(), cfg, rng);
    StateEvaluation::new(params, &state, &patterns, passes)?.logprob(&action)
}

/// State-wise surrogate over the masked positions of `state`.
pub fn state_surrogate_logprob(
    params: &PolicyParams,
    state: &DiffusionState,
    action: &Action,
    cfg: &SurrogateConfig,
    rng: &mut impl rand::Rng,
    passes: &PassCounter,
) -> Result<f64> {
    action.validate_for(&state.completion)?;
    let patterns = draw_patterns(state.prompt.len(), cfg, rng);
    StateEvaluation::new(params, state, &patterns, passes)?.logprob(action)
}

pub fn state_surrogate_grad(
    params: &PolicyParams,
    state: &DiffusionState,
    action: &Action,
    cfg: &SurrogateConfig,
    rng: &mut impl rand::Rng,
    passes: &PassCounter,
) -> Result<Gradient> {
    action.validate_for(&state.completion)?;
    let patterns = draw_patterns(state.prompt.len(), cfg, rng);
    StateEvaluation::new(params, state, &patterns, passes)?.grad(action)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Architecture, FeatureSpec, PolicyKind};
    use crate::rng::StreamSeed;
    use crate::seq::Vocab;
    use alloc::vec;

    fn arch() -> Architecture {
        Architecture {
            vocab: Vocab::new(3).unwrap(),
            prompt_len: 4,
            completion_len: 4,
            features: FeatureSpec { window: 1, prompt_histogram: true, prompt_cross: true },
            kind: PolicyKind::Linear,
        }
    }

    fn prompt() -> MaskedSequence {
        MaskedSequence::new(Vocab::new(3).unwrap(), vec![0, 2, 1, 1]).unwrap()
    }

    fn state(c: &[i64]) -> DiffusionState {
        DiffusionState::new(prompt(), MaskedSequence::from_signed(Vocab::new(3).unwrap(), c).unwrap()).unwrap()
    }

    fn params(seed: u64) -> PolicyParams {
        PolicyParams::random(arch(), 0.9, &mut StreamSeed::root(seed).rng())
    }

    #[test]
    fn forced_ratios() {
        let q = prompt();
        let mut rng = StreamSeed::root(0).rng();
        let (pat, c) = corrupt_prompt(&q, CorruptionLaw::FixedRatio { p: 0.0 }, &mut rng);
        assert!(pat.mask.iter().all(|&m| !m));
        assert_eq!(c, q);
        let (pat, c) = corrupt_prompt(&q, CorruptionLaw::FixedRatio { p: 1.0 }, &mut rng);
        assert!(pat.mask.iter().all(|&m| m));
        assert_eq!(c.mask_count(), 4);
        let long = MaskedSequence::new(Vocab::new(3).unwrap(), vec![1; 1000]).unwrap();
        let (_, c) = corrupt_prompt(&long, CorruptionLaw::FixedRatio { p: 0.5 }, &mut rng);
        assert!((c.mask_count() as f64 / 1000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn uniform_policy_sequence_surrogate_is_exact() {
        let p = PolicyParams::zeros(arch());
        let o = MaskedSequence::new(Vocab::new(3).unwrap(), vec![2, 0, 1, 1]).unwrap();
        let cfg = SurrogateConfig { n_mc: 5, law: CorruptionLaw::UniformRatio };
        let lp = seq_surrogate_logprob(&p, &prompt(), &o, &cfg, &mut StreamSeed::root(1).rng(), &PassCounter::new()).unwrap();
        assert!((lp - 4.0 * libm::log(1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn disabled_corruption_is_deterministic_and_matches_policy() {
        let p = params(2);
        let s = state(&[-1, 1, -1, -1]);
        let a = Action::new(vec![(0, 2), (2, 0), (3, 1)]).unwrap();
        let cfg = SurrogateConfig { n_mc: 3, law: CorruptionLaw::Disabled };
        let c = PassCounter::new();
        let x = state_surrogate_logprob(&p, &s, &a, &cfg, &mut StreamSeed::root(1).rng(), &c).unwrap();
        let y = state_surrogate_logprob(&p, &s, &a, &cfg, &mut StreamSeed::root(2).rng(), &c).unwrap();
        assert_eq!(c.get(), 6);
        assert!((x - y).abs() < 1e-14);
        assert!((x - p.action_logprob(&s, &a).unwrap().total).abs() < 1e-12);
        let g = state_surrogate_grad(&p, &s, &a, &cfg, &mut StreamSeed::root(1).rng(), &c).unwrap();
        let direct = p.grad_action_logprob(&s, &a, &s.mask_set()).unwrap();
        assert!(g.as_slice().iter().zip(direct.as_slice()).all(|(u, v)| (u - v).abs() < 1e-12));
    }

    #[test]
    fn empty_mask_state_scores_zero() {
        let p = params(3);
        let s = state(&[0, 1, 2, 0]);
        let cfg = SurrogateConfig::default();
        let lp = state_surrogate_logprob(&p, &s, &Action::empty(), &cfg, &mut StreamSeed::root(0).rng(), &PassCounter::new()).unwrap();
        assert_eq!(lp, 0.0);
        let g = state_surrogate_grad(&p, &s, &Action::empty(), &cfg, &mut StreamSeed::root(0).rng(), &PassCounter::new()).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn state_wise_reduces_to_sequence_level_on_fully_masked_state() {
        let p = params(4);
        let o = MaskedSequence::new(Vocab::new(3).unwrap(), vec![1, 0, 2, 2]).unwrap();
        let cfg = SurrogateConfig { n_mc: 4, law: CorruptionLaw::UniformRatio };
        let c = PassCounter::new();
        let seq = seq_surrogate_logprob(&p, &prompt(), &o, &cfg, &mut StreamSeed::root(7).rng(), &c).unwrap();
        let s = sequence_state(&prompt(), 4).unwrap();
        let a = sequence_action(&o).unwrap();
        let st = state_surrogate_logprob(&p, &s, &a, &cfg, &mut StreamSeed::root(7).rng(), &c).unwrap();
        assert_eq!(seq, st);
    }

    #[test]
    fn shared_patterns_give_unit_ratio() {
        let p = params(5);
        let old = p.clone();
        let s = state(&[-1, -1, 2, -1]);
        let a = Action::new(vec![(0, 1), (1, 1), (3, 0)]).unwrap();
        let pats = draw_patterns(4, &SurrogateConfig { n_mc: 6, law: CorruptionLaw::UniformRatio }, &mut StreamSeed::root(3).rng());
        let c = PassCounter::new();
        let e1 = StateEvaluation::new(&p, &s, &pats, &c).unwrap();
        let e0 = StateEvaluation::new(&old, &s, &pats, &c).unwrap();
        assert_eq!(c.get(), 12);
        let rho = libm::exp(e1.logprob(&a).unwrap() - e0.logprob(&a).unwrap());
        assert_eq!(rho, 1.0);
        assert_eq!(e1.kl_to(&e0, 1.0, None).unwrap(), 0.0);
    }

    #[test]
    fn corrupted_gradient_matches_finite_differences() {
        let h = 1e-5;
        let s = state(&[-1, 0, -1, -1]);
        let a = Action::new(vec![(0, 1), (2, 2), (3, 0)]).unwrap();
        for seed in 0..4 {
            let p = params(10 + seed);
            let pats = draw_patterns(4, &SurrogateConfig { n_mc: 3, law: CorruptionLaw::UniformRatio }, &mut StreamSeed::root(seed).rng());
            let c = PassCounter::new();
            let g = StateEvaluation::new(&p, &s, &pats, &c).unwrap().grad(&a).unwrap();
            for k in 0..p.dim() {
                let f = |delta: f64| {
                    let mut q = p.clone();
                    q.theta_mut()[k] += delta;
                    StateEvaluation::new(&q, &s, &pats, &c).unwrap().logprob(&a).unwrap()
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let err = (fd - g[k]).abs() / g[k].abs().max(fd.abs()).max(1e-3);
                assert!(err < 1e-5, "coord {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let h = 1e-5;
        let s = state(&[-1, 0, -1, 2]);
        let p = params(20);
        let r = params(21);
        let pats = draw_patterns(4, &SurrogateConfig { n_mc: 2, law: CorruptionLaw::UniformRatio }, &mut StreamSeed::root(5).rng());
        let c = PassCounter::new();
        let re = StateEvaluation::new(&r, &s, &pats, &c).unwrap();
        let mut g = p.zero_gradient();
        let kl = StateEvaluation::new(&p, &s, &pats, &c).unwrap().kl_to(&re, 1.0, Some(&mut g)).unwrap();
        assert!(kl > 0.0);
        for k in 0..p.dim() {
            let f = |delta: f64| {
                let mut q = p.clone();
                q.theta_mut()[k] += delta;
                StateEvaluation::new(&q, &s, &pats, &c).unwrap().kl_to(&re, 1.0, None).unwrap()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let err = (fd - g[k]).abs() / g[k].abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-5, "coord {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn action_mismatch_is_contract_violation() {
        let p = params(6);
        let s = state(&[-1, 0, -1, 2]);
        let bad = Action::new(vec![(0, 1)]).unwrap();
        let r = state_surrogate_logprob(&p, &s, &bad, &SurrogateConfig::default(), &mut StreamSeed::root(0).rng(), &PassCounter::new());
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }
}
