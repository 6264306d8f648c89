//! Group advantages, clipped likelihood-ratio losses, KL penalty and
//! timestep samplers.
//!
//! All losses return the gradient of the *loss* (not of the objective); the
//! update direction is its negative.

use alloc::vec::Vec;

use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::meter::PassCounter;
use crate::policy::{Gradient, PolicyParams};
use crate::seq::{Action, DiffusionState, MaskedSequence};
use crate::surrogate::{sequence_action, sequence_state, visible_token_terms, PromptMaskPattern, Scope, StateEvaluation};

/// Rewards of a group, their mean and the centred advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutcome {
    pub rewards: Vec<f64>,
    pub baseline: f64,
    pub advantages: Vec<f64>,
}

pub fn group_advantages(rewards: &[f64]) -> Result<GroupOutcome> {
    if rewards.is_empty() {
        return Err(contract!("group advantages need at least one reward"));
    }
    let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let advantages = rewards.iter().map(|r| r - baseline).collect();
    Ok(GroupOutcome { rewards: rewards.to_vec(), baseline, advantages })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha_step: f64,
    pub alpha_term: f64,
    /// `None` disables clipping.
    pub clip_eps: Option<f64>,
    pub kl_beta: f64,
    /// Also penalize KL at the selected step states.
    pub kl_on_step: bool,
    /// Branches per selected state.
    pub z: usize,
    /// Rollouts per prompt.
    pub k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha_step: 0.1, alpha_term: 1.0, clip_eps: Some(0.2), kl_beta: 0.01, kl_on_step: false, z: 2, k: 6 }
    }
}

impl LossConfig {
    /// Unclipped, KL-free weights, as assumed by the estimator identities.
    pub fn unclipped(alpha_step: f64, alpha_term: f64, z: usize, k: usize) -> Self {
        Self { alpha_step, alpha_term, clip_eps: None, kl_beta: 0.0, kl_on_step: false, z, k }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_step >= 0.0 && self.alpha_term >= 0.0 && self.kl_beta >= 0.0) {
            return Err(config_err!("loss weights must be nonnegative"));
        }
        if let Some(eps) = self.clip_eps {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(config_err!("clip_eps {eps} outside (0, 1)"));
            }
        }
        if self.z == 0 {
            return Err(config_err!("branch size z must be positive"));
        }
        if self.k == 0 {
            return Err(config_err!("rollouts per prompt k must be positive"));
        }
        Ok(())
    }
}

/// Pessimistic clipped objective `min(rho A, clip(rho, 1-eps, 1+eps) A)` and
/// its derivative with respect to `rho`.
pub fn clip_objective(ratio: f64, advantage: f64, eps: Option<f64>) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let Some(eps) = eps else {
        return (unclipped, advantage);
    };
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

/// Result of one group loss (a step state or a prompt's terminal group).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Gradient,
    pub ratios: Vec<f64>,
    pub group: GroupOutcome,
    /// KL to the reference (unweighted) and its gradient, when a reference
    /// was supplied.
    pub kl: Option<(f64, Gradient)>,
}

/// Forward-pass counters a loss attributes its work to.
#[derive(Debug, Clone, Copy)]
pub struct LossMeters<'a> {
    pub surrogate: &'a PassCounter,
    pub reference: &'a PassCounter,
}

fn ratio_loss(
    new: &[f64],
    old: &[f64],
    group: GroupOutcome,
    eps: Option<f64>,
    mut add_grad: impl FnMut(usize, f64, &mut Gradient) -> Result<()>,
    dim: usize,
) -> Result<(f64, Gradient, Vec<f64>, GroupOutcome)> {
    let n = new.len() as f64;
    let mut loss = 0.0;
    let mut grad = Gradient::zeros(dim);
    let mut ratios = Vec::with_capacity(new.len());
    for (j, ((&lp, &lp_old), &adv)) in new.iter().zip(old).zip(&group.advantages).enumerate() {
        let rho = libm::exp(lp - lp_old);
        let (value, dv) = clip_objective(rho, adv, eps);
        loss -= value / n;
        if dv != 0.0 {
            // d rho / d theta = rho * d lp / d theta
            add_grad(j, -dv * rho / n, &mut grad)?;
        }
        ratios.push(rho);
    }
    Ok((loss, grad, ratios, group))
}

/// Step-level loss `-(1/Z) sum_z clip_obj(rho_z, A_z)` at one state, with
/// ratios from the state-wise surrogate under shared patterns.
///
/// Costs `2 * patterns.len()` surrogate passes (plus `patterns.len()` per
/// branch per policy for [`Scope::AllTokens`], and `patterns.len()`
/// reference passes when `reference` is given).
#[allow(clippy::too_many_arguments)]
pub fn step_loss(
    params: &PolicyParams,
    old: &PolicyParams,
    reference: Option<&PolicyParams>,
    state: &DiffusionState,
    branches: &[(Action, f64)],
    cfg: &LossConfig,
    patterns: &[PromptMaskPattern],
    scope: Scope,
    meters: LossMeters<'_>,
) -> Result<LossOutput> {
    for (a, _) in branches {
        a.validate_for(&state.completion)?;
    }
    let rewards: Vec<f64> = branches.iter().map(|b| b.1).collect();
    let group = group_advantages(&rewards)?;
    let eval = StateEvaluation::new(params, state, patterns, meters.surrogate)?;
    let eval_old = StateEvaluation::new(old, state, patterns, meters.surrogate)?;
    let mut new = Vec::with_capacity(branches.len());
    let mut prev = Vec::with_capacity(branches.len());
    let mut visible_grads = Vec::new();
    for (a, _) in branches {
        let mut lp = eval.logprob(a)?;
        let mut lp_old = eval_old.logprob(a)?;
        if scope == Scope::AllTokens {
            let (vis, g) = visible_token_terms(params, state, a, patterns, meters.surrogate)?;
            let (vis_old, _) = visible_token_terms(old, state, a, patterns, meters.surrogate)?;
            lp += vis;
            lp_old += vis_old;
            visible_grads.push(g);
        }
        new.push(lp);
        prev.push(lp_old);
    }
    let (loss, grad, ratios, group) = ratio_loss(
        &new,
        &prev,
        group,
        cfg.clip_eps,
        |j, scale, g| {
            eval.accumulate_grad(&branches[j].0, scale, g)?;
            if let Some(vg) = visible_grads.get(j) {
                g.axpy(scale, vg);
            }
            Ok(())
        },
        params.dim(),
    )?;
    let kl = match reference {
        Some(r) => Some(kl_from_eval(&eval, r, state, patterns, meters.reference)?),
        None => None,
    };
    Ok(LossOutput { loss, grad, ratios, group, kl })
}

/// Terminal loss over a prompt's `K` completions with the sequence-level
/// surrogate; `patterns[k]` are the shared patterns for completion `k`.
///
/// Costs `2 * N_m` surrogate passes per completion, plus `N_m` reference
/// passes per completion when `reference` is given.
#[allow(clippy::too_many_arguments)]
pub fn terminal_loss(
    params: &PolicyParams,
    old: &PolicyParams,
    reference: Option<&PolicyParams>,
    prompt: &MaskedSequence,
    completions: &[(MaskedSequence, f64)],
    cfg: &LossConfig,
    patterns: &[Vec<PromptMaskPattern>],
    meters: LossMeters<'_>,
) -> Result<LossOutput> {
    if patterns.len() != completions.len() {
        return Err(contract!("need one pattern set per completion ({} vs {})", patterns.len(), completions.len()));
    }
    let len = params.arch().completion_len;
    let state = sequence_state(prompt, len)?;
    let rewards: Vec<f64> = completions.iter().map(|c| c.1).collect();
    let group = group_advantages(&rewards)?;
    let actions = completions
        .iter()
        .map(|(o, _)| sequence_action(o))
        .collect::<Result<Vec<_>>>()?;
    let evals = patterns
        .iter()
        .map(|p| StateEvaluation::new(params, &state, p, meters.surrogate))
        .collect::<Result<Vec<_>>>()?;
    let mut new = Vec::with_capacity(actions.len());
    let mut prev = Vec::with_capacity(actions.len());
    for ((a, e), p) in actions.iter().zip(&evals).zip(patterns) {
        new.push(e.logprob(a)?);
        prev.push(StateEvaluation::new(old, &state, p, meters.surrogate)?.logprob(a)?);
    }
    let (loss, grad, ratios, group) = ratio_loss(
        &new,
        &prev,
        group,
        cfg.clip_eps,
        |j, scale, g| evals[j].accumulate_grad(&actions[j], scale, g),
        params.dim(),
    )?;
    let kl = match reference {
        Some(r) => {
            let n = evals.len() as f64;
            let mut value = 0.0;
            let mut kg = params.zero_gradient();
            for (e, p) in evals.iter().zip(patterns) {
                let (v, g) = kl_from_eval(e, r, &state, p, meters.reference)?;
                value += v / n;
                kg.axpy(1.0 / n, &g);
            }
            Some((value, kg))
        }
        None => None,
    };
    Ok(LossOutput { loss, grad, ratios, group, kl })
}

fn kl_from_eval(
    eval: &StateEvaluation<'_>,
    reference: &PolicyParams,
    state: &DiffusionState,
    patterns: &[PromptMaskPattern],
    passes: &PassCounter,
) -> Result<(f64, Gradient)> {
    let ref_eval = StateEvaluation::new(reference, state, patterns, passes)?;
    let mut g = Gradient::zeros(reference.dim());
    let v = eval.kl_to(&ref_eval, 1.0, Some(&mut g))?;
    Ok((v, g))
}

/// Exact categorical KL between the policy and reference rows at the masked
/// positions of `state`, averaged over shared patterns, with its gradient.
pub fn kl_penalty(
    params: &PolicyParams,
    reference: &PolicyParams,
    state: &DiffusionState,
    patterns: &[PromptMaskPattern],
    meters: LossMeters<'_>,
) -> Result<(f64, Gradient)> {
    let eval = StateEvaluation::new(params, state, patterns, meters.surrogate)?;
    kl_from_eval(&eval, reference, state, patterns, meters.reference)
}

/// Sum of per-state step losses and gradients.
pub fn aggregate_step_loss(outputs: &[LossOutput], dim: usize) -> (f64, Gradient) {
    let mut grad = Gradient::zeros(dim);
    let mut loss = 0.0;
    for o in outputs {
        loss += o.loss;
        grad += &o.grad;
    }
    (loss, grad)
}

/// Weighted combination of a prompt's terminal and step losses plus KL.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub loss: f64,
    pub grad: Gradient,
    pub loss_term: f64,
    pub loss_step: f64,
    pub kl: f64,
}

pub fn combined_loss(
    terminal: Option<&LossOutput>,
    steps: &[LossOutput],
    cfg: &LossConfig,
    dim: usize,
) -> CombinedLoss {
    let mut grad = Gradient::zeros(dim);
    let (loss_step, step_grad) = aggregate_step_loss(steps, dim);
    let mut kl = 0.0;
    let mut kl_grad = Gradient::zeros(dim);
    let mut loss_term = 0.0;
    if let Some(t) = terminal {
        loss_term = t.loss;
        grad.axpy(cfg.alpha_term, &t.grad);
        if let Some((v, g)) = &t.kl {
            kl += v;
            kl_grad += g;
        }
    }
    grad.axpy(cfg.alpha_step, &step_grad);
    if cfg.kl_on_step {
        for s in steps {
            if let Some((v, g)) = &s.kl {
                kl += v;
                kl_grad += g;
            }
        }
    }
    grad.axpy(cfg.kl_beta, &kl_grad);
    let loss = cfg.alpha_term * loss_term + cfg.alpha_step * loss_step + cfg.kl_beta * kl;
    CombinedLoss { loss, grad, loss_term, loss_step, kl }
}

/// Distribution over 1-based denoising timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum TimestepLaw {
    Uniform,
    /// `w(t) ~ (t / T)^k`: favours states near the terminal one.
    PolyLate { k: u32 },
    /// `w(t) ~ ((T + 1 - t) / T)^k`: favours early, heavily masked states.
    PolyEarly { k: u32 },
}

impl Default for TimestepLaw {
    fn default() -> Self {
        TimestepLaw::PolyLate { k: 4 }
    }
}

impl TimestepLaw {
    /// Normalized weights for `t = 1..=steps` (index `t - 1`).
    pub fn weights(&self, steps: usize) -> Vec<f64> {
        let tt = steps as f64;
        let raw: Vec<f64> = (1..=steps)
            .map(|t| {
                let t = t as f64;
                match *self {
                    TimestepLaw::Uniform => 1.0,
                    TimestepLaw::PolyLate { k } => libm::pow(t / tt, f64::from(k)),
                    TimestepLaw::PolyEarly { k } => libm::pow((tt + 1.0 - t) / tt, f64::from(k)),
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    /// `n` i.i.d. timesteps in `1..=steps`.
    pub fn sample(&self, steps: usize, n: usize, rng: &mut impl rand::Rng) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(config_err!("timestep sampler needs at least one step"));
        }
        let dist = WeightedIndex::new(self.weights(steps)).map_err(|e| config_err!("timestep weights: {e}"))?;
        Ok((0..n).map(|_| dist.sample(rng) + 1).collect())
    }
}
