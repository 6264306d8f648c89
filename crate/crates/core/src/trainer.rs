//! The training loop: rollouts from a frozen behavior policy, terminal loss,
//! same-state branching with a step loss, and one optimizer update per batch.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::meter::PassCounter;
use crate::objective::{combined_loss, step_loss, terminal_loss, LossConfig, LossMeters, TimestepLaw};
use crate::policy::{Architecture, FeatureSpec, Gradient, PolicyKind, PolicyParams};
use crate::rng::StreamSeed;
use crate::rollout::{branch, rollout, select_states, DecodeMode, Trajectory, UnmaskSchedule};
use crate::seq::MaskedSequence;
use crate::surrogate::{draw_patterns, Scope, SurrogateConfig};
use crate::tasks::{TaskInstance, TaskSpec};

/// Optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// Adam moments with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Global-norm gradient clip; `None` disables it.
    pub clip_norm: Option<f64>,
    pub kind: OptimizerKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            clip_norm: Some(0.2),
            kind: OptimizerKind::AdamW { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.1 },
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { lr, clip_norm: None, kind: OptimizerKind::Sgd }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(config_err!("clip_norm must be positive"));
            }
        }
        if let OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } = self.kind {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0) {
                return Err(config_err!("invalid AdamW hyperparameters"));
            }
        }
        Ok(())
    }
}

/// Optimizer moments and step count.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Apply one optimizer step to `params` given the loss gradient.
pub fn update(params: &mut PolicyParams, grad: &Gradient, cfg: &OptimizerConfig, state: &mut OptimizerState) -> Result<()> {
    if grad.dim() != params.dim() {
        return Err(config_err!("gradient dimension {} does not match parameters {}", grad.dim(), params.dim()));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient at optimizer step {}", state.step)));
    }
    let norm = grad.norm();
    let factor = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let theta = params.theta_mut();
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in theta.iter_mut().zip(grad.as_slice()) {
                *p -= cfg.lr * factor * g;
            }
        }
        OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
            if state.m.len() != theta.len() {
                state.m = alloc::vec![0.0; theta.len()];
                state.v = alloc::vec![0.0; theta.len()];
            }
            let t = state.step as f64;
            let bc1 = 1.0 - libm::pow(beta1, t);
            let bc2 = 1.0 - libm::pow(beta2, t);
            for i in 0..theta.len() {
                let g = factor * grad.as_slice()[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let step = (state.m[i] / bc1) / (libm::sqrt(state.v[i] / bc2) + eps);
                theta[i] -= cfg.lr * (step + weight_decay * theta[i]);
            }
        }
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("parameters after optimizer step {}", state.step)));
    }
    Ok(())
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    /// Rollouts per prompt.
    pub k: usize,
    /// Denoising steps per rollout.
    pub steps: usize,
    pub schedule: UnmaskSchedule,
    /// Branches per selected state.
    pub z: usize,
    /// Prompts per batch.
    pub batch: usize,
    /// Optimizer updates.
    pub updates: usize,
    /// Timesteps sampled per prompt for branching.
    pub t_sub: usize,
    pub sampler: TimestepLaw,
    pub loss: LossConfig,
    pub surrogate: SurrogateConfig,
    pub optimizer: OptimizerConfig,
    pub features: FeatureSpec,
    pub policy: PolicyKind,
    /// Standard deviation of the initial parameters.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            k: 6,
            steps: 6,
            schedule: UnmaskSchedule::new(1),
            z: 2,
            batch: 4,
            updates: 200,
            t_sub: 1,
            sampler: TimestepLaw::default(),
            loss: LossConfig::default(),
            surrogate: SurrogateConfig::default(),
            optimizer: OptimizerConfig::default(),
            features: FeatureSpec { window: 1, prompt_histogram: true, prompt_cross: true },
            policy: PolicyKind::Linear,
            init_scale: 0.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Loss settings with this run's `K` and `Z`.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig { k: self.k, z: self.z, ..self.loss }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            vocab: self.task.vocab(),
            prompt_len: self.task.prompt_len(),
            completion_len: self.task.completion_len(),
            features: self.features,
            kind: self.policy,
        }
    }

    /// Selected states per prompt.
    pub fn selected_states(&self) -> usize {
        if self.loss.alpha_step > 0.0 {
            self.k * self.t_sub
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        for (name, v) in [("k", self.k), ("z", self.z), ("batch", self.batch), ("t_sub", self.t_sub)] {
            if v == 0 {
                return Err(config_err!("{name} must be positive"));
            }
        }
        self.schedule.validate(self.task.completion_len(), self.steps)?;
        self.loss_config().validate()?;
        self.surrogate.validate()?;
        self.optimizer.validate()?;
        if let PolicyKind::Mlp { hidden: 0 } = self.policy {
            return Err(config_err!("mlp hidden width must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(config_err!("init_scale must be a nonnegative finite number"));
        }
        Ok(())
    }
}

/// Operation counts, either predicted per prompt or measured over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub rollout_forward_passes: u64,
    pub optimizer_steps: u64,
    pub reward_evals: u64,
    pub surrogate_terminal_calls: u64,
    pub surrogate_step_calls: u64,
    /// Reference-policy forwards for the KL penalty.
    pub reference_calls: u64,
}

impl OpCounters {
    /// Per-prompt counts scaled to `prompts` prompts; optimizer steps are
    /// left as is.
    pub fn times_prompts(&self, prompts: u64) -> Self {
        Self {
            rollout_forward_passes: self.rollout_forward_passes * prompts,
            optimizer_steps: self.optimizer_steps,
            reward_evals: self.reward_evals * prompts,
            surrogate_terminal_calls: self.surrogate_terminal_calls * prompts,
            surrogate_step_calls: self.surrogate_step_calls * prompts,
            reference_calls: self.reference_calls * prompts,
        }
    }
}

/// Predicted operation counts per prompt.
pub fn count_ops(cfg: &RunConfig) -> Result<OpCounters> {
    if cfg.z == 0 {
        return Err(config_err!("z must be positive"));
    }
    let k = cfg.k as u64;
    let n_m = cfg.surrogate.n_mc as u64;
    let s = cfg.selected_states() as u64;
    let reference = if cfg.loss.kl_beta > 0.0 {
        n_m * k + if cfg.loss.kl_on_step { n_m * s } else { 0 }
    } else {
        0
    };
    Ok(OpCounters {
        rollout_forward_passes: k * cfg.steps as u64,
        optimizer_steps: cfg.updates as u64,
        reward_evals: k + s * cfg.z as u64,
        surrogate_terminal_calls: 2 * n_m * k,
        surrogate_step_calls: 2 * n_m * s,
        reference_calls: reference,
    })
}

/// Live counters shared by concurrent prompt workers.
#[derive(Debug, Default, Clone)]
pub struct Meters {
    pub rollout: PassCounter,
    pub reward: PassCounter,
    pub terminal: PassCounter,
    pub step: PassCounter,
    pub reference: PassCounter,
    pub optimizer: PassCounter,
}

impl Meters {
    pub fn from_counters(c: &OpCounters) -> Self {
        let m = Meters::default();
        m.rollout.add(c.rollout_forward_passes);
        m.reward.add(c.reward_evals);
        m.terminal.add(c.surrogate_terminal_calls);
        m.step.add(c.surrogate_step_calls);
        m.reference.add(c.reference_calls);
        m.optimizer.add(c.optimizer_steps);
        m
    }

    pub fn snapshot(&self) -> OpCounters {
        OpCounters {
            rollout_forward_passes: self.rollout.get(),
            optimizer_steps: self.optimizer.get(),
            reward_evals: self.reward.get(),
            surrogate_terminal_calls: self.terminal.get(),
            surrogate_step_calls: self.step.get(),
            reference_calls: self.reference.get(),
        }
    }
}

/// Runs independent jobs `0..n` and returns results in index order.
pub trait Executor: Sync {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T>;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

/// One logged row per optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update_step: u64,
    pub mean_terminal_reward: f64,
    /// Mean reward of branched completions; `None` when no states were
    /// branched.
    pub mean_step_reward: Option<f64>,
    pub loss: f64,
    pub loss_term: f64,
    pub loss_step: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub counters: OpCounters,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub optimizer: OptimizerState,
    pub counters: OpCounters,
    /// Index of the next update; all random streams are keyed by it.
    pub next_update: u64,
}

struct PromptOutcome {
    loss: f64,
    loss_term: f64,
    loss_step: f64,
    kl: f64,
    grad: Gradient,
    terminal_rewards: Vec<f64>,
    step_rewards: Vec<f64>,
}

fn scored(inst: &TaskInstance, completion: &MaskedSequence, meter: &PassCounter) -> f64 {
    meter.bump();
    inst.reward(completion)
}

pub struct Trainer {
    cfg: RunConfig,
    state: TrainState,
    meters: Meters,
    root: StreamSeed,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = StreamSeed::root(cfg.seed);
        let arch = cfg.architecture();
        let params = if cfg.init_scale > 0.0 {
            PolicyParams::random(arch, cfg.init_scale, &mut root.tag("init").rng())
        } else {
            PolicyParams::zeros(arch)
        };
        let state = TrainState {
            reference: params.clone(),
            params,
            optimizer: OptimizerState::default(),
            counters: OpCounters::default(),
            next_update: 0,
        };
        Ok(Self { cfg, state, meters: Meters::default(), root })
    }

    /// Continue from a saved state; the run proceeds exactly as if it had
    /// not been interrupted.
    pub fn resume(cfg: RunConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if *state.params.arch() != cfg.architecture() {
            return Err(config_err!("checkpoint architecture does not match the configuration"));
        }
        let meters = Meters::from_counters(&state.counters);
        Ok(Self { root: StreamSeed::root(cfg.seed), cfg, state, meters })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn params(&self) -> &PolicyParams {
        &self.state.params
    }

    pub fn counters(&self) -> OpCounters {
        self.meters.snapshot()
    }

    pub fn state(&self) -> TrainState {
        TrainState { counters: self.meters.snapshot(), ..self.state.clone() }
    }

    pub fn finished(&self) -> bool {
        self.state.next_update >= self.cfg.updates as u64
    }

    /// The prompts of update `u`, drawn from their own stream.
    pub fn batch_instances(&self, u: u64) -> Result<Vec<TaskInstance>> {
        (0..self.cfg.batch as u64)
            .map(|b| self.cfg.task.generate(&mut self.root.tag("prompt").index(u).index(b).rng()))
            .collect()
    }

    fn prompt_outcome(&self, old: &PolicyParams, u: u64, b: u64, inst: &TaskInstance) -> Result<PromptOutcome> {
        let cfg = &self.cfg;
        let lc = cfg.loss_config();
        let params = &self.state.params;
        let reference = (lc.kl_beta > 0.0).then_some(&self.state.reference);
        let seed = self.root.index(u).index(b);
        let prompt = inst.prompt();

        let trajectories = (0..cfg.k as u64)
            .map(|k| {
                let mut rng = seed.tag("rollout").index(k).rng();
                rollout(old, &prompt, cfg.steps, cfg.schedule, DecodeMode::Sample, &mut rng, &self.meters.rollout)
            })
            .collect::<Result<Vec<Trajectory>>>()?;
        let completions: Vec<(MaskedSequence, f64)> = trajectories
            .iter()
            .map(|tr| {
                let o = tr.completion().clone();
                let r = scored(inst, &o, &self.meters.reward);
                (o, r)
            })
            .collect();
        let term_patterns: Vec<_> = (0..cfg.k as u64)
            .map(|k| draw_patterns(prompt.len(), &cfg.surrogate, &mut seed.tag("terminal-patterns").index(k).rng()))
            .collect();
        let term = terminal_loss(
            params,
            old,
            reference,
            &prompt,
            &completions,
            &lc,
            &term_patterns,
            LossMeters { surrogate: &self.meters.terminal, reference: &self.meters.reference },
        )?;

        let mut steps = Vec::new();
        let mut step_rewards = Vec::new();
        if lc.alpha_step > 0.0 {
            let ts = cfg.sampler.sample(cfg.steps, cfg.t_sub, &mut seed.tag("timesteps").rng())?;
            let step_ref = if lc.kl_on_step { reference } else { None };
            for (i, sref) in select_states(cfg.k, cfg.steps, &ts)?.into_iter().enumerate() {
                let tr = &trajectories[sref.trajectory];
                let mut rng = seed.tag("branch").index(i as u64).rng();
                let branches: Vec<_> = branch(tr, sref.timestep, cfg.z, &mut rng)?
                    .into_iter()
                    .map(|(a, o)| {
                        let r = scored(inst, &o, &self.meters.reward);
                        step_rewards.push(r);
                        (a, r)
                    })
                    .collect();
                let patterns = draw_patterns(prompt.len(), &cfg.surrogate, &mut seed.tag("step-patterns").index(i as u64).rng());
                let state = &tr.states()[sref.timestep - 1];
                steps.push(step_loss(
                    params,
                    old,
                    step_ref,
                    state,
                    &branches,
                    &lc,
                    &patterns,
                    Scope::ActionOnly,
                    LossMeters { surrogate: &self.meters.step, reference: &self.meters.reference },
                )?);
            }
        }
        let c = combined_loss(Some(&term), &steps, &lc, params.dim());
        Ok(PromptOutcome {
            loss: c.loss,
            loss_term: c.loss_term,
            loss_step: c.loss_step,
            kl: c.kl,
            grad: c.grad,
            terminal_rewards: completions.iter().map(|c| c.1).collect(),
            step_rewards,
        })
    }

    /// Run one batch and one optimizer update.
    pub fn step(&mut self, exec: &impl Executor) -> Result<MetricsRow> {
        let u = self.state.next_update;
        let instances = self.batch_instances(u)?;
        // Behavior policy frozen for the whole batch.
        let old = self.state.params.clone();
        let outcomes = exec.map(instances.len(), |b| self.prompt_outcome(&old, u, b as u64, &instances[b]));
        let mut grad = self.state.params.zero_gradient();
        let (mut loss, mut loss_term, mut loss_step, mut kl) = (0.0, 0.0, 0.0, 0.0);
        let mut term_rewards = Vec::new();
        let mut step_rewards = Vec::new();
        for (b, o) in outcomes.into_iter().enumerate() {
            let o = o?;
            if !o.loss.is_finite() || !o.grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "update {u}, prompt {b}: loss {} (terminal {}, step {}, kl {}), gradient finite: {}, rewards {:?}",
                    o.loss,
                    o.loss_term,
                    o.loss_step,
                    o.kl,
                    o.grad.is_finite(),
                    o.terminal_rewards
                )));
            }
            grad += &o.grad;
            loss += o.loss;
            loss_term += o.loss_term;
            loss_step += o.loss_step;
            kl += o.kl;
            term_rewards.extend(o.terminal_rewards);
            step_rewards.extend(o.step_rewards);
        }
        update(&mut self.state.params, &grad, &self.cfg.optimizer, &mut self.state.optimizer)?;
        self.meters.optimizer.bump();
        self.state.next_update += 1;
        self.state.counters = self.meters.snapshot();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        Ok(MetricsRow {
            update_step: u + 1,
            mean_terminal_reward: mean(&term_rewards),
            mean_step_reward: (!step_rewards.is_empty()).then(|| mean(&step_rewards)),
            loss,
            loss_term,
            loss_step,
            kl,
            grad_norm: grad.norm(),
            counters: self.state.counters,
        })
    }

    /// Run the remaining updates, reporting each row to `on_row`.
    pub fn run(&mut self, exec: &impl Executor, mut on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let row = self.step(exec)?;
            on_row(&row)?;
        }
        Ok(())
    }
}

/// Greedy-decoding evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub steps: usize,
    pub per_step: usize,
    pub instances: usize,
    /// Fraction of instances with reward exactly 1.
    pub accuracy: f64,
    pub mean_reward: f64,
}

/// Decode every instance (greedy unless `mode` says otherwise) and score it.
pub fn evaluate(
    params: &PolicyParams,
    instances: &[TaskInstance],
    steps: usize,
    schedule: UnmaskSchedule,
    mode: DecodeMode,
    seed: StreamSeed,
) -> Result<EvalReport> {
    let passes = PassCounter::new();
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, inst) in instances.iter().enumerate() {
        let mut rng = seed.index(i as u64).rng();
        let tr = rollout(params, &inst.prompt(), steps, schedule, mode, &mut rng, &passes)?;
        let r = inst.reward(tr.completion());
        total += r;
        hits += usize::from(r == 1.0);
    }
    let n = instances.len().max(1) as f64;
    Ok(EvalReport {
        steps,
        per_step: schedule.per_step,
        instances: instances.len(),
        accuracy: hits as f64 / n,
        mean_reward: total / n,
    })
}

/// First-violation statistics over greedy decodes of Sudoku instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub decodes: usize,
    pub violating: usize,
    /// Mean first-violation step, counting "never" as `steps + 1`.
    pub mean_time: f64,
    /// Histogram over steps `1..=steps`, then "never".
    pub histogram: Vec<usize>,
}

pub fn first_violation_report(
    params: &PolicyParams,
    instances: &[crate::tasks::SudokuInstance],
    steps: usize,
    schedule: UnmaskSchedule,
) -> Result<ViolationReport> {
    let passes = PassCounter::new();
    let mut histogram = alloc::vec![0usize; steps + 1];
    let mut sum = 0.0;
    let mut violating = 0;
    let mut rng = StreamSeed::root(0).rng();
    for inst in instances {
        let tr = rollout(params, &inst.prompt(), steps, schedule, DecodeMode::Greedy, &mut rng, &passes)?;
        match inst.first_violation_time(&tr) {
            Some(t) => {
                violating += 1;
                histogram[t - 1] += 1;
                sum += t as f64;
            }
            None => {
                histogram[steps] += 1;
                sum += (steps + 1) as f64;
            }
        }
    }
    Ok(ViolationReport {
        decodes: instances.len(),
        violating,
        mean_time: sum / instances.len().max(1) as f64,
        histogram,
    })
}
