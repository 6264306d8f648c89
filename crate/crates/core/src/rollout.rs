//! Multi-step confidence-ordered denoising with cached logits, and
//! same-state branching from the cache.
//!
//! Timesteps are 1-based: the state *before* the commits of step `t` is
//! `states[t - 1]` (so step 1 sees the fully masked completion) and
//! `states[T]` is the terminal completion.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::meter::PassCounter;
use crate::policy::{log_softmax, sample_token, sample_action, LogitsGrid, PolicyParams};
use crate::seq::{fill, Action, DiffusionState, MaskedSequence, Token};

/// Commit `per_step` positions per denoising step, optionally restricted to
/// the left-most incomplete block of `block` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmaskSchedule {
    pub per_step: usize,
    #[serde(default)]
    pub block: Option<usize>,
}

impl UnmaskSchedule {
    pub fn new(per_step: usize) -> Self {
        Self { per_step, block: None }
    }

    /// Number of steps needed to unmask a fully masked sequence of `len`.
    pub fn steps_required(&self, len: usize) -> usize {
        let c = self.per_step.max(1);
        match self.block {
            None => len.div_ceil(c),
            Some(b) => {
                let b = b.max(1);
                let full = len / b;
                let rest = len % b;
                full * b.div_ceil(c) + rest.div_ceil(c)
            }
        }
    }

    pub fn validate(&self, len: usize, steps: usize) -> Result<()> {
        if self.per_step == 0 {
            return Err(config_err!("schedule must commit at least one token per step"));
        }
        if self.block == Some(0) {
            return Err(config_err!("block size must be positive"));
        }
        if steps == 0 {
            return Err(config_err!("number of denoising steps must be positive"));
        }
        let need = self.steps_required(len);
        if need > steps {
            return Err(config_err!(
                "schedule commits {} per step{}; {len} positions need {need} steps but only {steps} are configured",
                self.per_step,
                self.block.map(|b| alloc::format!(" in blocks of {b}")).unwrap_or_default()
            ));
        }
        Ok(())
    }

    fn eligible(&self, masked: &[usize]) -> Vec<usize> {
        match self.block {
            None => masked.to_vec(),
            Some(b) => match masked.first() {
                None => Vec::new(),
                Some(&first) => {
                    let blk = first / b;
                    masked.iter().copied().filter(|&i| i / b == blk).collect()
                }
            },
        }
    }

    /// Positions to commit given one proposal `(position, token, confidence)`
    /// per masked position (sorted by position). Highest confidence first;
    /// ties go to the lower position, then the lower token id.
    pub fn select(&self, proposals: &[(usize, Token, f64)]) -> Vec<usize> {
        let masked: Vec<usize> = proposals.iter().map(|p| p.0).collect();
        let eligible = self.eligible(&masked);
        let mut cands: Vec<&(usize, Token, f64)> =
            proposals.iter().filter(|p| eligible.binary_search(&p.0).is_ok()).collect();
        cands.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let mut out: Vec<usize> = cands.into_iter().take(self.per_step).map(|p| p.0).collect();
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Sample every masked position, commit the most confident samples.
    Sample,
    /// Arg-max every masked position (ties to the lower token id).
    Greedy,
}

/// Per-step logits over each visited state's mask set, written during the
/// rollout by the behaviour policy.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCache {
    grids: Vec<LogitsGrid>,
}

impl LogitCache {
    /// Grid for 1-based timestep `t`.
    pub fn get(&self, t: usize) -> Option<&LogitsGrid> {
        t.checked_sub(1).and_then(|i| self.grids.get(i))
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<DiffusionState>,
    events: Vec<Vec<(usize, Token)>>,
    cache: LogitCache,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.events.len()
    }

    pub fn states(&self) -> &[DiffusionState] {
        &self.states
    }

    /// State at 1-based timestep `t` (before that step's commits).
    pub fn state(&self, t: usize) -> Option<&DiffusionState> {
        (1..=self.steps()).contains(&t).then(|| &self.states[t - 1])
    }

    pub fn terminal(&self) -> &DiffusionState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn completion(&self) -> &MaskedSequence {
        &self.terminal().completion
    }

    /// Tokens committed at 1-based step `t`.
    pub fn events(&self, t: usize) -> &[(usize, Token)] {
        &self.events[t - 1]
    }

    pub fn all_events(&self) -> &[Vec<(usize, Token)>] {
        &self.events
    }

    pub fn cache(&self) -> &LogitCache {
        &self.cache
    }
}

/// Run `steps` denoising steps from a fully masked completion.
///
/// Each step runs one forward pass (counted on `passes`), caches the grid,
/// proposes a token for every masked position and commits the schedule's
/// selection. Committed tokens never change.
pub fn rollout(
    behavior: &PolicyParams,
    prompt: &MaskedSequence,
    steps: usize,
    schedule: UnmaskSchedule,
    mode: DecodeMode,
    rng: &mut impl rand::Rng,
    passes: &PassCounter,
) -> Result<Trajectory> {
    let len = behavior.arch().completion_len;
    schedule.validate(len, steps)?;
    let mut state = DiffusionState::new(prompt.clone(), MaskedSequence::fully_masked(prompt.vocab(), len))?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut events = Vec::with_capacity(steps);
    let mut grids = Vec::with_capacity(steps);
    for _ in 0..steps {
        let grid = behavior.forward(&state)?;
        passes.bump();
        let proposals: Vec<(usize, Token, f64)> = (0..grid.rows())
            .map(|r| {
                let row = grid.row(r);
                let token = match mode {
                    DecodeMode::Sample => sample_token(row, rng),
                    DecodeMode::Greedy => argmax(row),
                };
                let conf = libm::exp(log_softmax(row)[token as usize]);
                (grid.positions()[r], token, conf)
            })
            .collect();
        let commit = schedule.select(&proposals);
        let step_events: Vec<(usize, Token)> = proposals
            .iter()
            .filter(|p| commit.binary_search(&p.0).is_ok())
            .map(|p| (p.0, p.1))
            .collect();
        let mut next = state.clone();
        for &(i, t) in &step_events {
            next.completion.set(i, t);
        }
        states.push(state);
        events.push(step_events);
        grids.push(grid);
        state = next;
    }
    if state.completion.mask_count() != 0 {
        return Err(contract!("rollout finished with masked positions left"));
    }
    states.push(state);
    Ok(Trajectory { states, events, cache: LogitCache { grids } })
}

fn argmax(row: &[f64]) -> Token {
    let mut best = 0;
    for (t, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = t;
        }
    }
    best as Token
}

/// Draw `z` i.i.d. actions at 1-based timestep `t` from the cached grid and
/// fill them in. No policy evaluation happens here.
pub fn branch(
    traj: &Trajectory,
    t: usize,
    z: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<(Action, MaskedSequence)>> {
    let state = traj
        .state(t)
        .ok_or_else(|| contract!("timestep {t} outside 1..={}", traj.steps()))?;
    let grid = traj
        .cache()
        .get(t)
        .ok_or_else(|| contract!("no cached logits at timestep {t}"))?;
    if grid.positions() != state.mask_set().as_slice() {
        return Err(contract!("cached grid at timestep {t} does not match the state's mask set"));
    }
    (0..z)
        .map(|_| {
            let action = sample_action(grid, rng);
            let completion = fill(state, &action)?;
            Ok((action, completion))
        })
        .collect()
}

/// A selected state: trajectory index (0-based) and timestep (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateRef {
    pub trajectory: usize,
    pub timestep: usize,
}

/// Cartesian product of trajectories and sampled timesteps.
pub fn select_states(trajectories: usize, steps: usize, timesteps: &[usize]) -> Result<Vec<StateRef>> {
    if let Some(&t) = timesteps.iter().find(|&&t| t == 0 || t > steps) {
        return Err(contract!("timestep {t} outside 1..={steps}"));
    }
    Ok((0..trajectories)
        .flat_map(|k| timesteps.iter().map(move |&t| StateRef { trajectory: k, timestep: t }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Architecture, FeatureSpec, PolicyKind};
    use crate::rng::StreamSeed;
    use crate::seq::Vocab;
    use alloc::vec;

    fn setup(len: usize, scale: f64, seed: u64) -> (PolicyParams, MaskedSequence) {
        let vocab = Vocab::new(4).unwrap();
        let arch = Architecture {
            vocab,
            prompt_len: 2,
            completion_len: len,
            features: FeatureSpec::default(),
            kind: PolicyKind::Linear,
        };
        let p = PolicyParams::random(arch, scale, &mut StreamSeed::root(seed).rng());
        (p, MaskedSequence::new(vocab, vec![1, 3]).unwrap())
    }

    fn run(p: &PolicyParams, q: &MaskedSequence, steps: usize, c: usize, seed: u64) -> Trajectory {
        rollout(p, q, steps, UnmaskSchedule::new(c), DecodeMode::Sample, &mut StreamSeed::root(seed).rng(), &PassCounter::new()).unwrap()
    }

    #[test]
    fn one_shot_decoding() {
        let (p, q) = setup(4, 1.0, 1);
        let tr = run(&p, &q, 1, 4, 2);
        assert_eq!(tr.steps(), 1);
        assert_eq!(tr.states().len(), 2);
        assert_eq!(tr.events(1).len(), 4);
        assert_eq!(tr.completion().mask_count(), 0);
    }

    #[test]
    fn mask_counts_follow_schedule() {
        let (p, q) = setup(4, 1.0, 1);
        let tr = run(&p, &q, 2, 2, 3);
        let counts: Vec<usize> = tr.states().iter().map(|s| s.completion.mask_count()).collect();
        assert_eq!(counts, vec![4, 2, 0]);
        let (p, q) = setup(7, 1.0, 1);
        let tr = run(&p, &q, 5, 2, 3);
        let counts: Vec<usize> = tr.states().iter().map(|s| s.completion.mask_count()).collect();
        assert_eq!(counts, vec![7, 5, 3, 1, 0, 0]);
    }

    #[test]
    fn rollout_is_deterministic_and_cache_faithful() {
        let (p, q) = setup(6, 1.3, 4);
        let a = run(&p, &q, 3, 2, 11);
        let b = run(&p, &q, 3, 2, 11);
        assert_eq!(a, b);
        for t in 1..=a.steps() {
            let s = a.state(t).unwrap();
            assert_eq!(&p.forward(s).unwrap(), a.cache().get(t).unwrap());
            // committed tokens persist
            for &(i, tok) in a.events(t) {
                assert!(a.states()[t..].iter().all(|later| later.completion.tokens()[i] == tok));
            }
        }
    }

    #[test]
    fn infeasible_schedule_is_config_error() {
        let (p, q) = setup(5, 1.0, 1);
        let r = rollout(&p, &q, 2, UnmaskSchedule::new(2), DecodeMode::Sample, &mut StreamSeed::root(0).rng(), &PassCounter::new());
        assert!(matches!(r, Err(crate::Error::Config(_))));
        let blocked = UnmaskSchedule { per_step: 2, block: Some(3) };
        assert_eq!(blocked.steps_required(6), 4);
        assert!(blocked.validate(6, 3).is_err());
        assert!(blocked.validate(6, 4).is_ok());
    }

    #[test]
    fn blocks_commit_left_to_right() {
        let (p, q) = setup(6, 1.0, 8);
        let sched = UnmaskSchedule { per_step: 2, block: Some(3) };
        let tr = rollout(&p, &q, 4, sched, DecodeMode::Sample, &mut StreamSeed::root(5).rng(), &PassCounter::new()).unwrap();
        let blocks: Vec<Vec<usize>> = (1..=4).map(|t| tr.events(t).iter().map(|e| e.0 / 3).collect()).collect();
        assert!(blocks[0].iter().all(|&b| b == 0) && blocks[0].len() == 2);
        assert_eq!(blocks[1], vec![0]);
        assert!(blocks[2].iter().all(|&b| b == 1));
        assert_eq!(tr.completion().mask_count(), 0);
    }

    #[test]
    fn selection_ties_prefer_low_positions() {
        let s = UnmaskSchedule::new(2);
        assert_eq!(s.select(&[(0, 1, 0.5), (2, 0, 0.9), (3, 2, 0.5), (5, 1, 0.5)]), vec![0, 2]);
        assert_eq!(s.select(&[(1, 1, 0.3)]), vec![1]);
        assert!(s.select(&[]).is_empty());
    }

    #[test]
    fn greedy_rollout_is_deterministic() {
        let (p, q) = setup(6, 1.0, 2);
        let run_g = |seed| {
            rollout(&p, &q, 3, UnmaskSchedule::new(2), DecodeMode::Greedy, &mut StreamSeed::root(seed).rng(), &PassCounter::new()).unwrap()
        };
        assert_eq!(run_g(1).completion(), run_g(2).completion());
    }

    #[test]
    fn branch_examples() {
        let (p, q) = setup(4, 1.0, 1);
        let tr = run(&p, &q, 3, 2, 6);
        // timestep 3 is past the last commit: nothing masked
        let br = branch(&tr, 3, 2, &mut StreamSeed::root(0).rng()).unwrap();
        assert_eq!(br.len(), 2);
        assert!(br.iter().all(|(a, c)| a.is_empty() && c == &tr.state(3).unwrap().completion));
        assert!(branch(&tr, 0, 2, &mut StreamSeed::root(0).rng()).is_err());
        assert!(branch(&tr, 4, 2, &mut StreamSeed::root(0).rng()).is_err());

        // deterministic cached rows give identical branches
        let (mut p, q) = setup(4, 0.0, 1);
        let f = p.arch().feature_dim();
        p.theta_mut()[3 * f] = 1e6;
        let tr = run(&p, &q, 2, 2, 6);
        let br = branch(&tr, 1, 5, &mut StreamSeed::root(1).rng()).unwrap();
        assert!(br.iter().all(|b| b.1 == br[0].1));
        assert!(br[0].1.tokens().iter().all(|&t| t == 3));
    }

    #[test]
    fn branch_preserves_visible_positions() {
        let (p, q) = setup(6, 1.0, 3);
        let tr = run(&p, &q, 3, 2, 9);
        for t in 1..=3 {
            let s = tr.state(t).unwrap();
            for (_, c) in branch(&tr, t, 4, &mut StreamSeed::root(t as u64).rng()).unwrap() {
                assert_eq!(c.mask_count(), 0);
                for i in s.completion.visible_set() {
                    assert_eq!(c.tokens()[i], s.completion.tokens()[i]);
                }
            }
        }
    }

    #[test]
    fn select_states_examples() {
        let s = select_states(3, 8, &[5]).unwrap();
        assert_eq!(s, vec![
            StateRef { trajectory: 0, timestep: 5 },
            StateRef { trajectory: 1, timestep: 5 },
            StateRef { trajectory: 2, timestep: 5 },
        ]);
        assert_eq!(select_states(2, 8, &[2, 4]).unwrap().len(), 4);
        assert!(select_states(2, 8, &[]).unwrap().is_empty());
        assert!(select_states(2, 8, &[9]).is_err());
        assert!(select_states(2, 8, &[0]).is_err());
    }
}
