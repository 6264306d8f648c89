//! The standard verification suite: gradient identities on small enumerable
//! problems plus the two variance simulations.

use dispo_core::objective::TimestepLaw;
use dispo_core::policy::{Architecture, FeatureSpec};
use dispo_core::rng::StreamSeed;
use dispo_core::rollout::UnmaskSchedule;
use dispo_core::surrogate::sequence_state;
use dispo_core::tasks::stringmatch_reward;
use dispo_core::trainer::Executor;
use dispo_core::verify::{
    prop1_check, prop2_check, theorem1_check, theorem2_check, GradientCheck, OracleSetup, Prop1Report, Prop2Report,
    SyntheticReward, Theorem2Report, Tolerance,
};
use dispo_core::{MaskedSequence, PolicyParams, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub samples: u64,
    pub seed: u64,
    /// Perturbation scale of the behavior policy in off-policy checks.
    pub off_policy_scale: f64,
    pub tolerance: Tolerance,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { samples: 100_000, seed: 0, off_policy_scale: 0.08, tolerance: Tolerance::default() }
    }
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub pass: bool,
    pub max_abs_z: Option<f64>,
    pub rel_l2: Option<f64>,
    pub value: Option<f64>,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub step_identity: Vec<GradientCheck>,
    pub combined_identity: Vec<Theorem2Report>,
    pub partial_update: Prop1Report,
    pub drafts: Prop2Report,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass).count()
    }
}

/// Vocabulary 3, two prompt tokens, three completion positions; the reward
/// is the match fraction against `[0, 1, 2]`.
pub fn oracle_setup(steps: usize, per_step: usize, perturb: f64, seed: u64) -> OracleSetup {
    let arch = Architecture::linear(
        Vocab::new(3).expect("vocab"),
        2,
        3,
        FeatureSpec { window: 1, prompt_histogram: true, prompt_cross: true },
    );
    let root = StreamSeed::root(seed);
    let params = PolicyParams::random(arch, 0.7, &mut root.tag("params").rng());
    let mut old = params.clone();
    if perturb > 0.0 {
        let noise = PolicyParams::random(arch, perturb, &mut root.tag("perturb").rng());
        old.theta_mut().iter_mut().zip(noise.theta()).for_each(|(x, n)| *x += n);
    }
    OracleSetup {
        params,
        old,
        prompt: MaskedSequence::new(arch.vocab, vec![1, 2]).expect("prompt"),
        steps,
        schedule: UnmaskSchedule::new(per_step),
    }
}

pub fn oracle_reward(o: &MaskedSequence) -> f64 {
    stringmatch_reward(&[0, 1, 2], o)
}

fn gradient_row(c: &GradientCheck) -> CheckRow {
    CheckRow {
        check: c.name.clone(),
        pass: c.pass,
        max_abs_z: Some(c.max_abs_z),
        rel_l2: Some(c.rel_l2),
        value: None,
        expected: format!("max|z| <= {}, relL2 <= {}", 4.0, 0.03),
    }
}

pub fn run_suite<E: Executor>(cfg: &SuiteConfig, exec: &E, mut progress: impl FnMut(&CheckRow)) -> anyhow::Result<SuiteReport> {
    let root = StreamSeed::root(cfg.seed);
    let mut rows = Vec::new();
    let mut push = |row: CheckRow, rows: &mut Vec<CheckRow>| {
        progress(&row);
        rows.push(row);
    };

    let mut step_identity = Vec::new();
    for (label, perturb) in [("on", 0.0), ("off", cfg.off_policy_scale)] {
        let setup = oracle_setup(2, 2, perturb, 11);
        for z in [2, 4] {
            for t in [1, 2] {
                let seed = root.tag("step").tag(label).index(z as u64).index(t as u64);
                let c = theorem1_check(&setup, t, z, cfg.samples, &oracle_reward, cfg.tolerance, exec, seed)?;
                push(gradient_row(&c), &mut rows);
                step_identity.push(c);
            }
        }
    }

    let setup = oracle_setup(3, 1, 0.0, 12);
    let mut combined_identity = Vec::new();
    for (i, (a_step, a_term)) in [(1.0, 0.0), (0.0, 1.0), (0.1, 1.0)].into_iter().enumerate() {
        let seed = root.tag("combined").index(i as u64);
        let r = theorem2_check(&setup, a_step, a_term, 2, 4, TimestepLaw::PolyLate { k: 4 }, cfg.samples, &oracle_reward, cfg.tolerance, exec, seed)?;
        push(gradient_row(&r.check), &mut rows);
        combined_identity.push(r);
    }

    let partial_update = prop1_check(16, 4, 1.0, SyntheticReward::Bernoulli { p: 0.5 }, cfg.samples, root.tag("partial"))?;
    let ratio = partial_update.ratio.unwrap_or(f64::NAN);
    push(
        CheckRow {
            check: "partial-update variance ratio L=16 m=4".into(),
            pass: (ratio - 0.25).abs() <= 0.02,
            max_abs_z: None,
            rel_l2: None,
            value: Some(ratio),
            expected: "0.25 +/- 0.02".into(),
        },
        &mut rows,
    );

    let s = oracle_setup(2, 2, 0.0, 13);
    let state = sequence_state(&s.prompt, 3)?;
    let drafts = prop2_check(&s.params, &state, &[1, 2, 4, 8], cfg.samples, &oracle_reward, exec, root.tag("drafts"))?;
    let slope = drafts.slope.unwrap_or(f64::NAN);
    push(
        CheckRow {
            check: "trCov vs Z log-log slope".into(),
            pass: (-1.2..=-0.8).contains(&slope),
            max_abs_z: None,
            rel_l2: None,
            value: Some(slope),
            expected: "[-1.2, -0.8]".into(),
        },
        &mut rows,
    );

    Ok(SuiteReport { config: *cfg, step_identity, combined_identity, partial_update, drafts, rows })
}
