//! Subcommand definitions and implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dispo_core::rng::StreamSeed;
use dispo_core::rollout::{rollout, DecodeMode};
use dispo_core::surrogate::Scope;
use dispo_core::tasks::TaskInstance;
use dispo_core::trainer::{count_ops, evaluate, first_violation_report, EvalReport, RunConfig, Trainer, ViolationReport};
use dispo_core::verify::{collect_states, trcov_protocol, Condition, ProtocolConfig, VarianceReport};
use serde::Serialize;

use crate::config::{load_run_config, parse_sampler, parse_task, Overrides};
use crate::manifest::Manifest;
use crate::metrics::MetricsWriter;
use crate::suite::{run_suite, SuiteConfig};
use crate::{checkpoint, LabError, RayonExecutor};

type Result<T> = std::result::Result<T, LabError>;

/// Masked-diffusion policy optimization laboratory.
#[derive(Debug, Parser)]
#[command(name = "dispo", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Output directory [default: <output root>/<command>]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Root for default output directories.
    #[arg(long, global = true, env = "DISPO_OUT", default_value = "runs")]
    pub out_root: PathBuf,

    /// Root seed; replaces the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 uses every core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
}

/// Run configuration and the overrides accepted on the command line.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Run configuration (.json or .toml); defaults are used without one.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Task: sudoku[:blanks], countdown[:numbers] or stringmatch[:vocab:len[:copy|reverse]].
    #[arg(long)]
    pub task: Option<String>,

    /// Step-loss weight (0 gives the terminal-only baseline).
    #[arg(long)]
    pub alpha_step: Option<f64>,

    /// Branches per selected state.
    #[arg(long)]
    pub z: Option<usize>,

    /// Timestep sampler: uniform, late[:k] or early[:k].
    #[arg(long)]
    pub sampler: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    Sample,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes metrics.csv, checkpoint/ and manifest.json.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total number of updates; replaces the configuration's value.
        #[arg(long)]
        updates: Option<usize>,
        /// Save the checkpoint every this many updates (and at the end).
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
    },
    /// Decode held-out instances with a checkpoint and score them.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Instance set (JSON); generated from the run's task otherwise.
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Number of generated instances.
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
        /// Also write every decoded state to trajectories.jsonl.
        #[arg(long)]
        dump_trajectories: bool,
    },
    /// Check the estimator identities and variance laws; exits 1 on FAIL.
    Verify {
        /// Monte Carlo samples per check.
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
    },
    /// Measure per-state gradient trace covariance under several conditions.
    Varmeasure {
        /// Policy to measure; a fresh initialization of the run otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 32)]
        prompts: usize,
        #[arg(long, default_value_t = 8)]
        per_prompt: usize,
        /// Branching repeats per state.
        #[arg(long, default_value_t = 16)]
        repeats: usize,
        /// Extra action-only conditions with these branch counts.
        #[arg(long, value_delimiter = ',', default_values_t = [4])]
        compare_z: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        bootstrap: usize,
    },
    /// Generate an instance set as JSON.
    GenData {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Print predicted operation counts for a configuration.
    CountOps {
        #[command(flatten)]
        run: RunArgs,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Verify { .. } => "verify",
            Command::Varmeasure { .. } => "varmeasure",
            Command::GenData { .. } => "gen-data",
            Command::CountOps { .. } => "count-ops",
        }
    }
}

/// Outcome of a command that completed without error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Checks ran but some failed.
    Failed(usize),
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<Outcome> {
    let dir = cli.out.clone().unwrap_or_else(|| cli.out_root.join(cli.command.name()));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let exec = RayonExecutor::new(cli.workers)?;
    let ctx = Ctx { dir, seed: cli.seed, exec, command: cli.command.name() };
    match cli.command {
        Command::Train { run, resume, updates, checkpoint_every } => train(&ctx, &run, resume.as_deref(), updates, checkpoint_every, out),
        Command::Eval { checkpoint, instances, count, mode, dump_trajectories } => {
            eval(&ctx, &checkpoint, instances.as_deref(), count, mode, dump_trajectories, out)
        }
        Command::Verify { samples } => verify(&ctx, samples, out),
        Command::Varmeasure { checkpoint, run, prompts, per_prompt, repeats, compare_z, bootstrap } => {
            varmeasure(&ctx, checkpoint.as_deref(), &run, prompts, per_prompt, repeats, &compare_z, bootstrap, out)
        }
        Command::GenData { task, count } => gen_data(&ctx, &task, count, out),
        Command::CountOps { run } => count_ops_cmd(&ctx, &run, out),
    }
}

struct Ctx {
    dir: PathBuf,
    seed: Option<u64>,
    exec: RayonExecutor,
    command: &'static str,
}

impl Ctx {
    fn manifest(&self, seed: u64, config: &impl Serialize) -> Result<Manifest> {
        Ok(Manifest::new(self.command, seed, self.exec.workers(), serde_json::to_value(config).map_err(anyhow::Error::from)?))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)? + "\n";
        fs::write(self.dir.join(name), text).with_context(|| format!("writing {name}"))?;
        Ok(PathBuf::from(name))
    }

    fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_path(self.dir.join(name)).with_context(|| format!("writing {name}"))?;
        for r in rows {
            w.serialize(r).map_err(anyhow::Error::from)?;
        }
        w.flush().map_err(anyhow::Error::from)?;
        Ok(PathBuf::from(name))
    }
}

fn resolve(run: &RunArgs, seed: Option<u64>, base: Option<RunConfig>) -> Result<(RunConfig, Option<PathBuf>)> {
    let cfg = match (&run.config, base) {
        (Some(path), _) => load_run_config(path)?,
        (None, Some(cfg)) => cfg,
        (None, None) => RunConfig::default(),
    };
    let overrides = Overrides {
        seed,
        task: run.task.as_deref().map(parse_task).transpose()?,
        alpha_step: run.alpha_step,
        z: run.z,
        sampler: run.sampler.as_deref().map(parse_sampler).transpose()?,
    };
    Ok((overrides.apply(cfg)?, run.config.clone()))
}

fn train(ctx: &Ctx, run: &RunArgs, resume: Option<&Path>, updates: Option<usize>, every: usize, out: &mut dyn Write) -> Result<Outcome> {
    if every == 0 {
        return Err(LabError::Config("--checkpoint-every must be positive".into()));
    }
    let saved = resume.map(checkpoint::load).transpose()?;
    let (mut cfg, config_path) = resolve(run, ctx.seed, saved.as_ref().map(|(c, _)| c.clone()))?;
    if let Some(u) = updates {
        cfg.updates = u;
        cfg.validate()?;
    }
    let metrics_path = ctx.dir.join("metrics.csv");
    let (mut trainer, mut metrics) = match saved {
        Some((_, state)) => {
            let writer = if metrics_path.exists() { MetricsWriter::append(&metrics_path)? } else { MetricsWriter::create(&metrics_path)? };
            (Trainer::resume(cfg.clone(), state)?, writer)
        }
        None => (Trainer::new(cfg.clone())?, MetricsWriter::create(&metrics_path)?),
    };
    let ckpt = ctx.dir.join("checkpoint");
    while !trainer.finished() {
        let row = trainer.step(&ctx.exec)?;
        metrics.write(&row)?;
        if row.update_step % every as u64 == 0 {
            checkpoint::save(&ckpt, &cfg, &trainer.state())?;
        }
        if row.update_step % 10 == 0 || trainer.finished() {
            writeln!(
                out,
                "update {:>5}  reward {:.4}  loss {:+.4e}  |g| {:.3e}",
                row.update_step, row.mean_terminal_reward, row.loss, row.grad_norm
            )
            .map_err(anyhow::Error::from)?;
        }
    }
    checkpoint::save(&ckpt, &cfg, &trainer.state())?;
    let mut manifest = ctx.manifest(cfg.seed, &cfg)?;
    if let Some(p) = &config_path {
        manifest.input(p)?;
    }
    if let Some(r) = resume {
        manifest.input(&r.join("params.bin"))?;
    }
    let outputs: Vec<PathBuf> = ["metrics.csv", "checkpoint/params.bin", "checkpoint/checkpoint.json", "checkpoint/config.json"]
        .iter()
        .map(PathBuf::from)
        .collect();
    manifest.outputs(&ctx.dir, &outputs)?;
    manifest.write(&ctx.dir)?;
    writeln!(out, "wrote {}", ctx.dir.display()).map_err(anyhow::Error::from)?;
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    task: String,
    mode: String,
    report: EvalReport,
    first_violation: Option<ViolationReport>,
}

#[derive(Debug, Serialize)]
struct EvalRow {
    task: String,
    mode: String,
    instances: usize,
    steps: usize,
    per_step: usize,
    accuracy: f64,
    mean_reward: f64,
    mean_first_violation: Option<f64>,
}

#[derive(Debug, Serialize)]
struct StateLine<'a> {
    instance: usize,
    /// 0 is the fully masked start; `t` is the state after step `t`.
    t: usize,
    completion: Vec<i64>,
    masked: Vec<usize>,
    events: &'a [(usize, u32)],
}

fn load_instances(path: &Path) -> Result<Vec<TaskInstance>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))
}

fn eval(ctx: &Ctx, ckpt: &Path, instances: Option<&Path>, count: usize, mode: Mode, dump: bool, out: &mut dyn Write) -> Result<Outcome> {
    let (cfg, params) = checkpoint::load_params(ckpt)?;
    let seed = ctx.seed.unwrap_or(cfg.seed);
    let root = StreamSeed::root(seed);
    let set = match instances {
        Some(p) => load_instances(p)?,
        None => {
            let mut rng = root.tag("eval-instances").rng();
            (0..count).map(|_| cfg.task.generate(&mut rng)).collect::<dispo_core::Result<_>>()?
        }
    };
    if let Some(bad) = set.iter().position(|i| !i.matches(&cfg.task)) {
        return Err(LabError::Config(format!("instance {bad} does not fit the checkpoint's task {:?}", cfg.task)));
    }
    let decode = match mode {
        Mode::Greedy => DecodeMode::Greedy,
        Mode::Sample => DecodeMode::Sample,
    };
    let report = evaluate(&params, &set, cfg.steps, cfg.schedule, decode, root.tag("decode"))?;
    let sudoku: Vec<_> = set
        .iter()
        .filter_map(|i| match i {
            TaskInstance::Sudoku(s) => Some(s.clone()),
            _ => None,
        })
        .collect();
    let violations = (!sudoku.is_empty()).then(|| first_violation_report(&params, &sudoku, cfg.steps, cfg.schedule)).transpose()?;
    let mode_name = format!("{mode:?}").to_lowercase();
    let row = EvalRow {
        task: cfg.task.name().into(),
        mode: mode_name.clone(),
        instances: report.instances,
        steps: report.steps,
        per_step: report.per_step,
        accuracy: report.accuracy,
        mean_reward: report.mean_reward,
        mean_first_violation: violations.as_ref().map(|v| v.mean_time),
    };
    writeln!(out, "{:<12} {:>9} {:>6} {:>9} {:>11}", "task", "instances", "steps", "accuracy", "mean reward").map_err(anyhow::Error::from)?;
    writeln!(out, "{:<12} {:>9} {:>6} {:>9.4} {:>11.4}", row.task, row.instances, row.steps, row.accuracy, row.mean_reward)
        .map_err(anyhow::Error::from)?;
    let mut files = vec![
        ctx.write_json("eval.json", &EvalOutput { task: cfg.task.name().into(), mode: mode_name, report, first_violation: violations })?,
        ctx.write_csv("eval.csv", &[row])?,
    ];
    if dump {
        let mut lines = String::new();
        let passes = dispo_core::meter::PassCounter::new();
        for (i, inst) in set.iter().enumerate() {
            let mut rng = root.tag("decode").index(i as u64).rng();
            let tr = rollout(&params, &inst.prompt(), cfg.steps, cfg.schedule, decode, &mut rng, &passes)?;
            for (t, s) in tr.states().iter().enumerate() {
                let events: &[(usize, u32)] = if t == 0 { &[] } else { tr.events(t) };
                let line = StateLine { instance: i, t, completion: s.completion.to_signed(), masked: s.mask_set(), events };
                lines.push_str(&serde_json::to_string(&line).map_err(anyhow::Error::from)?);
                lines.push('\n');
            }
        }
        fs::write(ctx.dir.join("trajectories.jsonl"), lines).context("writing trajectories.jsonl")?;
        files.push(PathBuf::from("trajectories.jsonl"));
    }
    let mut manifest = ctx.manifest(seed, &cfg)?;
    manifest.input(&ckpt.join("params.bin"))?;
    if let Some(p) = instances {
        manifest.input(p)?;
    }
    manifest.outputs(&ctx.dir, &files)?;
    manifest.write(&ctx.dir)?;
    Ok(Outcome::Ok)
}

fn verify(ctx: &Ctx, samples: u64, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = SuiteConfig { samples, seed: ctx.seed.unwrap_or(0), ..SuiteConfig::default() };
    let mut lines = Vec::new();
    let report = run_suite(&cfg, &ctx.exec, |row| {
        let detail = match (row.max_abs_z, row.rel_l2, row.value) {
            (Some(z), Some(r), _) => format!("max|z|={z:.2} relL2={r:.4}"),
            (_, _, Some(v)) => format!("value={v:.4}"),
            _ => String::new(),
        };
        lines.push(format!("[{}] {}: {detail} (expected {})", if row.pass { "PASS" } else { "FAIL" }, row.check, row.expected));
    })?;
    for l in &lines {
        writeln!(out, "{l}").map_err(anyhow::Error::from)?;
    }
    let files = vec![ctx.write_json("verify.json", &report)?, ctx.write_csv("verify.csv", &report.rows)?];
    let mut manifest = ctx.manifest(cfg.seed, &cfg)?;
    manifest.outputs(&ctx.dir, &files)?;
    manifest.write(&ctx.dir)?;
    let failures = report.failures();
    writeln!(out, "{} of {} checks passed", report.rows.len() - failures, report.rows.len()).map_err(anyhow::Error::from)?;
    Ok(if failures == 0 { Outcome::Ok } else { Outcome::Failed(failures) })
}

#[derive(Debug, Serialize)]
struct VarianceRow {
    condition: String,
    retained_states: usize,
    mean_trcov: f64,
    diff_vs_reference: Option<f64>,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn varmeasure(
    ctx: &Ctx,
    ckpt: Option<&Path>,
    run: &RunArgs,
    prompts: usize,
    per_prompt: usize,
    repeats: usize,
    compare_z: &[usize],
    bootstrap: usize,
    out: &mut dyn Write,
) -> Result<Outcome> {
    let saved = ckpt.map(checkpoint::load_params).transpose()?;
    let (cfg, _) = resolve(run, ctx.seed, saved.as_ref().map(|(c, _)| c.clone()))?;
    let params = match saved {
        Some((_, p)) => p,
        None => Trainer::new(cfg.clone())?.params().clone(),
    };
    if params.arch() != &cfg.architecture() {
        return Err(LabError::Config("overrides change the policy shape of the checkpoint".into()));
    }
    if repeats < 2 {
        return Err(LabError::Config("--repeats must be at least 2".into()));
    }
    let root = StreamSeed::root(cfg.seed).tag("varmeasure");
    let mut rng = root.tag("prompts").rng();
    let instances: Vec<TaskInstance> = (0..prompts).map(|_| cfg.task.generate(&mut rng)).collect::<dispo_core::Result<_>>()?;
    let prompt_seqs: Vec<_> = instances.iter().map(TaskInstance::prompt).collect();
    let states = collect_states(&params, &prompt_seqs, cfg.steps, cfg.schedule, per_prompt, root.tag("states"))?;
    let mut conditions = vec![Condition { z: cfg.z, scope: Scope::ActionOnly }, Condition { z: cfg.z, scope: Scope::AllTokens }];
    conditions.extend(compare_z.iter().filter(|&&z| z != cfg.z).map(|&z| Condition { z, scope: Scope::ActionOnly }));
    let pcfg = ProtocolConfig { repeats, surrogate: cfg.surrogate, bootstrap_resamples: bootstrap, level: 0.95 };
    let reward = |i: usize, o: &dispo_core::MaskedSequence| instances[i].reward(o);
    let report: VarianceReport = trcov_protocol(&params, &states, &reward, &conditions, &pcfg, &ctx.exec, root.tag("protocol"))?;
    let rows: Vec<VarianceRow> = report
        .conditions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d = i.checked_sub(1).and_then(|j| report.differences.get(j));
            VarianceRow {
                condition: c.name.clone(),
                retained_states: report.retained_states,
                mean_trcov: c.mean_trcov,
                diff_vs_reference: d.map(|d| d.mean),
                ci_lo: d.map(|d| d.ci_lo),
                ci_hi: d.map(|d| d.ci_hi),
            }
        })
        .collect();
    writeln!(
        out,
        "{} candidate states: {} without masks, {} without a positive advantage, {} retained",
        report.candidate_states, report.dropped_no_mask, report.dropped_no_positive_advantage, report.retained_states
    )
    .map_err(anyhow::Error::from)?;
    for r in &rows {
        match (r.diff_vs_reference, r.ci_lo, r.ci_hi) {
            (Some(d), Some(lo), Some(hi)) => writeln!(out, "{:<20} trCov {:.4e}  diff {:+.4e} [{:+.4e}, {:+.4e}]", r.condition, r.mean_trcov, d, lo, hi),
            _ => writeln!(out, "{:<20} trCov {:.4e}  (reference)", r.condition, r.mean_trcov),
        }
        .map_err(anyhow::Error::from)?;
    }
    let files = vec![ctx.write_json("variance.json", &report)?, ctx.write_csv("variance.csv", &rows)?];
    let mut manifest = ctx.manifest(cfg.seed, &cfg)?;
    if let Some(c) = ckpt {
        manifest.input(&c.join("params.bin"))?;
    }
    manifest.outputs(&ctx.dir, &files)?;
    manifest.write(&ctx.dir)?;
    Ok(Outcome::Ok)
}

fn gen_data(ctx: &Ctx, task: &str, count: usize, out: &mut dyn Write) -> Result<Outcome> {
    let spec = parse_task(task)?;
    let seed = ctx.seed.unwrap_or(0);
    let root = StreamSeed::root(seed).tag("gen-data");
    let set: Vec<TaskInstance> = (0..count as u64).map(|i| spec.generate(&mut root.index(i).rng())).collect::<dispo_core::Result<_>>()?;
    let files = vec![ctx.write_json("instances.json", &set)?];
    let mut manifest = ctx.manifest(seed, &spec)?;
    manifest.outputs(&ctx.dir, &files)?;
    manifest.write(&ctx.dir)?;
    writeln!(out, "wrote {count} {} instances to {}", spec.name(), ctx.dir.join("instances.json").display()).map_err(anyhow::Error::from)?;
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize)]
struct OpRow {
    counter: &'static str,
    formula: String,
    per_prompt: u64,
    per_run: u64,
}

fn count_ops_cmd(ctx: &Ctx, run: &RunArgs, out: &mut dyn Write) -> Result<Outcome> {
    let (cfg, config_path) = resolve(run, ctx.seed, None)?;
    let per = count_ops(&cfg)?;
    let prompts = (cfg.batch * cfg.updates) as u64;
    let total = per.times_prompts(prompts);
    let s = cfg.selected_states();
    let reference = if cfg.loss.kl_beta > 0.0 {
        if cfg.loss.kl_on_step { "N_m*K + N_m*|S|" } else { "N_m*K" }
    } else {
        "0"
    };
    let rows = vec![
        OpRow { counter: "rollout_forward_passes", formula: "K*T".into(), per_prompt: per.rollout_forward_passes, per_run: total.rollout_forward_passes },
        OpRow { counter: "optimizer_steps", formula: "U".into(), per_prompt: per.optimizer_steps, per_run: total.optimizer_steps },
        OpRow { counter: "reward_evals", formula: "K+|S|Z".into(), per_prompt: per.reward_evals, per_run: total.reward_evals },
        OpRow {
            counter: "surrogate_terminal_calls",
            formula: "2*N_m*K".into(),
            per_prompt: per.surrogate_terminal_calls,
            per_run: total.surrogate_terminal_calls,
        },
        OpRow { counter: "surrogate_step_calls", formula: "2*N_m*|S|".into(), per_prompt: per.surrogate_step_calls, per_run: total.surrogate_step_calls },
        OpRow { counter: "reference_calls", formula: reference.into(), per_prompt: per.reference_calls, per_run: total.reference_calls },
    ];
    writeln!(
        out,
        "K={} T={} U={} B={} Z={} N_m={} |S|={s} (optimizer steps are per run)",
        cfg.k, cfg.steps, cfg.updates, cfg.batch, cfg.z, cfg.surrogate.n_mc
    )
    .map_err(anyhow::Error::from)?;
    writeln!(out, "{:<26} {:<16} {:>10} {:>12}", "counter", "formula", "per prompt", "per run").map_err(anyhow::Error::from)?;
    for r in &rows {
        writeln!(out, "{:<26} {:<16} {:>10} {:>12}", r.counter, r.formula, r.per_prompt, r.per_run).map_err(anyhow::Error::from)?;
    }
    let files = vec![ctx.write_json("count_ops.json", &rows)?, ctx.write_csv("count_ops.csv", &rows)?];
    let mut manifest = ctx.manifest(cfg.seed, &cfg)?;
    if let Some(p) = &config_path {
        manifest.input(p)?;
    }
    manifest.outputs(&ctx.dir, &files)?;
    manifest.write(&ctx.dir)?;
    Ok(Outcome::Ok)
}
