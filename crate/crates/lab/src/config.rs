//! Run-configuration files (JSON or TOML) and command-line overrides.

use std::fs;
use std::path::Path;

use dispo_core::objective::TimestepLaw;
use dispo_core::tasks::{MatchRule, TaskSpec};
use dispo_core::trainer::RunConfig;

use crate::LabError;

/// Parse a run configuration. The format follows the extension: `.toml`,
/// otherwise JSON. Parse errors carry the file name, line and column.
pub fn load_run_config(path: &Path) -> Result<RunConfig, LabError> {
    let text = fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
    let cfg = parse_run_config(&text, is_toml(path)).map_err(|msg| LabError::Config(format!("{}:{msg}", path.display())))?;
    cfg.validate().map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}

/// Parse configuration text; errors are `line:column: message`.
pub fn parse_run_config(text: &str, toml_format: bool) -> Result<RunConfig, String> {
    if toml_format {
        toml::from_str(text).map_err(|e| {
            let (line, col) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
            format!("{line}:{col}: {}", e.message())
        })
    } else {
        serde_json::from_str(text).map_err(|e| format!("{}:{}: {e}", e.line(), e.column()))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// `sudoku[:blanks]`, `countdown[:numbers]`, `stringmatch[:vocab:len[:reverse]]`.
pub fn parse_task(s: &str) -> Result<TaskSpec, LabError> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |i: usize, default: usize| -> Result<usize, LabError> {
        parts.get(i).map_or(Ok(default), |p| p.parse().map_err(|_| LabError::Config(format!("bad number {p:?} in task {s:?}"))))
    };
    let spec = match parts[0] {
        "sudoku" => TaskSpec::Sudoku { blanks: num(1, 6)? },
        "countdown" => TaskSpec::Countdown { numbers: num(1, 3)? },
        "stringmatch" => {
            let rule = match parts.get(3).copied() {
                None | Some("copy") => MatchRule::Copy,
                Some("reverse") => MatchRule::Reverse,
                Some(r) => return Err(LabError::Config(format!("unknown string-match rule {r:?}"))),
            };
            TaskSpec::StringMatch { vocab: num(1, 4)? as u32, len: num(2, 6)?, rule }
        }
        other => return Err(LabError::Config(format!("unknown task {other:?} (sudoku, countdown, stringmatch)"))),
    };
    spec.validate().map_err(|e| LabError::Config(e.to_string()))?;
    Ok(spec)
}

/// `uniform`, `late[:k]` or `early[:k]`.
pub fn parse_sampler(s: &str) -> Result<TimestepLaw, LabError> {
    let (name, k) = s.split_once(':').unwrap_or((s, "4"));
    let k: u32 = k.parse().map_err(|_| LabError::Config(format!("bad sampler degree in {s:?}")))?;
    match name {
        "uniform" => Ok(TimestepLaw::Uniform),
        "late" => Ok(TimestepLaw::PolyLate { k }),
        "early" => Ok(TimestepLaw::PolyEarly { k }),
        _ => Err(LabError::Config(format!("unknown sampler {name:?} (uniform, late[:k], early[:k])"))),
    }
}

/// Values given on the command line; each replaces the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<TaskSpec>,
    pub alpha_step: Option<f64>,
    pub z: Option<usize>,
    pub sampler: Option<TimestepLaw>,
}

impl Overrides {
    /// Apply the overrides. A new task also resets `steps` to its
    /// completion length.
    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig, LabError> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(task) = self.task {
            cfg.task = task;
            cfg.steps = cfg.schedule.steps_required(task.completion_len());
        }
        if let Some(a) = self.alpha_step {
            cfg.loss.alpha_step = a;
        }
        if let Some(z) = self.z {
            cfg.z = z;
        }
        if let Some(s) = self.sampler {
            cfg.sampler = s;
        }
        cfg.validate().map_err(|e| LabError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
