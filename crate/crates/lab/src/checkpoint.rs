//! Checkpoints: flat little-endian `f64` vectors plus a JSON sidecar.
//!
//! A checkpoint directory holds `params.bin`, `reference.bin`, `adam_m.bin`,
//! `adam_v.bin` (the last two empty for SGD), `checkpoint.json` and the run
//! configuration as `config.json`.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dispo_core::policy::Architecture;
use dispo_core::trainer::{OpCounters, OptimizerState, RunConfig, TrainState};
use dispo_core::PolicyParams;
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: u32,
    pub architecture: Architecture,
    /// Parameter dimension `D`.
    pub dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub optimizer_step: u64,
    pub counters: OpCounters,
    /// Index of the next update to run.
    pub next_update: u64,
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(bytes.len() % 8 == 0, "{}: length {} is not a multiple of 8", path.display(), bytes.len());
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

pub fn save(dir: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_f64s(&dir.join("params.bin"), state.params.theta())?;
    write_f64s(&dir.join("reference.bin"), state.reference.theta())?;
    write_f64s(&dir.join("adam_m.bin"), &state.optimizer.m)?;
    write_f64s(&dir.join("adam_v.bin"), &state.optimizer.v)?;
    let arch = *state.params.arch();
    let sidecar = Sidecar {
        format: FORMAT_VERSION,
        architecture: arch,
        dim: state.params.dim(),
        vocab_size: arch.vocab.size(),
        seed: cfg.seed,
        optimizer_step: state.optimizer.step,
        counters: state.counters,
        next_update: state.next_update,
    };
    fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(RunConfig, TrainState)> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json")).with_context(|| format!("reading checkpoint in {}", dir.display()))?)
        .context("parsing checkpoint.json")?;
    if sidecar.format != FORMAT_VERSION {
        bail!("unsupported checkpoint format {}", sidecar.format);
    }
    let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?).context("parsing config.json")?;
    let params = read_params(&dir.join("params.bin"), &sidecar)?;
    let reference = read_params(&dir.join("reference.bin"), &sidecar)?;
    let m = read_f64s(&dir.join("adam_m.bin"))?;
    let v = read_f64s(&dir.join("adam_v.bin"))?;
    ensure!(m.len() == v.len() && (m.is_empty() || m.len() == sidecar.dim), "optimizer moments have the wrong length");
    let state = TrainState {
        params,
        reference,
        optimizer: OptimizerState { step: sidecar.optimizer_step, m, v },
        counters: sidecar.counters,
        next_update: sidecar.next_update,
    };
    Ok((cfg, state))
}

/// Parameters only, for evaluation.
pub fn load_params(dir: &Path) -> Result<(RunConfig, PolicyParams)> {
    let (cfg, state) = load(dir)?;
    Ok((cfg, state.params))
}

fn read_params(path: &Path, sidecar: &Sidecar) -> Result<PolicyParams> {
    let theta = read_f64s(path)?;
    ensure!(theta.len() == sidecar.dim, "{}: {} values, expected {}", path.display(), theta.len(), sidecar.dim);
    Ok(PolicyParams::new(sidecar.architecture, theta)?)
}
