//! Append-only metrics CSV.

use std::fs::{File, OpenOptions};
use std::path::Path;

use anyhow::{Context, Result};
use dispo_core::trainer::MetricsRow;
use serde::Serialize;

/// One CSV line: the row's scalars followed by the cumulative counters.
#[derive(Debug, Serialize)]
struct CsvRow {
    update_step: u64,
    mean_terminal_reward: f64,
    mean_step_reward: Option<f64>,
    loss: f64,
    loss_term: f64,
    loss_step: f64,
    kl: f64,
    grad_norm: f64,
    rollout_forward_passes: u64,
    optimizer_steps: u64,
    reward_evals: u64,
    surrogate_terminal_calls: u64,
    surrogate_step_calls: u64,
    reference_calls: u64,
}

impl From<&MetricsRow> for CsvRow {
    fn from(r: &MetricsRow) -> Self {
        let c = &r.counters;
        Self {
            update_step: r.update_step,
            mean_terminal_reward: r.mean_terminal_reward,
            mean_step_reward: r.mean_step_reward,
            loss: r.loss,
            loss_term: r.loss_term,
            loss_step: r.loss_step,
            kl: r.kl,
            grad_norm: r.grad_norm,
            rollout_forward_passes: c.rollout_forward_passes,
            optimizer_steps: c.optimizer_steps,
            reward_evals: c.reward_evals,
            surrogate_terminal_calls: c.surrogate_terminal_calls,
            surrogate_step_calls: c.surrogate_step_calls,
            reference_calls: c.reference_calls,
        }
    }
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Start a fresh file with a header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { inner: csv::WriterBuilder::new().has_headers(true).from_writer(file) })
    }

    /// Continue an existing file; the header is already there.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(Self { inner: csv::WriterBuilder::new().has_headers(false).from_writer(file) })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(CsvRow::from(row))?;
        self.inner.flush()?;
        Ok(())
    }
}
