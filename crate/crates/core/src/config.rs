//! Strict-schema run configuration.
//!
//! Configs are TOML documents validated before any compute: unknown keys are
//! rejected anywhere in the document (including inside tagged enum variants),
//! and matrices are nested arrays of rows (row-major). The config hash is
//! computed over the canonical form, so it is stable under key reordering
//! but changes when any effective value (including a seed override) changes.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bench::{self, LearnerSpec, TaskSpec};
use crate::error::{Error, Result};

/// One benchmark run: a task, a learner, and execution knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub learner: LearnerSpec,
    /// Seeds to fan out over; each seed is an independent run.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Online steps per run; defaults to the task's stream length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Output root override; the CLI falls back to its env var / default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Enable dense-oracle audits (slower; adds contraction diagnostics).
    #[serde(default)]
    pub audit: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig {
    /// Parse and validate a config document, rejecting unknown keys.
    pub fn from_str(text: &str) -> Result<Self> {
        let raw: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        let cfg: RunConfig = raw
            .clone()
            .try_into()
            .map_err(|e| Error::Config(format!("schema error: {e}")))?;
        // Echo comparison: every key present in the input must survive a
        // round trip through the typed struct. serde's deny_unknown_fields
        // does not compose with internally tagged enums, so strictness is
        // enforced structurally instead.
        let echo = toml::Value::try_from(&cfg)
            .map_err(|e| Error::Config(format!("config reserialization failed: {e}")))?;
        reject_unknown_keys(&raw, &echo, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must not be empty".into()));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Online steps per run, defaulting to the task's stream length.
    pub fn effective_steps(&self) -> usize {
        self.steps.unwrap_or(match self.task {
            TaskSpec::LinearRegression { t, .. } => t,
            TaskSpec::LogisticRegression { t, .. } => t,
            TaskSpec::DriftingRegression { t, .. } => t,
            TaskSpec::PermutedFeatures { tasks, t_per_task, .. } => tasks * t_per_task,
            TaskSpec::TeacherStream { t, .. } => t,
        })
    }

    /// Replace the seeds list (used for `--seed` overrides; the hash follows).
    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }

    /// Hash of the effective config; stable under key reordering of the
    /// source document.
    pub fn hash_hex(&self) -> Result<String> {
        let value = toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        Ok(bench::config_hash_hex(&value))
    }
}

fn reject_unknown_keys(input: &toml::Value, echo: &toml::Value, path: &str) -> Result<()> {
    match (input, echo) {
        (toml::Value::Table(input_table), toml::Value::Table(echo_table)) => {
            for (key, value) in input_table {
                let child_path = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match echo_table.get(key) {
                    Some(echo_value) => reject_unknown_keys(value, echo_value, &child_path)?,
                    None => {
                        return Err(Error::Config(format!("unknown key `{child_path}`")));
                    }
                }
            }
            Ok(())
        }
        (toml::Value::Array(input_items), toml::Value::Array(echo_items)) => {
            for (i, (a, b)) in input_items.iter().zip(echo_items).enumerate() {
                reject_unknown_keys(a, b, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Build a matrix from nested row arrays (row-major); rows must be equal
/// length and non-empty.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Config("matrix must have at least one row and column".into()));
    }
    let ncols = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Config(format!(
                "ragged matrix: row 0 has {ncols} entries, row {i} has {}",
                row.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
