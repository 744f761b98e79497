//! Run configuration: one TOML file with `[gen]`, `[train]` (and
//! `[train.model]`) and `[paths]` tables. Unknown keys are rejected.
//!
//! ```toml
//! [gen]
//! seed = 0
//!
//! [train]
//! epochs = 80
//! seed = 0
//!
//! [train.model]
//! layers = 3
//! moe = true
//! mar = true
//!
//! [paths]
//! data = "data/series.csv"
//! out_dir = "runs/default"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::GenConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Input (or `gen-data` output) series CSV.
    pub data: PathBuf,
    /// Directory for checkpoints, traces, scores and reports.
    pub out_dir: PathBuf,
    /// Checkpoint file; defaults to `<out_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data: PathBuf::from("data/series.csv"), out_dir: PathBuf::from("runs/default"), checkpoint: None }
    }
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn scores(&self) -> PathBuf {
        self.out_dir.join("scores.csv")
    }

    pub fn trace(&self) -> PathBuf {
        self.out_dir.join("loss_trace.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    /// Seeds for the ablation grid.
    pub ablation_seeds: Vec<u64>,
    /// Expert counts for the sweep.
    pub expert_counts: Vec<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Parses TOML, applies `key.path=value` overrides, validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        if cfg.ablation_seeds.is_empty() {
            cfg.ablation_seeds = vec![0, 1, 2];
        }
        if cfg.expert_counts.is_empty() {
            cfg.expert_counts = vec![1, 2, 3, 4];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `train.model.layers=2` style assignment; the value is parsed as a TOML
/// literal and falls back to a bare string.
fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
