//! Run configuration: one TOML file with `[synth]`, `[model]`, `[train]` and
//! `[data]` tables, plus dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use uma_core::model::ModelConfig;
use uma_core::synthdata::SynthConfig;
use uma_core::traineval::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Utterances generated by `gen`, split 80/10/10.
    pub utterances: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { utterances: 2500 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Defaults, then the file, then each `--set`, then `--seed`.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            apply_override(&mut table, s)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage(format!("config: {}", e.message())))?;
        if let Some(seed) = seed {
            cfg.synth.seed = seed;
            cfg.model.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.utterances < 3 {
            return Err(CliError::usage("data.utterances must be at least 3"));
        }
        Ok(())
    }

    /// Model config with the data-dependent sizes taken from `synth`.
    pub fn model_for(&self, synth: &SynthConfig) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        if m.input_dim != synth.feature_dim || m.vocab_size != synth.vocab_size {
            return Err(CliError::usage(format!(
                "model expects input_dim {} and vocab_size {}, dataset has feature_dim {} and vocab_size {}",
                m.input_dim, m.vocab_size, synth.feature_dim, synth.vocab_size
            )));
        }
        Ok(m.clone())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
