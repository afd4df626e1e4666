//! Resolved run configuration.
//!
//! Flags are collected into a [`RunConfig`], serialized to JSON, and the
//! optional `--config` file is deep-merged on top, so a config file overrides
//! flags key by key. The merged value is what the command runs with and what
//! lands in `resolved_config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use wildattr::seed;
use wildattr::synth_bench::{ExperimentConfig, ScenarioSpec, SweepSpec};
use wildattr::{ConstraintConfig, PseudoLabelConfig, SplitSpec, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    Constrained,
    Pseudo,
}

/// Bad user configuration; maps to the validation exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wild: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<FinetuneMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_sources: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<ConstraintConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<PseudoLabelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64, output_dir: PathBuf) -> Self {
        RunConfig {
            command: command.to_string(),
            seed,
            output_dir,
            features: None,
            manifest: None,
            csv: None,
            metadata: None,
            labeled: None,
            wild: None,
            test: None,
            model: None,
            run_dir: None,
            mode: None,
            target_source: None,
            hard_sources: None,
            split: None,
            train: None,
            constraint: None,
            pseudo: None,
            scenario: None,
            sweep: None,
        }
    }

    /// Split and train settings seeded from the master seed.
    pub fn with_training(mut self) -> Self {
        self.split = Some(SplitSpec { seed: seed::derive(self.seed, "split"), ..SplitSpec::default() });
        self.train = Some(TrainConfig { seed: self.seed, ..TrainConfig::default() });
        self
    }

    pub fn require<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T> {
        value.as_ref().ok_or_else(|| config_error(format!("missing required setting `{name}`")))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let d = ExperimentConfig::default();
        ExperimentConfig {
            train: self.train.unwrap_or(d.train),
            validation_fraction: self.split.map_or(d.validation_fraction, |s| s.validation_fraction),
            constraint: self.constraint.unwrap_or(d.constraint),
            pseudo: self.pseudo.unwrap_or(d.pseudo),
            hard_sources: self.hard_sources.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes") + "\n"
    }

    pub fn write_resolved(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating output directory {}", self.output_dir.display()))?;
        let path = self.output_dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Reads a `--config` file. Only the `seed` key is needed before the flag
/// config is built, so the file is returned as raw JSON.
pub fn read_override(path: Option<&Path>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(config_error(format!("config {} must be a JSON object", path.display())));
    }
    Ok(Some(value))
}

/// The effective master seed: the config file's `seed` if present, else the flag.
pub fn master_seed(flag: u64, over: Option<&Value>) -> Result<u64> {
    match over.and_then(|v| v.get("seed")) {
        None => Ok(flag),
        Some(v) => v.as_u64().ok_or_else(|| config_error(format!("config seed {v} is not an unsigned integer"))),
    }
}

/// Recursively overlays `over` onto `base`: objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn resolve(flags: RunConfig, over: Option<Value>) -> Result<RunConfig> {
    let Some(over) = over else { return Ok(flags) };
    let mut value = serde_json::to_value(&flags).expect("run config serializes");
    merge(&mut value, over);
    let resolved: RunConfig =
        serde_json::from_value(value).map_err(|e| config_error(format!("invalid config: {e}")))?;
    if resolved.command != flags.command {
        return Err(config_error(format!("config is for command {:?}, not {:?}", resolved.command, flags.command)));
    }
    Ok(resolved)
}
