//! Run configuration: TOML key/value text with optional dataset presets.
//!
//! Resolution order: built-in defaults, then the selected preset, then keys
//! written in the file, then command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dataset::{Format, Ratios};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::rng::derive_seed;
use crate::synthetic::SyntheticConfig;

/// Shipped presets, one section per benchmark dataset.
pub const PRESETS_TOML: &str = include_str!("../presets/presets.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub lr: f64,
    pub lambda: f64,
    pub mu: f64,
    pub dim: usize,
    pub k_cap: usize,
    pub gamma: f64,
}

pub fn presets() -> BTreeMap<String, Preset> {
    toml::from_str(PRESETS_TOML).expect("shipped presets parse")
}

pub fn preset(name: &str) -> Result<Preset> {
    presets()
        .remove(name)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Interaction file; mutually exclusive with `synthetic`.
    pub path: Option<PathBuf>,
    pub format: Option<Format>,
    pub kcore: usize,
    pub ratios: Ratios,
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            format: None,
            kcore: 10,
            ratios: Ratios::default(),
            synthetic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            preset: None,
            data: DataConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub teacher_only: bool,
}

fn apply_preset(table: &mut Table, p: &Preset) {
    fn set_default(t: &mut Table, key: &str, v: Value) {
        t.entry(key.to_owned()).or_insert(v);
    }
    for phase in ["teacher", "student"] {
        let section = table
            .entry(phase.to_owned())
            .or_insert_with(|| Value::Table(Table::new()));
        if let Value::Table(s) = section {
            set_default(s, "lr", Value::Float(p.lr));
            set_default(s, "lambda", Value::Float(p.lambda));
            set_default(s, "mu", Value::Float(p.mu));
            set_default(s, "dim", Value::Integer(p.dim as i64));
        }
    }
    set_default(table, "k_cap", Value::Integer(p.k_cap as i64));
    set_default(table, "gamma", Value::Float(p.gamma));
}

/// Flags keys of `input` that did not survive a parse/serialize round trip.
fn unknown_keys(input: &Table, parsed: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in input {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, parsed.get(k)) {
            (_, None) => out.push(path),
            (Value::Table(a), Some(Value::Table(b))) => unknown_keys(a, b, &path, out),
            _ => {}
        }
    }
}

/// TOML integers are signed 64-bit, so seeds stay below 2^63.
pub const MAX_SEED: u64 = i64::MAX as u64;

fn toml_seed(base: u64, tag: &str) -> u64 {
    derive_seed(base, tag, 0) & MAX_SEED
}

impl RunConfig {
    /// Parses config text. A run manifest is accepted too: its `[config]`
    /// table is used.
    pub fn parse(text: &str, overrides: &Overrides) -> Result<RunConfig> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        if let Some(Value::Table(inner)) = table.get("config") {
            if table.contains_key("artifacts") {
                table = inner.clone();
            }
        }
        if let Some(name) = &overrides.preset {
            table.insert("preset".into(), Value::String(name.clone()));
        }
        if let Some(Value::String(name)) = table.get("preset").cloned() {
            apply_preset(&mut table, &preset(&name)?);
        }
        let input = table.clone();
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        let echo: Table = Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&input, &echo, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if overrides.teacher_only {
            cfg.pipeline.teacher_only = true;
        }
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text, overrides)?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                // Stored absolute so the manifest echo works from any directory.
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.path = Some(std::path::absolute(base.join(p))?);
            }
        }
        Ok(cfg)
    }

    /// Phase seeds follow from the run seed.
    pub fn resolve_seeds(&mut self) {
        self.pipeline.teacher.seed = toml_seed(self.seed, "teacher");
        self.pipeline.student.seed = toml_seed(self.seed, "student");
    }

    pub fn split_seed(&self) -> u64 {
        toml_seed(self.seed, "split")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > MAX_SEED {
            return Err(Error::Config(format!("seed must be at most {MAX_SEED}")));
        }
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("set either data.path or data.synthetic, not both".into())),
            (None, None) => return Err(Error::Config("no data source: set data.path or [data.synthetic]".into())),
            _ => {}
        }
        if self.data.kcore == 0 {
            return Err(Error::Config("data.kcore must be at least 1".into()));
        }
        self.pipeline.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
