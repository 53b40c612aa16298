//! Resolved run configuration: defaults, then `--config`, then flags.

use std::path::Path;

use anyhow::{Context, Result};
use mtur_core::metrics::{MetricConstants, Threading};
use mtur_core::network::MturConfig;
use mtur_core::physics::{DepthStyle, PhysicsParams};
use mtur_core::training::{DatasetParams, TrainConfig};
use mtur_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Random medium used by `degrade` when no transmission map is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeParams {
    pub airlight: [f64; 3],
    pub beta: [f64; 3],
    pub depth_style: DepthStyle,
    pub d_max: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            airlight: [0.1, 0.6, 0.7],
            beta: [1.2, 0.3, 0.2],
            depth_style: DepthStyle::Perlin,
            d_max: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    pub sizes: Vec<usize>,
    pub warmup: usize,
    pub runs: usize,
    pub threading: Threading,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256],
            warmup: 2,
            runs: 10,
            threading: Threading::Single,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub model: MturConfig,
    pub physics: PhysicsParams,
    pub degrade: DegradeParams,
    pub data: DatasetParams,
    /// Procedural training pairs when `train` gets no manifest.
    pub dataset_size: usize,
    /// Held-out pairs taken from the end of the training data.
    pub val_size: usize,
    pub train: TrainConfig,
    pub metrics: MetricConstants,
    pub bench: BenchParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            model: MturConfig::tiny(),
            physics: PhysicsParams::default(),
            degrade: DegradeParams::default(),
            data: DatasetParams::default(),
            dataset_size: 200,
            val_size: 20,
            train: TrainConfig::default(),
            metrics: MetricConstants::default(),
            bench: BenchParams::default(),
        }
    }
}

/// Parse a config file: a JSON object, or `dotted.key = value` lines where
/// values are JSON literals or bare strings. `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Value, Error> {
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")));
    }
    let mut root = Value::Object(Map::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut root, key.trim(), value)?;
    }
    Ok(root)
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("config key {key}: {part} is not a section")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Err(Error::Config("empty config key".into()))
}

/// Recursively overlay `top` onto `base`; objects merge, anything else
/// replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

pub fn resolve(file: Option<&Path>) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        merge(&mut value, parse_config_text(&text)?);
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.model.validate().context("model section")?;
    cfg.physics.validate().context("physics section")?;
    Ok(cfg)
}
