use std::path::Path;

use anyhow::{bail, Context};
use cast_core::model::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    /// Stop supervised training once validation accuracy reaches this.
    pub stop_at: Option<f64>,
    pub contrastive_learning_rate: f64,
    pub contrastive_views: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            stop_at: None,
            contrastive_learning_rate: 1e-3,
            contrastive_views: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings { n_train: 300, n_val: 90, n_test: 100, size: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
}

impl PipelineConfig {
    /// Defaults, overlaid with the JSON file if given, then with `key=value`
    /// overrides addressed by dot paths.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc = serde_json::to_value(PipelineConfig::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            merge(&mut doc, file);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: PipelineConfig = serde_json::from_value(doc).map_err(|e| ConfigError(e.to_string()))?;
        cfg.model.validate().map_err(|e| ConfigError(e.to_string()))?;
        if cfg.data.size < 32 || !cfg.data.size.is_multiple_of(8) {
            bail!(ConfigError(format!("data.size {} must be a multiple of 8 and at least 32", cfg.data.size)));
        }
        Ok(cfg)
    }

    pub fn sha256(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn merge(base: &mut Value, top: Value) {
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

/// Sets `a.b.c=value`; the value is parsed as JSON, falling back to a string.
/// The path must name an existing key.
pub fn apply_override(doc: &mut Value, spec: &str) -> anyhow::Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        bail!(ConfigError(format!("override {spec:?} is not key=value")));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for key in path.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| ConfigError(format!("override path {path:?} does not exist")))?;
    }
    *slot = value;
    Ok(())
}
