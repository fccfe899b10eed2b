use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adaptation::AdaptationConfig;
use crate::error::{Error, Result};
use crate::metrics::ThresholdMode;
use crate::model::{ModelDims, SourceTrainConfig};
use crate::synthdata::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterPretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AdapterPretrainConfig {
    fn default() -> Self {
        AdapterPretrainConfig {
            steps: 300,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelDims,
    pub source: SourceTrainConfig,
    pub adapter_pretrain: AdapterPretrainConfig,
    pub adapt: AdaptationConfig,
    pub threshold_mode: ThresholdMode,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: SynthConfig::default(),
            model: ModelDims::default(),
            source: SourceTrainConfig::default(),
            adapter_pretrain: AdapterPretrainConfig::default(),
            adapt: AdaptationConfig::default(),
            threshold_mode: ThresholdMode::YoudenSource,
            out_dir: "runs".into(),
        }
    }
}

fn config_error(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

/// Maps a serde error on the config document to the offending field when
/// serde names it.
fn from_value(v: Value) -> Result<ExperimentConfig> {
    serde_json::from_value(v).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
            .unwrap_or("config");
        config_error(field, msg.clone())
    })
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::load(path, e.line(), e.to_string()))?;
        let cfg = from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON, falling
    /// back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<ExperimentConfig> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config_error("set", format!("`{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| config_error(key, "no such config field"))?;
            }
            *slot = value;
        }
        let cfg = from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.adapt.validate()?;
        if self.source.batch_size == 0 {
            return Err(config_error("source.batch_size", "must be positive"));
        }
        if !(self.source.lr >= 0.0 && self.source.lr.is_finite()) {
            return Err(config_error("source.lr", "must be finite and >= 0"));
        }
        if self.adapter_pretrain.steps > 0 && self.adapter_pretrain.batch_size == 0 {
            return Err(config_error("adapter_pretrain.batch_size", "must be positive"));
        }
        if self.model.raw != [self.data.raw_dim; 3] {
            return Err(config_error(
                "model.raw",
                format!("{:?} does not match data.raw_dim {}", self.model.raw, self.data.raw_dim),
            ));
        }
        if self.model.feat == 0 || self.model.hidden.contains(&0) || self.model.adapter_hidden == 0 {
            return Err(config_error("model", "layer widths must be positive"));
        }
        if self.adapt.frozen_prefix > self.model.hidden.len() + 1 {
            return Err(config_error("adapt.frozen_prefix", "exceeds extractor depth"));
        }
        Ok(())
    }
}
