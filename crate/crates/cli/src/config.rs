//! Application configuration: one JSON document whose top level
//! mirrors the training configuration, with `model`, `generator`,
//! `n_samples`, and `stages` sections, plus `key=value` overrides
//! applied on top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ctrm_core::ctrm::{CausalMaskMode, CtrmConfig};
use ctrm_core::data::{dataset_vocabulary, GeneratorConfig};
use ctrm_core::decoder::DecoderConfig;
use ctrm_core::model::ModelConfig;
use ctrm_core::training::TrainConfig;

/// Configuration problems exit with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Flat model section of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub d_v: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_trl_layers: usize,
    pub ffn_dim: usize,
    pub causal_mask_mode: CausalMaskMode,
    pub max_frames: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub max_caption_len: usize,
    pub beam_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_v: 16,
            d_model: 32,
            n_heads: 4,
            n_trl_layers: 1,
            ffn_dim: 64,
            causal_mask_mode: CausalMaskMode::LowerTriangular,
            max_frames: 20,
            decoder_layers: 1,
            decoder_heads: 1,
            max_caption_len: 24,
            beam_width: 3,
        }
    }
}

impl ModelSection {
    /// Expands the flat section into the full model configuration; the
    /// vocabulary is always the canonical generator vocabulary.
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            d_v: self.d_v,
            vocab_size: dataset_vocabulary().len(),
            ctrm: CtrmConfig {
                d_model: self.d_model,
                n_heads: self.n_heads,
                n_trl_layers: self.n_trl_layers,
                ffn_dim: self.ffn_dim,
                causal_mask_mode: self.causal_mask_mode,
                max_frames: self.max_frames,
            },
            decoder: DecoderConfig {
                d_model: self.d_model,
                n_layers: self.decoder_layers,
                n_heads: self.decoder_heads,
                max_caption_len: self.max_caption_len,
                beam_width: self.beam_width,
            },
        }
    }
}

/// The whole application configuration after merging overrides.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub model: ModelSection,
    pub generator: GeneratorConfig,
    pub n_samples: usize,
    pub stages: Option<Vec<TrainConfig>>,
    /// The merged document, echoed for provenance.
    pub effective: Value,
}

const TRAIN_KEYS: &[&str] = &[
    "stage",
    "epochs",
    "batch_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "grad_clip_norm",
    "loss_weights",
    "ablation",
    "seed",
];
const LOSS_WEIGHT_KEYS: &[&str] = &["lambda1", "lambda2", "tau", "batch_size"];
const MODEL_KEYS: &[&str] = &[
    "d_v",
    "d_model",
    "n_heads",
    "n_trl_layers",
    "ffn_dim",
    "causal_mask_mode",
    "max_frames",
    "decoder_layers",
    "decoder_heads",
    "max_caption_len",
    "beam_width",
];
const GENERATOR_KEYS: &[&str] = &[
    "n_event_types",
    "n_events_per_video",
    "frames_per_event",
    "d_v",
    "feature_noise_sigma",
    "causal_edge_prob",
    "seed",
];

fn check_keys(obj: &Value, allowed: &[&str], context: &str) -> Result<(), ConfigError> {
    let Some(map) = obj.as_object() else {
        return Err(ConfigError(format!("{context} must be a JSON object")));
    };
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(ConfigError(format!("unknown config key {context}{key}")));
        }
    }
    Ok(())
}

fn validate_train_keys(obj: &Value, context: &str) -> Result<(), ConfigError> {
    check_keys(obj, TRAIN_KEYS, context)?;
    if let Some(lw) = obj.get("loss_weights") {
        check_keys(lw, LOSS_WEIGHT_KEYS, &format!("{context}loss_weights."))?;
    }
    Ok(())
}

fn validate_document(doc: &Value) -> Result<(), ConfigError> {
    let mut top: Vec<&str> = TRAIN_KEYS.to_vec();
    top.extend(["model", "generator", "n_samples", "stages"]);
    check_keys(doc, &top, "")?;
    if let Some(lw) = doc.get("loss_weights") {
        check_keys(lw, LOSS_WEIGHT_KEYS, "loss_weights.")?;
    }
    if let Some(model) = doc.get("model") {
        check_keys(model, MODEL_KEYS, "model.")?;
    }
    if let Some(generator) = doc.get("generator") {
        check_keys(generator, GENERATOR_KEYS, "generator.")?;
    }
    if let Some(stages) = doc.get("stages") {
        let Some(list) = stages.as_array() else {
            return Err(ConfigError("stages must be an array".into()));
        };
        for (i, stage) in list.iter().enumerate() {
            validate_train_keys(stage, &format!("stages[{i}]."))?;
        }
    }
    Ok(())
}

/// Parses `key=value`, interpreting the value as JSON when possible and
/// as a bare string otherwise.
fn parse_override(spec: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {spec:?} is not of the form key=value")))?;
    if path.is_empty() {
        return Err(ConfigError(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.split('.').map(String::from).collect(), value))
}

fn apply_override(doc: &mut Value, path: &[String], value: Value) -> Result<(), ConfigError> {
    let mut cursor = doc;
    for key in &path[..path.len() - 1] {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| ConfigError(format!("cannot descend into non-object at {key}")))?;
        cursor = obj
            .entry(key.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cursor
        .as_object_mut()
        .ok_or_else(|| ConfigError("override target is not an object".into()))?;
    obj.insert(path.last().unwrap().clone(), value);
    Ok(())
}

impl AppConfig {
    /// Loads the config file (empty object when no path is given),
    /// applies every `key=value` override, and validates all keys.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: Value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !doc.is_object() {
            return Err(ConfigError("config file must hold a JSON object".into()));
        }
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            apply_override(&mut doc, &path, value)?;
        }
        validate_document(&doc)?;

        let train: TrainConfig = serde_json::from_value(doc.clone())
            .map_err(|e| ConfigError(format!("training fields: {e}")))?;
        let model: ModelSection = match doc.get("model") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| ConfigError(format!("model section: {e}")))?,
            None => ModelSection::default(),
        };
        let generator: GeneratorConfig = match doc.get("generator") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| ConfigError(format!("generator section: {e}")))?,
            None => GeneratorConfig::default(),
        };
        let n_samples: usize = match doc.get("n_samples") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| ConfigError(format!("n_samples: {e}")))?,
            None => 128,
        };
        let stages: Option<Vec<TrainConfig>> = match doc.get("stages") {
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| ConfigError(format!("stages: {e}")))?,
            ),
            None => None,
        };
        Ok(Self {
            train,
            model,
            generator,
            n_samples,
            stages,
            effective: doc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_document() {
        let cfg = AppConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.model.d_model, 32);
        assert!(cfg.stages.is_none());
    }

    #[test]
    fn overrides_apply_with_json_and_string_values() {
        let cfg = AppConfig::load(
            None,
            &[
                "seed=7".into(),
                "loss_weights.lambda1=0.25".into(),
                "model.d_model=16".into(),
                "model.n_heads=2".into(),
                "stage=finetune".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.loss_weights.lambda1, 0.25);
        assert_eq!(cfg.model.d_model, 16);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = AppConfig::load(None, &["learning_rte=0.1".into()]).unwrap_err();
        assert!(err.0.contains("learning_rte"), "{err}");
        let err = AppConfig::load(None, &["model.depth=3".into()]).unwrap_err();
        assert!(err.0.contains("model.depth"), "{err}");
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        assert!(AppConfig::load(None, &["no_equals_sign".into()]).is_err());
        assert!(AppConfig::load(None, &["=5".into()]).is_err());
    }
}
