//! Run configuration: a flat JSON object whose every key has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelKind, ModelSpec};
use crate::objectives::{ContrastiveVariant, LossWeights};
use crate::physics::PhysicalConstants;
use crate::train::AdamConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Daily CSV series; a synthetic series is generated when absent.
    pub data: Option<PathBuf>,
    pub synth_length: usize,
    pub synth_seed: u64,
    /// Fraction of the series used for training.
    pub split: f64,
    /// Standard deviation of the Gaussian augmentation noise.
    pub noise_sigma: f64,
    pub model: ModelKind,
    /// Attach parameter estimation and physics encoding.
    pub pe: bool,
    /// Enable the contrastive term.
    pub scl: bool,
    pub lambda_pe: f64,
    pub lambda_cl: f64,
    pub tau: f64,
    pub cl_variant: ContrastiveVariant,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ffn_hidden: usize,
    pub rho_w: f64,
    pub rho_i: f64,
    /// Histogram bins for deviation summaries.
    pub bins: usize,
    /// Fixed number of sub-batches whose gradients are computed
    /// independently and summed in order; results do not depend on the
    /// number of threads.
    pub parallel_chunks: usize,
    pub out_dir: PathBuf,
}

pub const DEFAULT_SEED: u64 = 7;

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ModelSpec::default();
        let weights = LossWeights::default();
        let adam = AdamConfig::default();
        let constants = PhysicalConstants::default();
        RunConfig {
            data: None,
            synth_length: 10958,
            synth_seed: 1,
            split: 0.8,
            noise_sigma: 0.1,
            model: spec.kind,
            pe: true,
            scl: true,
            lambda_pe: weights.pe,
            lambda_cl: weights.cl,
            tau: weights.temperature,
            cl_variant: weights.variant,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            epochs: 200,
            batch_size: 16,
            seed: DEFAULT_SEED,
            hidden: spec.hidden,
            layers: spec.layers,
            heads: spec.heads,
            dropout: spec.dropout,
            ffn_hidden: spec.ffn_hidden,
            rho_w: constants.rho_w,
            rho_i: constants.rho_i,
            bins: 50,
            parallel_chunks: 1,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
    }

    /// Overlays the keys of a JSON object onto `self`; absent keys keep their value.
    pub fn overlay_json(&self, text: &str) -> Result<Self, ConfigError> {
        let patch: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let serde_json::Value::Object(patch) = patch else {
            return Err(ConfigError::Parse("configuration must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(self).expect("config serializes");
        let fields = base.as_object_mut().expect("config is an object");
        for (k, v) in patch {
            fields.insert(k, v);
        }
        serde_json::from_value(base).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            input_dim: 1,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            pe: self.lambda_pe,
            cl: self.lambda_cl,
            temperature: self.tau,
            variant: self.cl_variant,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn constants(&self) -> PhysicalConstants {
        PhysicalConstants {
            rho_w: self.rho_w,
            rho_i: self.rho_i,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, reason: String| Err(ConfigError::Invalid { key, reason });
        if !(self.split > 0.0 && self.split < 1.0) {
            return invalid("split", format!("{} must lie strictly between 0 and 1", self.split));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return invalid("noise_sigma", format!("{} must be non-negative", self.noise_sigma));
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be positive".into());
        }
        if self.bins == 0 {
            return invalid("bins", "must be positive".into());
        }
        if self.parallel_chunks == 0 {
            return invalid("parallel_chunks", "must be positive".into());
        }
        if let Err(reason) = self.loss_weights().validate() {
            let key = if reason.starts_with("lambda_pe") {
                "lambda_pe"
            } else if reason.starts_with("lambda_cl") {
                "lambda_cl"
            } else {
                "tau"
            };
            return invalid(key, reason);
        }
        if let Err(reason) = self.adam().validate() {
            return invalid("learning_rate", reason);
        }
        if let Err(reason) = self.model_spec().validate() {
            return invalid("model", reason);
        }
        if let Err(e) = self.constants().validate() {
            return invalid("rho_w", e.to_string());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding `out_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("config is an object").remove("out_dir");
        hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn defaults_mirror_the_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.hidden, c.layers, c.heads, c.batch_size), (64, 2, 4, 16));
        assert_eq!((c.dropout, c.learning_rate, c.split), (0.4, 0.0005, 0.8));
        assert_eq!((c.rho_w, c.rho_i), (1024.0, 917.0));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"epochs": 3, "learning_rat": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn overlay_keeps_unmentioned_fields() {
        let base = RunConfig {
            seed: 99,
            ..RunConfig::default()
        };
        let merged = base.overlay_json(r#"{"epochs": 3}"#).unwrap();
        assert_eq!((merged.seed, merged.epochs), (99, 3));
        assert!(base.overlay_json("[1]").is_err());
        assert!(base.overlay_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn validation_names_the_key() {
        let bad = RunConfig {
            split: 1.0,
            ..RunConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ConfigError::Invalid { key: "split", .. })));
        let bad = RunConfig {
            tau: 0.0,
            ..RunConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ConfigError::Invalid { key: "tau", .. })));
        let bad = RunConfig {
            heads: 5,
            ..RunConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ConfigError::Invalid { key: "model", .. })));
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig { seed: 8, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
