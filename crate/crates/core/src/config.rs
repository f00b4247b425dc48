//! The JSON run configuration and its digest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::EpisodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossConfig;
use crate::trainer::TrainConfig;

/// Every knob of a training run. Missing sections and keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub episode: EpisodeConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.episode.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    /// Serialization with every default filled in and a fixed key order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical_json`].
    pub fn digest(&self) -> String {
        digest_of(&self.canonical_json())
    }

    /// The support composition actually used: the configured full/weak split
    /// when weak support is on, otherwise the same number of full shots.
    pub fn effective_episode(&self) -> EpisodeConfig {
        if self.train.weak_support {
            self.episode.clone()
        } else {
            self.episode.fully_supervised()
        }
    }

    pub fn arm_label(&self) -> &'static str {
        if self.train.weak_support && self.episode.shots_weak > 0 {
            "SS-FSL"
        } else {
            "FSL"
        }
    }
}

pub fn digest_of(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let again = RunConfig::from_json(&cfg.canonical_json()).unwrap();
        assert_eq!(again.digest(), cfg.digest());
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"levelz": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"optimizer": {"kind": "adam", "beta3": 1}}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"levels": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"episode": {"shots_full": 0, "shots_weak": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss": {"temperature": -1}}"#).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"train": {"episodes": 5, "optimizer": {"kind": "sgd_momentum", "momentum": 0.5}},
                "loss": {"beta_mode": {"fixed": 2.0}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.episodes, 5);
        assert_eq!(cfg.model, ModelConfig::default());
        assert_ne!(cfg.digest(), RunConfig::default().digest());
    }

    #[test]
    fn weak_support_resolution() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.effective_episode().shots_full, 4);
        assert_eq!(cfg.arm_label(), "FSL");
        cfg.train.weak_support = true;
        assert_eq!(cfg.effective_episode().shots_weak, 3);
        assert_eq!(cfg.arm_label(), "SS-FSL");
    }
}
