//! The run configuration file.
//!
//! A TOML document with one table per concern. Every field has a default,
//! and unknown keys are rejected so that typos fail loudly.
//!
//! ```toml
//! [train]
//! batch_size = 8
//! learning_rate = 0.001
//!
//! [model]
//! conditioning = "scheduled"
//!
//! [schedule]
//! gamma = 0.08333333333333333
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedule::ScheduleParams;
use crate::synthdata::CorpusParams;
use crate::trainer::{AbParams, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-layer ℓ2 bound on gradients; absent means no clipping.
    pub grad_clip: Option<f64>,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Frames per training sequence.
    pub sequence_length: usize,
    pub threshold: f64,
    /// Write wall-clock seconds into the training log (breaks byte equality
    /// between runs).
    pub record_timing: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            grad_clip: t.grad_clip,
            patience: t.patience,
            max_epochs: t.max_epochs,
            seed: t.seed,
            sequence_length: t.sequence_length,
            threshold: t.threshold,
            record_timing: t.record_timing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainSection,
    pub model: ModelConfig,
    pub schedule: ScheduleParams,
    pub corpus: CorpusParams,
    pub ab: AbParams,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            grad_clip: t.grad_clip,
            patience: t.patience,
            max_epochs: t.max_epochs,
            seed: t.seed,
            sequence_length: t.sequence_length,
            threshold: t.threshold,
            record_timing: t.record_timing,
            schedule: self.schedule,
            model: self.model.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.corpus.validate()?;
        if self.model.n_classes != self.corpus.n_classes() {
            return Err(Error::Config(format!(
                "model has {} classes but the corpus grammar has {}",
                self.model.n_classes,
                self.corpus.n_classes()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml(&text, "t").unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = RunConfig::from_toml("[train]\nlearning_rate = 5e-4\ngrad_clip = 0.5\n", "t").unwrap();
        assert_eq!(c.train.learning_rate, 5e-4);
        assert_eq!(c.train.grad_clip, Some(0.5));
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("[train]\nlearning_rat = 1.0\n", "cfg.toml").unwrap_err();
        assert!(e.to_string().contains("learning_rat"), "{e}");
        assert!(RunConfig::from_toml("[trian]\n", "t").is_err());
    }

    #[test]
    fn class_counts_must_agree() {
        let mut c = RunConfig::default();
        c.model.n_classes = 4;
        assert!(c.validate().is_err());
    }
}
