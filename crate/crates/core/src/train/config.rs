//! Training configuration: TOML on disk, strict about unknown keys.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// All knobs of a training run. Defaults are the desk-scale profile; the
/// full-scale profile (learning rate 1e-4, 320x320 inputs, 256 bases)
/// remains selectable through the same fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub steps: u64,
    pub n_queries: usize,
    pub k_bases: usize,
    pub em_iterations: usize,
    pub seed: u64,
    pub input_size: usize,
    pub random_crop: bool,
    pub horizontal_flip: bool,
    pub fold_id: usize,
    pub encoder_channels: [usize; 5],
    pub projected_channels: usize,
    pub decoder_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 200,
            n_queries: 5,
            k_bases: 16,
            em_iterations: 3,
            seed: 42,
            input_size: 64,
            random_crop: true,
            horizontal_flip: true,
            fold_id: 1,
            encoder_channels: crate::encoder::TOY_CHANNELS,
            projected_channels: 32,
            decoder_channels: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate > 0.0),
            ("steps", self.steps > 0),
            ("n_queries", self.n_queries > 0),
            ("k_bases", self.k_bases > 0),
            ("em_iterations", self.em_iterations >= 1),
            ("projected_channels", self.projected_channels > 0),
            ("decoder_channels", self.decoder_channels > 0),
            ("fold_id", self.fold_id >= 1),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::BadConfig(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::BadConfig("encoder_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder_channels: self.encoder_channels,
            projected_channels: self.projected_channels,
            decoder_channels: self.decoder_channels,
            k_bases: self.k_bases,
            em_iterations: self.em_iterations,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            input_size: 320,
            k_bases: 256,
            ..TrainConfig::default()
        };
        let parsed = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = "learning_rate = 0.001\nmystery_knob = 3\n";
        assert!(TrainConfig::from_toml(text).is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg = TrainConfig::from_toml("steps = 10\n").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.n_queries, 5);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::from_toml("input_size = 48\n").is_err());
        assert!(TrainConfig::from_toml("em_iterations = 0\n").is_err());
        assert!(TrainConfig::from_toml("steps = 0\n").is_err());
    }
}
