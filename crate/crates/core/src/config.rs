//! Experiment configuration: one TOML file with a section per component.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::ProtocolConfig;
use crate::inference::FusionWeight;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::sampler::BatchSpec;
use crate::synth::SynthSpec;
use crate::trainer::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Synthetic corpus generation.
    pub data: u64,
    /// Parameter initialization, batch sampling and dropout.
    pub model: u64,
    /// Enrollment draws and calibration.
    pub protocol: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            model: 1,
            protocol: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory holding the manifests.
    pub data_dir: PathBuf,
    /// Parent of the per-command run directories.
    pub runs_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            runs_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub mus: Vec<FusionWeight>,
    /// Standardize the keyword score on the validation set before fusion.
    pub standardize_ctc: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            mus: [0.4, 0.8, 0.95, 0.99]
                .into_iter()
                .map(|m| FusionWeight::new(m).expect("valid weight"))
                .collect(),
            standardize_ctc: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Drop different-speaker pairs of two keyword-free utterances.
    pub strict_pairs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            strict_pairs: false,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub batch: BatchSpec,
    pub schedule: LrSchedule,
    pub protocol: ProtocolConfig,
    pub scoring: ScoringConfig,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub paths: Paths,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults sized to train in minutes on a CPU.
    pub fn desk() -> Self {
        let mut cfg = Self {
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            batch: BatchSpec {
                batch_size: 48,
                spkr_utts: 40,
                speakers_per_batch: 10,
                utts_per_speaker: 4,
                drop_prob: 0.5,
            },
            schedule: LrSchedule::default(),
            protocol: ProtocolConfig::default(),
            scoring: ScoringConfig::default(),
            synth: SynthSpec::default(),
            train: TrainConfig {
                baseline_epochs: 12,
                finetune_epochs: 40,
                baseline_batch: 32,
                ..TrainConfig::default()
            },
            paths: Paths::default(),
            seeds: Seeds::default(),
        };
        cfg.apply_seeds();
        cfg
    }

    /// Copies the named seeds into the sections that consume them.
    pub fn apply_seeds(&mut self) {
        self.synth.seed = self.seeds.data;
        self.protocol.seed = self.seeds.protocol;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds {
            data: seed,
            model: seed,
            protocol: seed,
        };
        self.apply_seeds();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights().validate()?;
        self.batch.validate()?;
        self.schedule.validate()?;
        self.protocol.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.scoring.mus.is_empty() {
            return Err(Error::Config(
                "scoring.mus must list at least one weight".into(),
            ));
        }
        if self.synth.feature_dim * 7 != self.model.input_dim {
            return Err(Error::Config(format!(
                "model.input_dim {} must be 7 x synth.feature_dim {}",
                self.model.input_dim, self.synth.feature_dim
            )));
        }
        if self.synth.train_speakers > self.model.speaker_classes {
            return Err(Error::Config(format!(
                "{} training speakers exceed {} speaker classes",
                self.synth.train_speakers, self.model.speaker_classes
            )));
        }
        if self.synth.phoneme_count != self.model.phoneme_classes {
            return Err(Error::Config(format!(
                "synth.phoneme_count {} differs from model.phoneme_classes {}",
                self.synth.phoneme_count, self.model.phoneme_classes
            )));
        }
        Ok(())
    }

    /// Parses a config file; keys it omits keep their desk-scale defaults,
    /// including keys inside sections that are present.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overlay: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged: toml::Table =
            toml::from_str(&Self::desk().to_toml()).expect("defaults parse");
        merge(&mut merged, overlay);
        let mut cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.apply_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_toml(&text)?, text))
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Hex SHA-256 of a config text, recorded next to every output.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        ExperimentConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_keeps_seeds() {
        let cfg = ExperimentConfig::desk().with_seed(7);
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.synth.seed, 7);
        assert_eq!(back.protocol.seed, 7);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("[loss]\ngamma = 0.0\n[seeds]\ndata = 3\n").unwrap();
        assert_eq!(cfg.loss.gamma, 0.0);
        assert_eq!(cfg.loss.alpha, 1.0);
        assert_eq!(cfg.synth.seed, 3);
        assert_eq!(cfg.model, ModelConfig::desk());
        let one_key = ExperimentConfig::from_toml("[model]\nspeaker_dropout = 0.2\n").unwrap();
        assert_eq!(one_key.model.d_model, ModelConfig::desk().d_model);
        assert_eq!(one_key.model.speaker_dropout, 0.2);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::from_toml("[model]\nwidth = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("[scoring]\nmus = [1.5]\n").is_err());
        assert!(ExperimentConfig::from_toml("[synth]\nfeature_dim = 20\n").is_err());
    }

    #[test]
    fn hash_is_stable_sha256() {
        assert_eq!(
            config_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
