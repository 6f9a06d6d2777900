//! Run configuration: every hyperparameter in one TOML tree.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::GenConfig;
use crate::fusion::{ModelConfig, TrainConfig};
use crate::hetgraph::Node2vecConfig;
use crate::textembed::DocEmbedConfig;
use crate::tree2vec::Ablation;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Similarity threshold for same-kind edges.
    pub alpha: f64,
    pub similarity_inversion: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { alpha: 0.05, similarity_inversion: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds per ablation run, counted up from the master seed.
    pub ablation_seeds: usize,
    pub m_values: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ablation_seeds: 3,
            m_values: (0..9).map(|k| (10.0 + 5.0 * k as f64) / 1000.0).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GenConfig,
    pub docvec: DocEmbedConfig,
    pub graph: GraphConfig,
    pub node2vec: Node2vecConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub split: SplitConfig,
    pub experiments: ExperimentConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Hex sha256 of the serialized config.
    pub fn hash(&self) -> String {
        let text = self.to_toml().expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&self.graph.alpha) {
            return bad(format!("graph.alpha {} outside [0,1)", self.graph.alpha));
        }
        let s = &self.split;
        if s.train <= 0.0 || s.val <= 0.0 || s.test <= 0.0 || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return bad("split ratios must be positive and sum to 1".into());
        }
        if self.ablation.no_gcn && self.ablation.no_bert {
            return bad("ablation cannot remove both the GCN and the encoder".into());
        }
        let enc = &self.model.tree.encoder;
        if enc.heads == 0 || !enc.model_dim.is_multiple_of(enc.heads) {
            return bad(format!("encoder model_dim {} not divisible by heads {}", enc.model_dim, enc.heads));
        }
        if self.docvec.dim == 0 || self.node2vec.dim == 0 {
            return bad("embedding dims must be positive".into());
        }
        if self.experiments.m_values.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
            return bad("m_values must lie in (0,1)".into());
        }
        Ok(())
    }

    /// Derived seed for one pipeline stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let digest = Sha256::digest(format!("{}:{stage}", self.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig { seed: 17, ..RunConfig::default() };
        cfg.ablation.no_bert = true;
        cfg.model.mlp_hidden = vec![16, 8];
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.hash(), RunConfig::from_toml(&text).unwrap().hash());
    }

    #[test]
    fn defaults_match_standard_experiment() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.data.n_common_users, cfg.data.n_unique_users, cfg.data.n_items), (300, 60, 200));
        assert_eq!((cfg.data.n_categories, cfg.data.n_dishes), (40, 150));
        assert_eq!(cfg.graph.alpha, 0.05);
        assert_eq!(cfg.train.learning_rate, 0.0015);
        assert_eq!(cfg.train.batch_size, 30);
        assert_eq!(cfg.experiments.m_values.len(), 9);
        assert!((cfg.experiments.m_values[8] - 0.05).abs() < 1e-15);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[train]\nmax_epochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.max_epochs, 2);
        assert_eq!(cfg.train.batch_size, 30);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("sed = 3\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
        assert!(RunConfig::from_toml("[graph]\nbeta = 1.0\n").is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.stage_seed("split"), cfg.stage_seed("docvec"));
        assert_eq!(cfg.stage_seed("split"), RunConfig::default().stage_seed("split"));
    }
}
