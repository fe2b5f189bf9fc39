//! Resolved run configuration: built-in defaults, then a TOML file, then flags.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use spackle_core::dataset::Split;
use spackle_core::model::ModelConfig;
use spackle_core::preprocess::DEFAULT_MAX_RADIUS_HOPS;
use spackle_core::training::{TrainConfig, DEFAULT_LR_GRID, DEFAULT_SEARCH_ITERATIONS};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub precision: Precision,

    pub max_radius_hops: u32,
    pub num_genes: usize,

    pub d_k: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub ring_embedding: bool,

    pub batch_size: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub val_every: usize,
    pub chunk_size: usize,
    pub lr_grid: Vec<f64>,
    pub search_iterations: usize,

    pub eval_split: Split,
    pub eval_rho: f64,
    pub rhos: Vec<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        let model = ModelConfig::new(0);
        let train = TrainConfig::default();
        Settings {
            seed: train.seed,
            threads: None,
            precision: Precision::F32,
            max_radius_hops: DEFAULT_MAX_RADIUS_HOPS,
            num_genes: 32,
            d_k: model.d_k,
            num_layers: model.num_layers,
            num_heads: model.num_heads,
            ffn_dim: model.ffn_dim,
            ring_embedding: model.ring_embedding,
            batch_size: train.batch_size,
            max_iterations: train.max_iterations,
            learning_rate: train.learning_rate,
            rho: train.rho,
            val_every: train.val_every,
            chunk_size: train.chunk_size,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            search_iterations: DEFAULT_SEARCH_ITERATIONS,
            eval_split: Split::Val,
            eval_rho: 0.3,
            rhos: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

impl Settings {
    /// Defaults overlaid with `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn model_config(&self, genes: usize) -> ModelConfig {
        ModelConfig {
            d_k: self.d_k,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            genes,
            ring_embedding: self.ring_embedding,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_iterations: self.max_iterations,
            learning_rate: self.learning_rate,
            rho: self.rho,
            val_every: self.val_every,
            seed: self.seed,
            chunk_size: self.chunk_size,
            ..TrainConfig::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize to TOML")
    }
}

/// Sets `target` when the flag was given.
pub fn apply<T>(target: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *target = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let s = Settings {
            threads: Some(3),
            rhos: vec![0.25],
            ..Settings::default()
        };
        let back: Settings = toml::from_str(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let s: Settings = toml::from_str("d_k = 16\nprecision = \"f64\"\n").unwrap();
        assert_eq!(s.d_k, 16);
        assert_eq!(s.precision, Precision::F64);
        assert_eq!(s.num_layers, Settings::default().num_layers);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<Settings>("dk = 16\n").is_err());
    }

    #[test]
    fn flag_overrides() {
        let mut v = 1;
        apply(&mut v, None);
        assert_eq!(v, 1);
        apply(&mut v, Some(5));
        assert_eq!(v, 5);
    }
}
