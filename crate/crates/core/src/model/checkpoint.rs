//! Checkpoint container.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format": "spackle-checkpoint",
//!   "version": 1,
//!   "scalar": "f32" | "f64",
//!   "config": { d_k, num_layers, num_heads, ffn_dim, genes, ring_embedding },
//!   "iteration": <completed optimizer steps>,
//!   "best_val_mse": <validation MSE of these parameters>,
//!   "seed": <global seed>,
//!   "learning_rate": <Adam step size used>,
//!   "tensors": [ { "name", "shape", "offset" }, ... ],
//!   "parameters": [ flat row-major values ],
//!   "optimizer": { "step", "first_moment": [...], "second_moment": [...] }
//! }
//! ```
//!
//! `tensors` indexes into `parameters`; every weight matrix is stored
//! `fan_in x fan_out` so that a layer computes `y = x W + b`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParameters, TensorInfo};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "spackle-checkpoint";

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OptimizerState<T: Scalar> {
    pub step: u64,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            step: 0,
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub params: ModelParameters<T>,
    pub optimizer: OptimizerState<T>,
    pub iteration: usize,
    pub best_val_mse: f64,
    pub seed: u64,
    pub learning_rate: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct CheckpointFile<T: Scalar> {
    format: String,
    version: u32,
    scalar: String,
    config: ModelConfig,
    iteration: usize,
    best_val_mse: f64,
    seed: u64,
    learning_rate: f64,
    tensors: Vec<TensorInfo>,
    parameters: Vec<T>,
    optimizer: OptimizerState<T>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    scalar: String,
    config: ModelConfig,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        let file = CheckpointFile {
            format: FORMAT_TAG.into(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.into(),
            config: self.config().clone(),
            iteration: self.iteration,
            best_val_mse: self.best_val_mse,
            seed: self.seed,
            learning_rate: self.learning_rate,
            tensors: self.params.layout().tensors.clone(),
            parameters: self.params.data.clone(),
            optimizer: self.optimizer.clone(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.format != FORMAT_TAG || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        if header.scalar != T::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} values, expected {}",
                header.scalar,
                T::NAME
            )));
        }
        header.config.validate()?;
        let file: CheckpointFile<T> =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let params = ModelParameters::from_data(&file.config, file.parameters)?;
        if params.layout().tensors != file.tensors {
            return Err(Error::Checkpoint(
                "tensor table does not match the configured architecture".into(),
            ));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        if file.optimizer.first_moment.len() != params.len()
            || file.optimizer.second_moment.len() != params.len()
        {
            return Err(Error::Checkpoint(
                "optimizer state has the wrong size".into(),
            ));
        }
        Ok(Checkpoint {
            params,
            optimizer: file.optimizer,
            iteration: file.iteration,
            best_val_mse: file.best_val_mse,
            seed: file.seed,
            learning_rate: file.learning_rate,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fails unless the checkpoint was trained on `genes` genes.
    pub fn expect_genes(&self, genes: usize) -> Result<()> {
        if self.config().genes != genes {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {} genes, dataset has {genes}",
                self.config().genes
            )));
        }
        Ok(())
    }
}

/// Reads the scalar tag of a checkpoint file without parsing its tensors.
pub fn checkpoint_scalar(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(header.scalar)
}
