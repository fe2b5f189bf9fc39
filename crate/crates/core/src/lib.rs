//! Reference-free completion of spatial transcriptomics expression maps.
//!
//! The pipeline normalizes spot counts, ranks genes by Moran's I, fills
//! dropouts with an adaptive hex-median filter, and then trains a small
//! transformer encoder to reconstruct randomly masked entries of each
//! spot's two-hop neighbourhood block. The trained model replaces the
//! median estimates of originally missing entries.
//!
//! Network math is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod dataset;
pub mod error;
pub mod masking;
pub mod model;
pub mod neighborhoods;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params32 = model::ModelParameters<f32>;
pub type Params64 = model::ModelParameters<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
pub type Batch32 = model::Batch<f32>;
pub type Batch64 = model::Batch<f64>;
