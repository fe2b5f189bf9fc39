use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, sample_mask};
use crate::model::{Batch, Checkpoint, ModelConfig, ModelParameters, OptimizerState};
use crate::neighborhoods::{build_blocks, ExpressionBlock, SpotGraph, NUM_TOKENS};
use crate::optim::{adam_step, AdamConfig};
use crate::preprocess::CompletionProvenance;
use crate::rng::{derive_rng, STREAM_BATCH, STREAM_TRAIN_MASK, STREAM_VAL_MASK};
use crate::scalar::Scalar;

pub const DEFAULT_LR_GRID: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];
pub const DEFAULT_SEARCH_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Probability of masking each observed entry during training.
    pub rho: f64,
    pub val_every: usize,
    pub seed: u64,
    /// Samples per gradient work unit; fixes the reduction order.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_iterations: 10_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            rho: 0.3,
            val_every: 100,
            seed: 0,
            chunk_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.val_every == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, val_every and chunk_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!(
                "rho must be in [0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One row of `metrics.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    /// Mean training loss since the previous row.
    pub train_mse: Option<f64>,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun<T: Scalar> {
    /// Parameters with the lowest validation MSE.
    pub best: Checkpoint<T>,
    pub history: Vec<MetricRow>,
    /// `(iteration, val_mse)` each time a new best was kept.
    pub selections: Vec<(usize, f64)>,
    pub final_train_mse: Option<f64>,
}

/// Endless stream of train-split positions, reshuffled every epoch.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &[STREAM_BATCH]);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        EpochSampler { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// A stacked batch and the `(row, gene)` positions scored in it.
type ScoredBatch<T> = (Batch<T>, Vec<(usize, usize)>);

/// Validation blocks with their fixed masks, pre-stacked into chunks.
struct ValidationSet<T: Scalar> {
    chunks: Vec<ScoredBatch<T>>,
    targets: Vec<Vec<f64>>,
    count: usize,
}

impl<T: Scalar> ValidationSet<T> {
    fn new(blocks: &[ExpressionBlock], rho: f64, seed: u64, chunk: usize) -> Result<Self> {
        let genes = blocks.first().map_or(0, |b| b.num_genes());
        let mut chunks = Vec::new();
        let mut targets = Vec::new();
        let mut count = 0;
        for group in blocks.chunks(chunk) {
            let mut batch = Batch::zeros(group.len(), NUM_TOKENS, genes);
            let mut scored = Vec::new();
            let mut truth = Vec::new();
            for (b, block) in group.iter().enumerate() {
                let mut rng = derive_rng(seed, &[STREAM_VAL_MASK, block.center_spot as u64]);
                let mask = sample_mask(block, rho, &mut rng)?;
                let masked = apply_mask(block, &mask)?;
                batch.set_sample(b, masked.view(), block.values.view(), &block.presence);
                for j in 0..genes {
                    if !mask.keep[[j, 0]] {
                        scored.push((b * NUM_TOKENS, j));
                        truth.push(block.values[[j, 0]]);
                    }
                }
            }
            count += scored.len();
            chunks.push((batch, scored));
            targets.push(truth);
        }
        if count == 0 {
            return Err(Error::InvalidArgument(
                "validation split has no maskable observed centre entries".into(),
            ));
        }
        Ok(ValidationSet {
            chunks,
            targets,
            count,
        })
    }

    /// MSE over the masked, originally observed centre entries.
    fn mse(&self, params: &ModelParameters<T>) -> Result<f64> {
        let sums: Vec<f64> = self
            .chunks
            .par_iter()
            .zip(&self.targets)
            .map(|((batch, scored), truth)| {
                let cache = params.forward_batch(batch)?;
                Ok(scored
                    .iter()
                    .zip(truth)
                    .map(|(&(r, j), &y)| (cache.output[[r, j]].to_f64_lossy() - y).powi(2))
                    .sum::<f64>())
            })
            .collect::<Result<_>>()?;
        Ok(sums.iter().sum::<f64>() / self.count as f64)
    }
}

fn tree_sum<T: Scalar>(mut parts: Vec<ModelParameters<T>>) -> ModelParameters<T> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.add_assign(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("at least one part")
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            iteration,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Trains the reconstruction network on the train split, selecting the
/// parameters with the lowest validation MSE.
///
/// Each iteration draws `batch_size` train spots, masks every block with a
/// fresh generator derived from `(seed, iteration, batch position, spot)`,
/// and takes one Adam step on the mean full-block MSE. Gradients are computed
/// in chunks of `chunk_size` samples and summed pairwise in chunk order, so
/// results do not depend on the number of worker threads. Validation runs at
/// iteration 0, every `val_every` iterations and at the last iteration.
pub fn train<T: Scalar>(
    dataset: &Dataset,
    provenance: &CompletionProvenance,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainRun<T>> {
    config.validate()?;
    model_config.validate()?;
    if !dataset.completed {
        return Err(Error::InvalidDataset(
            "training requires a median-completed dataset".into(),
        ));
    }
    provenance.check_against(dataset)?;
    if model_config.genes != dataset.num_genes() {
        return Err(Error::InvalidArgument(format!(
            "model configured for {} genes, dataset has {}",
            model_config.genes,
            dataset.num_genes()
        )));
    }
    let graph = SpotGraph::new(dataset)?;
    let train_spots = dataset.spots_in_split(Split::Train);
    let val_spots = dataset.spots_in_split(Split::Val);
    if train_spots.is_empty() || val_spots.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "train and val splits must be non-empty ({} train, {} val spots)",
            train_spots.len(),
            val_spots.len()
        )));
    }
    let train_blocks = build_blocks(dataset, provenance, &graph, &train_spots)?;
    let val_blocks = build_blocks(dataset, provenance, &graph, &val_spots)?;
    let validation =
        ValidationSet::<T>::new(&val_blocks, config.rho, config.seed, config.chunk_size)?;

    let genes = dataset.num_genes();
    let mut params = ModelParameters::<T>::init(model_config, config.seed)?;
    // Start the output at the per-gene mean so early steps are not spent on the offset.
    let bias = params
        .tensor_mut("adapter_out.bias")
        .expect("layout always has an output adapter");
    for (j, b) in bias.iter_mut().enumerate() {
        let values: Vec<f64> = train_spots
            .iter()
            .filter(|&&i| dataset.observed[[i, j]])
            .map(|&i| dataset.expression[[i, j]])
            .collect();
        if !values.is_empty() {
            *b = T::from_f64_lossy(values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    let mut optimizer = OptimizerState::new(params.len());
    let adam = config.adam();

    let val0 = validation.mse(&params).map_err(|e| diverged(0, e))?;
    let mut best = Checkpoint {
        params: params.clone(),
        optimizer: optimizer.clone(),
        iteration: 0,
        best_val_mse: val0,
        seed: config.seed,
        learning_rate: config.learning_rate,
    };
    let mut history = vec![MetricRow {
        iteration: 0,
        train_mse: None,
        val_mse: val0,
    }];
    let mut selections = vec![(0, val0)];
    let mut sampler = EpochSampler::new(train_blocks.len(), config.seed);
    let scale = T::one() / T::from_usize(config.batch_size).expect("batch size");
    let (mut window_sum, mut window_len) = (0.0, 0usize);
    let mut final_train_mse = None;

    for iteration in 1..=config.max_iterations {
        let picks = sampler.next_batch(config.batch_size);
        let chunks: Vec<(usize, &[usize])> = picks
            .chunks(config.chunk_size)
            .enumerate()
            .map(|(c, s)| (c * config.chunk_size, s))
            .collect();
        let parts: Vec<(Vec<f64>, ModelParameters<T>)> = chunks
            .par_iter()
            .map(|&(start, members)| {
                let mut batch = Batch::zeros(members.len(), NUM_TOKENS, genes);
                for (b, &k) in members.iter().enumerate() {
                    let block = &train_blocks[k];
                    let mut rng = derive_rng(
                        config.seed,
                        &[
                            STREAM_TRAIN_MASK,
                            iteration as u64,
                            (start + b) as u64,
                            block.center_spot as u64,
                        ],
                    );
                    let mask = sample_mask(block, config.rho, &mut rng)?;
                    let masked = apply_mask(block, &mask)?;
                    batch.set_sample(b, masked.view(), block.values.view(), &block.presence);
                }
                params.batch_gradients(&batch, scale)
            })
            .collect::<Result<_>>()
            .map_err(|e| diverged(iteration, e))?;
        let loss = parts.iter().flat_map(|(l, _)| l).sum::<f64>() / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        let grads = tree_sum(parts.into_iter().map(|(_, g)| g).collect());
        adam_step(&adam, &mut params, &grads, &mut optimizer);
        if !params.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        window_sum += loss;
        window_len += 1;

        if iteration % config.val_every == 0 || iteration == config.max_iterations {
            let val = validation
                .mse(&params)
                .map_err(|e| diverged(iteration, e))?;
            let train_mse = window_sum / window_len as f64;
            final_train_mse = Some(train_mse);
            history.push(MetricRow {
                iteration,
                train_mse: Some(train_mse),
                val_mse: val,
            });
            (window_sum, window_len) = (0.0, 0);
            if val < best.best_val_mse {
                best = Checkpoint {
                    params: params.clone(),
                    optimizer: optimizer.clone(),
                    iteration,
                    best_val_mse: val,
                    seed: config.seed,
                    learning_rate: config.learning_rate,
                };
                selections.push((iteration, val));
            }
        }
    }
    Ok(TrainRun {
        best,
        history,
        selections,
        final_train_mse,
    })
}

/// `iteration\ttrain_mse\tval_mse`, with `NA` for the untrained row.
pub fn write_metrics_tsv(history: &[MetricRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iteration\ttrain_mse\tval_mse")?;
    for row in history {
        match row.train_mse {
            Some(t) => writeln!(out, "{}\t{}\t{}", row.iteration, t, row.val_mse)?,
            None => writeln!(out, "{}\tNA\t{}", row.iteration, row.val_mse)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrRow {
    pub learning_rate: f64,
    /// `None` when training diverged.
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSearch {
    pub best_learning_rate: f64,
    pub rows: Vec<LrRow>,
}

/// Short training run per candidate learning rate; picks the lowest
/// validation MSE, preferring the smaller rate on ties.
pub fn lr_search<T: Scalar>(
    dataset: &Dataset,
    provenance: &CompletionProvenance,
    model_config: &ModelConfig,
    base: &TrainConfig,
    grid: &[f64],
) -> Result<LrSearch> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("learning-rate grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lr in grid {
        let config = TrainConfig {
            learning_rate: lr,
            ..base.clone()
        };
        let val_mse = match train::<T>(dataset, provenance, model_config, &config) {
            Ok(run) if run.best.best_val_mse.is_finite() => Some(run.best.best_val_mse),
            Ok(_) | Err(Error::Diverged { .. }) => None,
            Err(e) => return Err(e),
        };
        rows.push(LrRow {
            learning_rate: lr,
            val_mse,
        });
    }
    let best = rows
        .iter()
        .filter_map(|r| r.val_mse.map(|v| (r.learning_rate, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .ok_or(Error::Diverged {
            iteration: base.max_iterations,
            loss: f64::NAN,
        })?;
    Ok(LrSearch {
        best_learning_rate: best.0,
        rows,
    })
}
