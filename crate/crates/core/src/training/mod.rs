//! Optimization loop, checkpoint selection and evaluation harness.

mod complete;
mod eval;
mod train;

pub use complete::complete_dataset;
pub use eval::{
    corrupt, corruption_sweep, evaluate, evaluate_checkpoint, evaluate_median, pearson,
    write_sweep_tsv, Corruption, EvalOptions, EvalReport, Imputer, MedianImputer, Method,
    ModelImputer, SweepPoint,
};
pub use train::{
    lr_search, train, write_metrics_tsv, LrRow, LrSearch, MetricRow, TrainConfig, TrainRun,
    DEFAULT_LR_GRID, DEFAULT_SEARCH_ITERATIONS,
};
