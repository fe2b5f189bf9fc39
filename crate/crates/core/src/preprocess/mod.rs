//! Normalization, Moran's I gene selection and median pre-completion.

mod median;
mod moran;
mod normalize;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub use median::{median, median_complete, DEFAULT_MAX_RADIUS_HOPS};
pub use moran::{morans_i, morans_i_graph, rank_genes, select_genes, write_moran_tsv, MoranScore};
pub use normalize::{normalize, TPM_SCALE};

/// Where the value of an expression entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Source {
    #[default]
    Observed,
    MedianLocal,
    MedianSlide,
    MedianGlobal,
    Model,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Observed => "observed",
            Source::MedianLocal => "median_local",
            Source::MedianSlide => "median_slide",
            Source::MedianGlobal => "median_global",
            Source::Model => "model",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "observed" => Source::Observed,
            "median_local" => Source::MedianLocal,
            "median_slide" => Source::MedianSlide,
            "median_global" => Source::MedianGlobal,
            "model" => Source::Model,
            other => {
                return Err(Error::InvalidDataset(format!(
                    "unknown provenance {other:?}"
                )))
            }
        })
    }
}

/// Per-entry origin of a completed expression matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionProvenance {
    pub sources: Array2<Source>,
}

impl CompletionProvenance {
    /// Provenance of a dataset that has not been completed.
    pub fn all_observed(dataset: &Dataset) -> Self {
        CompletionProvenance {
            sources: Array2::from_elem(dataset.expression.dim(), Source::Observed),
        }
    }

    /// `source == Observed` exactly where `observed` is true.
    pub fn check_against(&self, dataset: &Dataset) -> Result<()> {
        if self.sources.dim() != dataset.observed.dim() {
            return Err(Error::ShapeMismatch(
                "provenance does not match dataset shape".into(),
            ));
        }
        let consistent = self
            .sources
            .iter()
            .zip(dataset.observed.iter())
            .all(|(&s, &o)| (s == Source::Observed) == o);
        if !consistent {
            return Err(Error::InvalidDataset(
                "provenance disagrees with the observed mask".into(),
            ));
        }
        Ok(())
    }

    pub fn count(&self, source: Source) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }
}
