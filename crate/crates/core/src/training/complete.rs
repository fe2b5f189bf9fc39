use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::masking::inference_mask;
use crate::model::{complete_spot, ModelParameters};
use crate::neighborhoods::{build_block, SpotGraph};
use crate::preprocess::{CompletionProvenance, Source};
use crate::scalar::Scalar;

/// Replaces every originally missing entry with the model's reconstruction.
///
/// Each spot with a missing entry is completed from its own block with the
/// inference mask, so observed values pass through unchanged and neighbours'
/// missing entries are hidden from the model. Those entries get provenance
/// [`Source::Model`]; the observed mask is left as is.
pub fn complete_dataset<T: Scalar>(
    dataset: &Dataset,
    provenance: &CompletionProvenance,
    params: &ModelParameters<T>,
) -> Result<(Dataset, CompletionProvenance)> {
    if !dataset.completed {
        return Err(Error::InvalidDataset(
            "model completion starts from a median-completed dataset".into(),
        ));
    }
    provenance.check_against(dataset)?;
    if params.config().genes != dataset.num_genes() {
        return Err(Error::Checkpoint(format!(
            "model expects {} genes, dataset has {}",
            params.config().genes,
            dataset.num_genes()
        )));
    }
    let graph = SpotGraph::new(dataset)?;
    let targets: Vec<usize> = (0..dataset.num_spots())
        .filter(|&i| dataset.observed.row(i).iter().any(|&o| !o))
        .collect();
    let rows = targets
        .par_iter()
        .map(|&i| {
            let block = build_block(dataset, provenance, &graph, i)?;
            complete_spot(&block, &inference_mask(&block), params)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = dataset.clone();
    let mut sources = provenance.sources.clone();
    for (&i, row) in targets.iter().zip(rows) {
        for (j, v) in row.into_iter().enumerate() {
            if !dataset.observed[[i, j]] {
                out.expression[[i, j]] = v;
                sources[[i, j]] = Source::Model;
            }
        }
    }
    Ok((out, CompletionProvenance { sources }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthParams};
    use crate::model::ModelConfig;
    use crate::preprocess::{median_complete, normalize};

    #[test]
    fn fills_only_missing_entries() {
        let d = generate_synthetic(&SynthParams {
            num_slides: 1,
            rows: 6,
            cols: 6,
            genes: 4,
            dropout_rate: 0.3,
            smoothness_length: 3.0,
            seed: 4,
        })
        .unwrap();
        let (d, p) = median_complete(&normalize(&d, true).unwrap(), 4).unwrap();
        let config = ModelConfig {
            d_k: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            genes: 4,
            ring_embedding: false,
        };
        let params = ModelParameters::<f64>::init(&config, 3).unwrap();
        let (out, prov) = complete_dataset(&d, &p, &params).unwrap();
        let missing = d.observed.iter().filter(|&&o| !o).count();
        assert!(missing > 0);
        assert_eq!(prov.count(Source::Model), missing);
        for ((i, j), &o) in d.observed.indexed_iter() {
            if o {
                assert_eq!(out.expression[[i, j]], d.expression[[i, j]]);
                assert_eq!(prov.sources[[i, j]], Source::Observed);
            }
        }
        out.validate().unwrap();
        prov.check_against(&out).unwrap();
    }

    #[test]
    fn requires_median_completion() {
        let d = crate::dataset::fixtures::eight_spots();
        let config = ModelConfig {
            d_k: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            genes: 4,
            ring_embedding: false,
        };
        let params = ModelParameters::<f64>::init(&config, 3).unwrap();
        let p = CompletionProvenance::all_observed(&d);
        assert!(complete_dataset(&d, &p, &params).is_err());
    }
}
