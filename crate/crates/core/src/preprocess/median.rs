use ndarray::Array2;
use rayon::prelude::*;

use super::{CompletionProvenance, Source};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::neighborhoods::SpotGraph;

pub const DEFAULT_MAX_RADIUS_HOPS: u32 = 4;

/// Median of a non-empty sample; the mean of the two middle values for even sizes.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

/// Adaptive median filter over hex discs.
///
/// Each unobserved entry takes the median of the observed values of its gene
/// within hop radius `r` of the spot, for the smallest `r` in
/// `1..=max_radius_hops` that has any. Otherwise it falls back to the slide
/// median of that gene, then the median over all slides, then `0.0`.
/// Observed entries are copied unchanged.
pub fn median_complete(
    dataset: &Dataset,
    max_radius_hops: u32,
) -> Result<(Dataset, CompletionProvenance)> {
    if max_radius_hops < 1 {
        return Err(Error::InvalidArgument(
            "max_radius_hops must be at least 1".into(),
        ));
    }
    let graph = SpotGraph::new(dataset)?;
    let g = dataset.num_genes();
    let by_slide = dataset.spots_by_slide();

    let observed_values = |spots: &[usize], j: usize| -> Vec<f64> {
        spots
            .iter()
            .filter(|&&i| dataset.observed[[i, j]])
            .map(|&i| dataset.expression[[i, j]])
            .collect()
    };

    let all: Vec<usize> = (0..dataset.num_spots()).collect();
    let global: Vec<Option<f64>> = (0..g)
        .map(|j| median(&mut observed_values(&all, j)))
        .collect();
    let mut slide_of = vec![0usize; dataset.num_spots()];
    let mut slide_medians = Vec::with_capacity(by_slide.len());
    for (k, (_, members)) in by_slide.iter().enumerate() {
        for &i in members {
            slide_of[i] = k;
        }
        slide_medians.push(
            (0..g)
                .map(|j| median(&mut observed_values(members, j)))
                .collect::<Vec<_>>(),
        );
    }

    let rows: Vec<Vec<(f64, Source)>> = (0..dataset.num_spots())
        .into_par_iter()
        .map(|i| {
            let mut rings: Option<Vec<Vec<usize>>> = None;
            (0..g)
                .map(|j| {
                    if dataset.observed[[i, j]] {
                        return (dataset.expression[[i, j]], Source::Observed);
                    }
                    let rings = rings.get_or_insert_with(|| {
                        (1..=max_radius_hops as i64)
                            .map(|r| graph.ring(i, r))
                            .collect()
                    });
                    let mut pool = Vec::new();
                    for ring in rings.iter() {
                        pool.extend(
                            ring.iter()
                                .filter(|&&k| dataset.observed[[k, j]])
                                .map(|&k| dataset.expression[[k, j]]),
                        );
                        if let Some(m) = median(&mut pool) {
                            return (m, Source::MedianLocal);
                        }
                    }
                    if let Some(m) = slide_medians[slide_of[i]][j] {
                        return (m, Source::MedianSlide);
                    }
                    (global[j].unwrap_or(0.0), Source::MedianGlobal)
                })
                .collect()
        })
        .collect();

    let mut out = dataset.clone();
    let mut sources = Array2::from_elem(dataset.expression.dim(), Source::Observed);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, (v, s)) in row.into_iter().enumerate() {
            out.expression[[i, j]] = v;
            sources[[i, j]] = s;
        }
    }
    out.completed = true;
    Ok((out, CompletionProvenance { sources }))
}
