use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const TPM_SCALE: f64 = 1.0e6;

/// Per-spot TPM scaling followed by `ln(1 + x)`, over observed entries only.
///
/// The library size of a spot is the sum of its observed counts. Spots with
/// an empty library are an error unless `drop_empty_spots` is set, in which
/// case they are removed from the output.
pub fn normalize(dataset: &Dataset, drop_empty_spots: bool) -> Result<Dataset> {
    if dataset.normalization_applied {
        return Err(Error::AlreadyNormalized);
    }
    let mut keep = Vec::with_capacity(dataset.num_spots());
    for (i, spot) in dataset.spots.iter().enumerate() {
        if library_size(dataset, i) > 0 {
            keep.push(i);
        } else if !drop_empty_spots {
            return Err(Error::ZeroLibrary {
                spot_id: format!("{}/{}", spot.slide_id, spot.spot_id),
            });
        }
    }
    let mut out = if keep.len() == dataset.num_spots() {
        dataset.clone()
    } else {
        dataset.select_spots(&keep)
    };

    for i in 0..out.num_spots() {
        let library = library_size(&out, i) as f64;
        for j in 0..out.num_genes() {
            out.expression[[i, j]] = if out.observed[[i, j]] {
                (out.raw_counts[[i, j]] as f64 / library * TPM_SCALE).ln_1p()
            } else {
                0.0
            };
        }
    }
    out.normalization_applied = true;
    out.completed = false;
    Ok(out)
}

fn library_size(dataset: &Dataset, spot: usize) -> u64 {
    dataset
        .raw_counts
        .row(spot)
        .iter()
        .zip(dataset.observed.row(spot))
        .filter(|(_, &o)| o)
        .map(|(&c, _)| c)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::eight_spots;
    use ndarray::{array, Array2};

    fn one_spot(counts: &[u64]) -> Dataset {
        let mut d = eight_spots().select_spots(&[0]);
        d.genes = (0..counts.len()).map(|j| format!("g{j}")).collect();
        d.raw_counts = Array2::from_shape_vec((1, counts.len()), counts.to_vec()).unwrap();
        d.expression = Array2::zeros((1, counts.len()));
        d.observed = Array2::from_elem((1, counts.len()), true);
        d
    }

    #[test]
    fn tpm_log1p_values() {
        let out = normalize(&one_spot(&[10, 30, 60]), false).unwrap();
        // library 100: 10/100*1e6 = 1e5 etc.
        let expected = array![[1.0e5f64.ln_1p(), 3.0e5f64.ln_1p(), 6.0e5f64.ln_1p()]];
        for (a, b) in out.expression.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(out.normalization_applied);
    }

    #[test]
    fn single_gene_is_full_scale() {
        for c in [1, 7, 1000] {
            let out = normalize(&one_spot(&[c]), false).unwrap();
            assert_eq!(out.expression[[0, 0]], 1.0e6f64.ln_1p());
        }
    }

    #[test]
    fn empty_library_is_error_or_dropped() {
        let mut d = eight_spots();
        d.raw_counts.row_mut(2).fill(0);
        let err = normalize(&d, false).unwrap_err();
        assert!(matches!(err, Error::ZeroLibrary { ref spot_id } if spot_id == "A/A-1-0"));
        let out = normalize(&d, true).unwrap();
        assert_eq!(out.num_spots(), 7);
    }

    #[test]
    fn unobserved_counts_excluded_from_library() {
        let mut d = one_spot(&[50, 50]);
        d.observed[[0, 1]] = false;
        d.raw_counts[[0, 1]] = 0;
        let out = normalize(&d, false).unwrap();
        assert_eq!(out.expression[[0, 0]], 1.0e6f64.ln_1p());
        assert_eq!(out.expression[[0, 1]], 0.0);
    }

    #[test]
    fn refuses_double_normalization() {
        let once = normalize(&eight_spots(), false).unwrap();
        assert!(matches!(
            normalize(&once, false),
            Err(Error::AlreadyNormalized)
        ));
    }
}
