//! Training-time random masks and inference-time missing-value masks.

use ndarray::{Array2, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::neighborhoods::ExpressionBlock;

/// Binary keep-mask over a block: `true` keeps the entry, `false` zeroes it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub keep: Array2<bool>,
    pub rho: f64,
}

impl MaskSpec {
    pub fn all_kept(genes: usize, tokens: usize) -> Self {
        MaskSpec {
            keep: Array2::from_elem((genes, tokens), true),
            rho: 0.0,
        }
    }

    pub fn num_masked(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "rho must be in [0, 1], got {rho}"
        )));
    }
    Ok(())
}

/// Masks each observed entry of the block independently with probability `rho`.
///
/// Entries that are median-completed or padded are never masked. One uniform
/// draw is consumed per observed entry, in row-major order.
pub fn sample_mask<R: Rng + ?Sized>(
    block: &ExpressionBlock,
    rho: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    check_rho(rho)?;
    let keep = block
        .real_mask
        .map(|&real| !(real && rng.gen::<f64>() < rho));
    Ok(MaskSpec { keep, rho })
}

/// Hadamard product of the block values with the 0/1 mask.
pub fn apply_mask(block: &ExpressionBlock, mask: &MaskSpec) -> Result<Array2<f64>> {
    mask_values(&block.values, mask)
}

pub(crate) fn mask_values(values: &Array2<f64>, mask: &MaskSpec) -> Result<Array2<f64>> {
    if values.dim() != mask.keep.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mask is {:?}, block is {:?}",
            mask.keep.dim(),
            values.dim()
        )));
    }
    let mut out = values.clone();
    Zip::from(&mut out).and(&mask.keep).for_each(|v, &keep| {
        if !keep {
            *v = 0.0;
        }
    });
    Ok(out)
}

/// Mask that hides every present entry that was not an observed measurement.
///
/// Padded columns stay `true`; they carry no value and are excluded from
/// attention anyway.
pub fn inference_mask(block: &ExpressionBlock) -> MaskSpec {
    let mut keep = block.real_mask.clone();
    for (col, &present) in block.presence.iter().enumerate() {
        if !present {
            keep.column_mut(col).fill(true);
        }
    }
    MaskSpec { keep, rho: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighborhoods::NUM_TOKENS;
    use crate::rng::{derive_rng, STREAM_TRAIN_MASK};
    use proptest::prelude::*;
    use rand::Rng;

    /// Block with a mix of observed, completed and padded entries.
    pub(crate) fn mixed_block(seed: u64) -> ExpressionBlock {
        let mut rng = derive_rng(seed, &[1]);
        let g = 5;
        let mut presence = [true; NUM_TOKENS];
        for p in presence.iter_mut().skip(1) {
            *p = rng.gen::<f64>() < 0.8;
        }
        let mut values = Array2::zeros((g, NUM_TOKENS));
        let mut real_mask = Array2::from_elem((g, NUM_TOKENS), false);
        for col in 0..NUM_TOKENS {
            if !presence[col] {
                continue;
            }
            for j in 0..g {
                values[[j, col]] = rng.gen_range(1.0..12.0);
                real_mask[[j, col]] = rng.gen::<f64>() < 0.7;
            }
        }
        ExpressionBlock {
            center_spot: 0,
            values,
            presence,
            real_mask,
        }
    }

    #[test]
    fn rho_extremes() {
        let b = mixed_block(1);
        let mut rng = derive_rng(0, &[STREAM_TRAIN_MASK]);
        let keep_all = sample_mask(&b, 0.0, &mut rng).unwrap();
        assert!(keep_all.keep.iter().all(|&k| k));
        let drop_all = sample_mask(&b, 1.0, &mut rng).unwrap();
        assert_eq!(drop_all.keep, b.real_mask.mapv(|r| !r));
        assert!(sample_mask(&b, 1.5, &mut rng).is_err());
        assert!(sample_mask(&b, -0.1, &mut rng).is_err());
    }

    #[test]
    fn apply_mask_cases() {
        let b = mixed_block(2);
        let (g, t) = b.values.dim();
        assert_eq!(apply_mask(&b, &MaskSpec::all_kept(g, t)).unwrap(), b.values);
        let none = MaskSpec {
            keep: Array2::from_elem((g, t), false),
            rho: 1.0,
        };
        assert!(apply_mask(&b, &none).unwrap().iter().all(|&v| v == 0.0));
        let mut one = MaskSpec::all_kept(g, t);
        one.keep[[2, 0]] = false;
        let out = apply_mask(&b, &one).unwrap();
        for ((i, j), &v) in out.indexed_iter() {
            if (i, j) == (2, 0) {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, b.values[[i, j]]);
            }
        }
        assert!(apply_mask(&b, &MaskSpec::all_kept(g + 1, t)).is_err());
    }

    #[test]
    fn inference_mask_cases() {
        let mut b = mixed_block(3);
        b.real_mask = b.real_mask.mapv(|_| true);
        for col in 0..NUM_TOKENS {
            if !b.presence[col] {
                b.real_mask.column_mut(col).fill(false);
            }
        }
        assert!(inference_mask(&b).keep.iter().all(|&k| k));

        b.real_mask[[1, 0]] = false;
        assert!(!inference_mask(&b).keep[[1, 0]]);

        let present = (1..NUM_TOKENS).find(|&c| b.presence[c]).unwrap();
        b.real_mask.column_mut(present).fill(false);
        let m = inference_mask(&b);
        assert!(m.keep.column(present).iter().all(|&k| !k));
        for col in (0..NUM_TOKENS).filter(|&c| !b.presence[c]) {
            assert!(m.keep.column(col).iter().all(|&k| k));
        }
    }

    proptest! {
        #[test]
        fn masks_only_real_and_deterministic(seed in any::<u64>(), rho in 0.0f64..=1.0) {
            let b = mixed_block(seed);
            let a = sample_mask(&b, rho, &mut derive_rng(seed, &[9])).unwrap();
            let again = sample_mask(&b, rho, &mut derive_rng(seed, &[9])).unwrap();
            prop_assert_eq!(&a, &again);
            for (keep, real) in a.keep.iter().zip(b.real_mask.iter()) {
                prop_assert!(*keep || *real);
            }
            let once = apply_mask(&b, &a).unwrap();
            let masked_block = ExpressionBlock { values: once.clone(), ..b.clone() };
            prop_assert_eq!(apply_mask(&masked_block, &a).unwrap(), once);
        }
    }
}
