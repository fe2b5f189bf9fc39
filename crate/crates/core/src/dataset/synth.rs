use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{Dataset, SlideInfo, Split, SpotRecord};
use crate::error::{Error, Result};
use crate::neighborhoods::Lattice;
use crate::rng::{derive_rng, STREAM_SYNTH};

/// Parameters of the synthetic hex-grid generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub num_slides: usize,
    pub rows: u32,
    pub cols: u32,
    pub genes: usize,
    pub dropout_rate: f64,
    /// Shortest wavelength of the spatial fields, in spot pitches.
    pub smoothness_length: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_slides: 2,
            rows: 30,
            cols: 30,
            genes: 32,
            dropout_rate: 0.3,
            smoothness_length: 3.0,
            seed: 0,
        }
    }
}

const LATENT_FIELDS: usize = 6;
const WAVES_PER_FIELD: usize = 3;

/// Generates a dataset of smooth expression fields on odd-row-shifted hex
/// lattices.
///
/// Each slide carries `LATENT_FIELDS` spatial fields, each a sum of random
/// low-frequency plane waves whose wavelengths are at least
/// `smoothness_length`. Genes mix the latent fields with slide-independent
/// loadings, so genes co-vary the same way on every slide. The log-rate of
/// gene `j` at a spot is `base_j + amplitude_j * field_j`; counts are Poisson
/// draws of `exp(log-rate)`. Each entry is then independently dropped with
/// probability `dropout_rate`.
///
/// `expression` holds the raw counts as floats (unnormalized). Slides go to
/// train, val and test round-robin.
pub fn generate_synthetic(params: &SynthParams) -> Result<Dataset> {
    let SynthParams {
        num_slides,
        rows,
        cols,
        genes: g,
        dropout_rate,
        smoothness_length,
        seed,
    } = *params;
    if num_slides == 0 || (rows as u64) * (cols as u64) < 25 || g == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs slides >= 1, rows*cols >= 25, genes >= 1 \
             (got {num_slides} slides, {rows}x{cols}, {g} genes)"
        )));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout_rate must be in [0, 1), got {dropout_rate}"
        )));
    }
    if !(smoothness_length.is_finite() && smoothness_length > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothness_length must be positive, got {smoothness_length}"
        )));
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut gene_rng = derive_rng(seed, &[STREAM_SYNTH, u64::MAX]);
    let mut loadings = Array2::<f64>::zeros((g, LATENT_FIELDS));
    let mut base = vec![0.0; g];
    let mut amplitude = vec![0.0; g];
    for j in 0..g {
        let mut norm = 0.0;
        for k in 0..LATENT_FIELDS {
            let w: f64 = normal.sample(&mut gene_rng);
            loadings[[j, k]] = w;
            norm += w * w;
        }
        let norm = norm.sqrt().max(1e-12);
        for k in 0..LATENT_FIELDS {
            loadings[[j, k]] /= norm;
        }
        base[j] = gene_rng.gen_range(20f64.ln()..200f64.ln());
        amplitude[j] = gene_rng.gen_range(0.6..1.2);
    }

    let splits = [Split::Train, Split::Val, Split::Test];
    let per_slide = rows as usize * cols as usize;
    let n = num_slides * per_slide;
    let mut spots = Vec::with_capacity(n);
    let mut raw_counts = Array2::<u64>::zeros((n, g));
    let mut observed = Array2::from_elem((n, g), true);
    let mut slides = Vec::with_capacity(num_slides);
    let mut split = BTreeMap::new();

    for s in 0..num_slides {
        let slide_id = format!("slide{s}");
        let mut rng = derive_rng(seed, &[STREAM_SYNTH, s as u64]);

        // (kx, ky, phase) per wave
        let mut waves = Vec::with_capacity(LATENT_FIELDS * WAVES_PER_FIELD);
        for _ in 0..LATENT_FIELDS * WAVES_PER_FIELD {
            let theta = rng.gen_range(0.0..2.0 * PI);
            let wavelength = smoothness_length * rng.gen_range(1.0..2.5);
            let k = 2.0 * PI / wavelength;
            waves.push((
                k * theta.cos(),
                k * theta.sin(),
                rng.gen_range(0.0..2.0 * PI),
            ));
        }
        let wave_norm = (WAVES_PER_FIELD as f64 / 2.0).sqrt();

        for r in 0..rows {
            for c in 0..cols {
                let i = spots.len();
                let (x, y) = Lattice::OddRowShifted.physical(r as i64, c as i64);
                let mut latent = [0.0; LATENT_FIELDS];
                for (f, value) in latent.iter_mut().enumerate() {
                    let sum: f64 = waves[f * WAVES_PER_FIELD..(f + 1) * WAVES_PER_FIELD]
                        .iter()
                        .map(|&(kx, ky, phase)| (kx * x + ky * y + phase).cos())
                        .sum();
                    *value = sum / wave_norm;
                }
                for j in 0..g {
                    let field: f64 = (0..LATENT_FIELDS)
                        .map(|k| loadings[[j, k]] * latent[k])
                        .sum();
                    let rate = (base[j] + amplitude[j] * field).exp();
                    let count = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                    raw_counts[[i, j]] = count as u64;
                }
                spots.push(SpotRecord {
                    spot_id: format!("r{r}c{c}"),
                    slide_id: slide_id.clone(),
                    array_row: r,
                    array_col: c,
                    pixel_x: x * 100.0,
                    pixel_y: y * 100.0,
                });
            }
        }

        let offset = s * per_slide;
        for i in offset..offset + per_slide {
            for j in 0..g {
                if rng.gen::<f64>() < dropout_rate {
                    observed[[i, j]] = false;
                    raw_counts[[i, j]] = 0;
                }
            }
        }

        slides.push(SlideInfo {
            slide_id: slide_id.clone(),
            num_rows: rows,
            num_cols: cols,
        });
        split.insert(slide_id, splits[s % splits.len()]);
    }

    let expression = raw_counts.mapv(|c| c as f64);
    let dataset = Dataset {
        lattice: Lattice::OddRowShifted,
        slides,
        spots,
        genes: (0..g).map(|j| format!("gene{j:03}")).collect(),
        raw_counts,
        expression,
        observed,
        split,
        normalization_applied: false,
        genes_selected: false,
        completed: false,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dropout_rate: f64, seed: u64) -> SynthParams {
        SynthParams {
            num_slides: 3,
            rows: 6,
            cols: 7,
            genes: 5,
            dropout_rate,
            smoothness_length: 5.0,
            seed,
        }
    }

    #[test]
    fn no_dropout_means_fully_observed() {
        let d = generate_synthetic(&small(0.0, 1)).unwrap();
        assert!(d.observed.iter().all(|&o| o));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&small(0.2, 9)).unwrap();
        let b = generate_synthetic(&small(0.2, 9)).unwrap();
        let c = generate_synthetic(&small(0.2, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.raw_counts, c.raw_counts);
    }

    #[test]
    fn dropout_fraction_concentrates() {
        let d = generate_synthetic(&SynthParams {
            seed: 3,
            ..SynthParams::default()
        })
        .unwrap();
        let missing = d.observed.iter().filter(|&&o| !o).count() as f64;
        let frac = missing / d.observed.len() as f64;
        assert!((frac - 0.3).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn slides_round_robin() {
        let d = generate_synthetic(&small(0.1, 2)).unwrap();
        assert_eq!(d.split["slide0"], Split::Train);
        assert_eq!(d.split["slide1"], Split::Val);
        assert_eq!(d.split["slide2"], Split::Test);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut p = small(0.1, 2);
        p.rows = 4;
        p.cols = 6;
        assert!(generate_synthetic(&p).is_err());
        let mut p = small(0.1, 2);
        p.genes = 0;
        assert!(generate_synthetic(&p).is_err());
        assert!(generate_synthetic(&small(1.0, 2)).is_err());
    }
}
