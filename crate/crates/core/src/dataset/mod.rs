//! Spot tables, expression matrices and the on-disk dataset format.

mod io;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighborhoods::Lattice;

pub use io::{
    load_dataset, load_dataset_with, load_provenance, save_dataset, save_provenance, LoadOptions,
    FORMAT_VERSION,
};
pub use synth::{generate_synthetic, SynthParams};

/// One capture location on the hexagonal array.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotRecord {
    pub spot_id: String,
    pub slide_id: String,
    pub array_row: u32,
    pub array_col: u32,
    pub pixel_x: f64,
    pub pixel_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidDataset(format!(
                "unknown split label {other:?}"
            ))),
        }
    }
}

/// Declared extent of one slide's array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideInfo {
    pub slide_id: String,
    pub num_rows: u32,
    pub num_cols: u32,
}

/// Slide-partitioned expression data.
///
/// Until a completion step runs (`completed == false`), every unobserved
/// entry of `expression` holds exactly `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub lattice: Lattice,
    pub slides: Vec<SlideInfo>,
    pub spots: Vec<SpotRecord>,
    pub genes: Vec<String>,
    pub raw_counts: Array2<u64>,
    pub expression: Array2<f64>,
    pub observed: Array2<bool>,
    pub split: BTreeMap<String, Split>,
    pub normalization_applied: bool,
    pub genes_selected: bool,
    pub completed: bool,
}

impl Dataset {
    pub fn num_spots(&self) -> usize {
        self.spots.len()
    }

    pub fn num_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn split_of_spot(&self, spot: usize) -> Split {
        self.split[&self.spots[spot].slide_id]
    }

    /// Ordinals of all spots whose slide belongs to `split`.
    pub fn spots_in_split(&self, split: Split) -> Vec<usize> {
        (0..self.num_spots())
            .filter(|&i| self.split_of_spot(i) == split)
            .collect()
    }

    /// Ordinals of the spots on each slide, in slide declaration order.
    pub fn spots_by_slide(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .slides
            .iter()
            .map(|s| (s.slide_id.clone(), Vec::new()))
            .collect();
        for (i, spot) in self.spots.iter().enumerate() {
            if let Some(entry) = out.iter_mut().find(|(id, _)| *id == spot.slide_id) {
                entry.1.push(i);
            }
        }
        out
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_spots();
        let g = self.num_genes();
        for (name, shape) in [
            ("raw_counts", self.raw_counts.dim()),
            ("expression", self.expression.dim()),
            ("observed", self.observed.dim()),
        ] {
            if shape != (n, g) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {}x{}, expected {n}x{g}",
                    shape.0, shape.1
                )));
            }
        }

        let mut gene_names = HashSet::new();
        for gene in &self.genes {
            if !gene_names.insert(gene.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate gene {gene:?}")));
            }
        }

        let mut slide_ids = HashSet::new();
        for slide in &self.slides {
            if !slide_ids.insert(slide.slide_id.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate slide {:?}",
                    slide.slide_id
                )));
            }
            if !self.split.contains_key(&slide.slide_id) {
                return Err(Error::InvalidDataset(format!(
                    "slide {:?} has no split assignment",
                    slide.slide_id
                )));
            }
        }

        let mut coords = HashSet::new();
        let mut ids = HashSet::new();
        for spot in &self.spots {
            let Some(slide) = self.slides.iter().find(|s| s.slide_id == spot.slide_id) else {
                return Err(Error::InvalidDataset(format!(
                    "spot {:?} references undeclared slide {:?}",
                    spot.spot_id, spot.slide_id
                )));
            };
            if spot.array_row >= slide.num_rows || spot.array_col >= slide.num_cols {
                return Err(Error::InvalidDataset(format!(
                    "spot {:?} at ({}, {}) is outside slide bounds {}x{}",
                    spot.spot_id, spot.array_row, spot.array_col, slide.num_rows, slide.num_cols
                )));
            }
            self.lattice
                .check_coordinate(spot.array_row as i64, spot.array_col as i64)?;
            if !coords.insert((spot.slide_id.as_str(), spot.array_row, spot.array_col)) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate coordinate ({}, {}) on slide {:?}",
                    spot.array_row, spot.array_col, spot.slide_id
                )));
            }
            if !ids.insert((spot.slide_id.as_str(), spot.spot_id.as_str())) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate spot id {:?} on slide {:?}",
                    spot.spot_id, spot.slide_id
                )));
            }
            if !spot.pixel_x.is_finite() || !spot.pixel_y.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pixel coordinates of {:?}",
                    spot.spot_id
                )));
            }
        }

        for ((i, j), &v) in self.expression.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("expression[{i}][{j}]")));
            }
            if !self.completed && !self.observed[[i, j]] && v != 0.0 {
                return Err(Error::InvalidDataset(format!(
                    "unobserved entry ({i}, {j}) holds {v}, expected 0.0"
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the given gene columns, in the given order.
    pub fn select_gene_columns(&self, columns: &[usize]) -> Dataset {
        Dataset {
            genes: columns.iter().map(|&j| self.genes[j].clone()).collect(),
            raw_counts: self.raw_counts.select(Axis(1), columns),
            expression: self.expression.select(Axis(1), columns),
            observed: self.observed.select(Axis(1), columns),
            ..self.clone()
        }
    }

    /// Keeps only the given spots, in the given order.
    pub fn select_spots(&self, rows: &[usize]) -> Dataset {
        Dataset {
            spots: rows.iter().map(|&i| self.spots[i].clone()).collect(),
            raw_counts: self.raw_counts.select(Axis(0), rows),
            expression: self.expression.select(Axis(0), rows),
            observed: self.observed.select(Axis(0), rows),
            ..self.clone()
        }
    }

    /// Fraction of entries flagged unobserved.
    pub fn missing_fraction(&self) -> f64 {
        let total = self.observed.len();
        if total == 0 {
            return 0.0;
        }
        self.observed.iter().filter(|&&o| !o).count() as f64 / total as f64
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use ndarray::array;

    /// Two slides, eight spots, four genes; spot 3 gene 1 is a dropout.
    pub fn eight_spots() -> Dataset {
        let coords = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let mut spots = Vec::new();
        for slide in ["A", "B"] {
            for (r, c) in coords {
                spots.push(SpotRecord {
                    spot_id: format!("{slide}-{r}-{c}"),
                    slide_id: slide.to_string(),
                    array_row: r,
                    array_col: c,
                    pixel_x: c as f64 * 100.0 + 0.25,
                    pixel_y: r as f64 * 86.6,
                });
            }
        }
        let raw_counts = array![
            [5, 10, 0, 3],
            [2, 4, 6, 8],
            [1, 1, 1, 1],
            [9, 0, 3, 2],
            [7, 3, 2, 1],
            [0, 5, 5, 5],
            [4, 4, 8, 1],
            [3, 6, 9, 12],
        ];
        let mut observed = Array2::from_elem((8, 4), true);
        observed[[3, 1]] = false;
        let expression = raw_counts.mapv(|c| c as f64 * 0.1);
        Dataset {
            lattice: Lattice::OddRowShifted,
            slides: vec![
                SlideInfo {
                    slide_id: "A".into(),
                    num_rows: 2,
                    num_cols: 2,
                },
                SlideInfo {
                    slide_id: "B".into(),
                    num_rows: 2,
                    num_cols: 2,
                },
            ],
            spots,
            genes: vec!["g0".into(), "g1".into(), "g2".into(), "g3".into()],
            raw_counts,
            expression,
            observed,
            split: BTreeMap::from([("A".into(), Split::Train), ("B".into(), Split::Val)]),
            normalization_applied: false,
            genes_selected: false,
            completed: false,
        }
    }
}
