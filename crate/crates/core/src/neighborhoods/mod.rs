//! Hexagonal neighbourhoods and per-spot expression blocks.

mod hex;

use ndarray::{s, Array2};

pub use hex::{ring_offsets, Axial, HexIndex, Lattice, EAST};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::preprocess::{CompletionProvenance, Source};

/// Number of neighbour slots in a block (6 + 12 two-hop ring positions).
pub const NUM_NEIGHBORS: usize = 18;
/// Tokens per block: the centre plus its neighbour slots.
pub const NUM_TOKENS: usize = NUM_NEIGHBORS + 1;

/// Hop ring of each token slot: 0 for the centre, then 1 (x6) and 2 (x12).
pub const TOKEN_RING: [usize; NUM_TOKENS] =
    [0, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2];

/// Per-slide hex indices for every spot of a dataset.
#[derive(Debug, Clone)]
pub struct SpotGraph {
    slides: Vec<HexIndex>,
    slide_of: Vec<usize>,
    axial: Vec<Axial>,
}

impl SpotGraph {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let by_slide = dataset.spots_by_slide();
        let mut slide_of = vec![usize::MAX; dataset.num_spots()];
        let mut slides = Vec::with_capacity(by_slide.len());
        for (k, (_, members)) in by_slide.iter().enumerate() {
            let entries = members.iter().map(|&i| {
                slide_of[i] = k;
                let s = &dataset.spots[i];
                (s.array_row as i64, s.array_col as i64, i)
            });
            slides.push(HexIndex::new(dataset.lattice, entries.collect::<Vec<_>>())?);
        }
        if let Some(i) = slide_of.iter().position(|&k| k == usize::MAX) {
            return Err(Error::InvalidDataset(format!(
                "spot {i} belongs to no declared slide"
            )));
        }
        let axial = dataset
            .spots
            .iter()
            .map(|s| {
                dataset
                    .lattice
                    .to_axial(s.array_row as i64, s.array_col as i64)
            })
            .collect();
        Ok(SpotGraph {
            slides,
            slide_of,
            axial,
        })
    }

    pub fn num_spots(&self) -> usize {
        self.axial.len()
    }

    pub fn slide_index(&self, spot: usize) -> &HexIndex {
        &self.slides[self.slide_of[spot]]
    }

    /// Spot occupying each of the 18 two-hop slots around `spot`.
    pub fn neighbor_slots(&self, spot: usize) -> [Option<usize>; NUM_NEIGHBORS] {
        let index = self.slide_index(spot);
        let center = self.axial[spot];
        let mut out = [None; NUM_NEIGHBORS];
        for (slot, d) in ring_offsets(1)
            .into_iter()
            .chain(ring_offsets(2))
            .enumerate()
        {
            out[slot] = index.at(center.offset(d, 1));
        }
        out
    }

    /// Existing spots on ring `k` around `spot`.
    pub fn ring(&self, spot: usize, k: i64) -> Vec<usize> {
        self.slide_index(spot).ring_members(self.axial[spot], k..=k)
    }
}

/// The `g x (n+1)` neighbourhood matrix of one spot.
///
/// Column 0 is the centre spot; column `1 + slot` holds the neighbour in
/// that two-hop slot, or zeros with `presence[1 + slot] == false` when the
/// lattice position is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionBlock {
    pub center_spot: usize,
    pub values: Array2<f64>,
    pub presence: [bool; NUM_TOKENS],
    /// True where the entry is an observed measurement.
    pub real_mask: Array2<bool>,
}

impl ExpressionBlock {
    pub fn num_genes(&self) -> usize {
        self.values.nrows()
    }

    pub fn center(&self) -> ndarray::ArrayView1<'_, f64> {
        self.values.column(0)
    }

    pub fn num_present(&self) -> usize {
        self.presence.iter().filter(|&&p| p).count()
    }
}

/// Assembles the expression block of `spot` from a completed dataset.
pub fn build_block(
    dataset: &Dataset,
    provenance: &CompletionProvenance,
    graph: &SpotGraph,
    spot: usize,
) -> Result<ExpressionBlock> {
    if spot >= dataset.num_spots() || spot >= graph.num_spots() {
        return Err(Error::InvalidArgument(format!(
            "spot {spot} out of range (dataset has {})",
            dataset.num_spots()
        )));
    }
    if provenance.sources.dim() != dataset.expression.dim() {
        return Err(Error::ShapeMismatch(
            "provenance does not match dataset shape".into(),
        ));
    }
    let g = dataset.num_genes();
    let mut values = Array2::zeros((g, NUM_TOKENS));
    let mut real_mask = Array2::from_elem((g, NUM_TOKENS), false);
    let mut presence = [false; NUM_TOKENS];

    let members = std::iter::once(Some(spot)).chain(graph.neighbor_slots(spot));
    for (col, member) in members.enumerate() {
        let Some(i) = member else { continue };
        presence[col] = true;
        values
            .slice_mut(s![.., col])
            .assign(&dataset.expression.row(i));
        for j in 0..g {
            real_mask[[j, col]] = provenance.sources[[i, j]] == Source::Observed;
        }
    }
    Ok(ExpressionBlock {
        center_spot: spot,
        values,
        presence,
        real_mask,
    })
}

/// Blocks for every spot in `spots`, built in parallel.
pub fn build_blocks(
    dataset: &Dataset,
    provenance: &CompletionProvenance,
    graph: &SpotGraph,
    spots: &[usize],
) -> Result<Vec<ExpressionBlock>> {
    use rayon::prelude::*;
    spots
        .par_iter()
        .map(|&i| build_block(dataset, provenance, graph, i))
        .collect()
}
