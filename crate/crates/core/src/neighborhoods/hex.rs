use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Array coordinate convention of a slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lattice {
    /// `array_col` counts spots within a row; odd rows sit half a pitch to the right.
    OddRowShifted,
    /// Visium native: `array_col` advances by 2 along a row and `row + col` is even.
    Doubled,
}

/// Axial hex coordinate; `r` grows downwards, `q` to the east.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Axial {
    pub q: i64,
    pub r: i64,
}

impl Axial {
    pub const fn new(q: i64, r: i64) -> Self {
        Axial { q, r }
    }

    pub fn offset(self, d: Axial, k: i64) -> Axial {
        Axial::new(self.q + d.q * k, self.r + d.r * k)
    }

    pub fn distance(self, other: Axial) -> i64 {
        let dq = self.q - other.q;
        let dr = self.r - other.r;
        (dq.abs() + dr.abs() + (dq + dr).abs()) / 2
    }
}

pub const EAST: Axial = Axial::new(1, 0);

/// Walking directions around a ring that starts at the eastern corner,
/// clockwise on screen (rows grow downwards).
const RING_WALK: [Axial; 6] = [
    Axial::new(-1, 1), // south-west
    Axial::new(-1, 0), // west
    Axial::new(0, -1), // north-west
    Axial::new(1, -1), // north-east
    Axial::new(1, 0),  // east
    Axial::new(0, 1),  // south-east
];

/// Offsets of the ring at distance `k` around the origin, clockwise from due east.
pub fn ring_offsets(k: i64) -> Vec<Axial> {
    if k == 0 {
        return vec![Axial::new(0, 0)];
    }
    let mut out = Vec::with_capacity(6 * k as usize);
    let mut cur = Axial::new(0, 0).offset(EAST, k);
    for d in RING_WALK {
        for _ in 0..k {
            out.push(cur);
            cur = cur.offset(d, 1);
        }
    }
    out
}

impl Lattice {
    pub fn check_coordinate(self, row: i64, col: i64) -> Result<()> {
        if self == Lattice::Doubled && (row + col).rem_euclid(2) != 0 {
            return Err(Error::InvalidDataset(format!(
                "coordinate ({row}, {col}) violates the doubled-column parity rule"
            )));
        }
        Ok(())
    }

    pub fn to_axial(self, row: i64, col: i64) -> Axial {
        match self {
            Lattice::OddRowShifted => Axial::new(col - (row - row.rem_euclid(2)) / 2, row),
            Lattice::Doubled => Axial::new((col - row).div_euclid(2), row),
        }
    }

    pub fn from_axial(self, a: Axial) -> (i64, i64) {
        match self {
            Lattice::OddRowShifted => (a.r, a.q + (a.r - a.r.rem_euclid(2)) / 2),
            Lattice::Doubled => (a.r, 2 * a.q + a.r),
        }
    }

    /// Centre of a spot in units of the spot pitch.
    pub fn physical(self, row: i64, col: i64) -> (f64, f64) {
        let y = row as f64 * 3f64.sqrt() / 2.0;
        match self {
            Lattice::OddRowShifted => (col as f64 + 0.5 * row.rem_euclid(2) as f64, y),
            Lattice::Doubled => (col as f64 / 2.0, y),
        }
    }
}

/// Coordinate lookup for the spots of one slide.
#[derive(Debug, Clone)]
pub struct HexIndex {
    lattice: Lattice,
    positions: HashMap<Axial, usize>,
}

impl HexIndex {
    /// Builds the index from `(array_row, array_col, ordinal)` triples.
    pub fn new(
        lattice: Lattice,
        spots: impl IntoIterator<Item = (i64, i64, usize)>,
    ) -> Result<Self> {
        let mut positions = HashMap::new();
        for (row, col, ordinal) in spots {
            lattice.check_coordinate(row, col)?;
            if positions
                .insert(lattice.to_axial(row, col), ordinal)
                .is_some()
            {
                return Err(Error::InvalidDataset(format!(
                    "duplicate coordinate ({row}, {col})"
                )));
            }
        }
        Ok(HexIndex { lattice, positions })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn lookup(&self, row: i64, col: i64) -> Option<usize> {
        if self.lattice.check_coordinate(row, col).is_err() {
            return None;
        }
        self.positions
            .get(&self.lattice.to_axial(row, col))
            .copied()
    }

    pub fn at(&self, a: Axial) -> Option<usize> {
        self.positions.get(&a).copied()
    }

    /// Existing spots at hex distance `1..=hops` from `(row, col)`, ring by ring,
    /// each ring clockwise from the due-east neighbour.
    pub fn hex_neighbors(&self, row: i64, col: i64, hops: u32) -> Result<Vec<usize>> {
        if !(1..=2).contains(&hops) {
            return Err(Error::InvalidArgument(format!(
                "hops must be 1 or 2, got {hops}"
            )));
        }
        if self.lookup(row, col).is_none() {
            return Err(Error::UnknownSpot { row, col });
        }
        let center = self.lattice.to_axial(row, col);
        Ok(self.ring_members(center, 1..=hops as i64))
    }

    pub(crate) fn ring_members(
        &self,
        center: Axial,
        rings: std::ops::RangeInclusive<i64>,
    ) -> Vec<usize> {
        rings
            .flat_map(ring_offsets)
            .filter_map(|d| self.at(center.offset(d, 1)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(lattice: Lattice, rows: i64, cols: i64) -> HexIndex {
        let mut spots = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let c = match lattice {
                    Lattice::OddRowShifted => c,
                    Lattice::Doubled => 2 * c + (r & 1),
                };
                spots.push((r, c, spots.len()));
            }
        }
        HexIndex::new(lattice, spots).unwrap()
    }

    #[test]
    fn ring_sizes() {
        assert_eq!(ring_offsets(1).len(), 6);
        assert_eq!(ring_offsets(2).len(), 12);
        assert_eq!(ring_offsets(1)[0], EAST);
        assert_eq!(ring_offsets(2)[0], Axial::new(2, 0));
        for k in 1..5 {
            assert!(ring_offsets(k)
                .iter()
                .all(|&a| a.distance(Axial::new(0, 0)) == k));
        }
    }

    #[test]
    fn ring_is_clockwise_from_east() {
        let one: Vec<(i64, i64)> = ring_offsets(1).iter().map(|a| (a.q, a.r)).collect();
        assert_eq!(
            one,
            vec![(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)]
        );
    }

    #[test]
    fn axial_round_trip() {
        for lattice in [Lattice::OddRowShifted, Lattice::Doubled] {
            for r in -3..4 {
                for c in -6..7 {
                    if lattice.check_coordinate(r, c).is_ok() {
                        assert_eq!(lattice.from_axial(lattice.to_axial(r, c)), (r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn interior_counts() {
        for lattice in [Lattice::OddRowShifted, Lattice::Doubled] {
            let idx = full(lattice, 7, 7);
            let c = if lattice == Lattice::Doubled { 7 } else { 3 };
            assert_eq!(idx.hex_neighbors(3, c, 1).unwrap().len(), 6);
            assert_eq!(idx.hex_neighbors(3, c, 2).unwrap().len(), 18);
        }
    }

    #[test]
    fn doubled_east_neighbor_is_two_columns_over() {
        let idx = full(Lattice::Doubled, 5, 5);
        let center = idx.lookup(2, 4).unwrap();
        let east = idx.lookup(2, 6).unwrap();
        let n = idx.hex_neighbors(2, 4, 1).unwrap();
        assert_eq!(n[0], east);
        assert!(!n.contains(&center));
    }

    #[test]
    fn corner_of_tiny_slide() {
        let idx = full(Lattice::OddRowShifted, 2, 2);
        // (0,0) sees (0,1) east and (1,0) south-east; (1,1) is two hops away.
        let n = idx.hex_neighbors(0, 0, 2).unwrap();
        assert_eq!(n.len(), 3);
        assert_eq!(&n[..2], &[1, 2]);
        assert_eq!(n[2], 3);
    }

    #[test]
    fn errors() {
        let idx = full(Lattice::OddRowShifted, 3, 3);
        assert!(matches!(
            idx.hex_neighbors(9, 9, 1),
            Err(Error::UnknownSpot { .. })
        ));
        assert!(idx.hex_neighbors(1, 1, 3).is_err());
        assert!(HexIndex::new(Lattice::OddRowShifted, [(0, 0, 0), (0, 0, 1)]).is_err());
        assert!(HexIndex::new(Lattice::Doubled, [(0, 1, 0)]).is_err());
    }
}
