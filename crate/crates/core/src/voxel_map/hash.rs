//! Cell lattice and cell hashing.

use serde::{Deserialize, Serialize};

use crate::geometry::Point3;

/// Lattice coordinates of a cell, in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl CellIndex {
    pub const fn new(ix: i64, iy: i64, iz: i64) -> Self {
        Self { ix, iy, iz }
    }

    pub fn offset(&self, dx: i64, dy: i64, dz: i64) -> Self {
        Self::new(self.ix + dx, self.iy + dy, self.iz + dz)
    }

    /// Chebyshev distance in cells.
    pub fn chebyshev(&self, other: &CellIndex) -> i64 {
        (self.ix - other.ix)
            .abs()
            .max((self.iy - other.iy).abs())
            .max((self.iz - other.iz).abs())
    }
}

/// Cell containing `p`. Cells are half-open boxes `[k·s, (k+1)·s)` per axis.
#[inline]
pub fn cell_index(p: &Point3, s_xy: f64, s_z: f64) -> CellIndex {
    CellIndex::new(
        (p.x / s_xy).floor() as i64,
        (p.y / s_xy).floor() as i64,
        (p.z / s_z).floor() as i64,
    )
}

/// Geometric centre of a cell: `index · size + size / 2`.
#[inline]
pub fn cell_center(index: &CellIndex, s_xy: f64, s_z: f64) -> Point3 {
    Point3::new(
        index.ix as f64 * s_xy + 0.5 * s_xy,
        index.iy as f64 * s_xy + 0.5 * s_xy,
        index.iz as f64 * s_z + 0.5 * s_z,
    )
}

/// Scalar pre-mix applied to each lattice coordinate: the signed value is
/// reinterpreted as two's-complement `u64` and run through one SplitMix64
/// step (golden-ratio increment, then the 30/27/31 multiply-xorshift
/// finalizer).
#[inline]
pub fn mix64(v: i64) -> u64 {
    let mut z = (v as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(h(ix) ⊕ (h(iy) << 1)) ⊕ (h(iz) << 2)`.
#[inline]
pub fn cell_hash(index: &CellIndex) -> u64 {
    (mix64(index.ix) ^ (mix64(index.iy) << 1)) ^ (mix64(index.iz) << 2)
}

/// `h(ix) + h(iy) + h(iz)` with wrapping addition; symmetric under
/// permutation of the coordinates.
#[inline]
pub fn baseline_hash(index: &CellIndex) -> u64 {
    mix64(index.ix)
        .wrapping_add(mix64(index.iy))
        .wrapping_add(mix64(index.iz))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashKind {
    #[default]
    XorShift,
    Additive,
}

impl HashKind {
    #[inline]
    pub fn key(&self, index: &CellIndex) -> u64 {
        match self {
            HashKind::XorShift => cell_hash(index),
            HashKind::Additive => baseline_hash(index),
        }
    }
}
