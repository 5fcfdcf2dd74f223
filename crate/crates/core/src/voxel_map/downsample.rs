use std::collections::HashMap;

use crate::geometry::Point3;

pub type VoxelKey = (i64, i64, i64);

#[inline]
pub fn voxel_key(p: &Point3, leaf: f64) -> VoxelKey {
    (
        (p.x / leaf).floor() as i64,
        (p.y / leaf).floor() as i64,
        (p.z / leaf).floor() as i64,
    )
}

/// Replaces the points of each occupied `leaf`-sized voxel by their centroid.
///
/// Voxels are aligned to the origin; output follows the order in which
/// voxels are first seen.
pub fn voxel_downsample(points: &[Point3], leaf: f64) -> Vec<Point3> {
    assert!(leaf > 0.0, "voxel leaf must be positive");
    let mut slot: HashMap<VoxelKey, usize> = HashMap::with_capacity(points.len());
    let mut acc: Vec<(Point3, u32)> = Vec::new();
    for p in points {
        let i = *slot.entry(voxel_key(p, leaf)).or_insert_with(|| {
            acc.push((Point3::zeros(), 0));
            acc.len() - 1
        });
        acc[i].0 += p;
        acc[i].1 += 1;
    }
    acc.into_iter().map(|(sum, n)| sum / n as f64).collect()
}
