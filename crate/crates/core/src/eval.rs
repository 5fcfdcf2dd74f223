//! Trajectory metrics (absolute trajectory error, KITTI-style relative
//! errors) and map benchmarks.

use nalgebra::{Rotation3, SymmetricEigen};
use serde::Serialize;

use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, Point3, PoseSE3};
use crate::synth::RevisitStream;
use crate::voxel_map::{
    table_entropy, EntropyReport, GlobalMap, HashKind, MapConfig, MonolithicKdMap,
};

/// Segment lengths of the KITTI protocol, meters.
pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
/// Start frames are sampled every this many frames.
pub const SEGMENT_STEP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Alignment {
    /// Full rotation + translation.
    Rigid,
    /// Reference positions collinear: the principal directions are matched.
    Line,
    /// Reference positions coincide: centroids are matched.
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AteReport {
    pub rmse: f64,
    pub frames: usize,
    pub alignment: Alignment,
}

/// ATE in meters: RMSE of position differences after rigidly aligning the
/// estimate onto the reference.
pub fn ate(estimated: &[PoseSE3], reference: &[PoseSE3]) -> Result<f64> {
    ate_report(estimated, reference).map(|r| r.rmse)
}

pub fn ate_report(estimated: &[PoseSE3], reference: &[PoseSE3]) -> Result<AteReport> {
    if estimated.len() != reference.len() {
        return Err(Error::LengthMismatch(estimated.len(), reference.len()));
    }
    if estimated.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: estimated.len(),
        });
    }
    let est: Vec<Point3> = estimated.iter().map(|p| p.translation).collect();
    let refs: Vec<Point3> = reference.iter().map(|p| p.translation).collect();
    let (g, alignment) = match umeyama_align(&est, &refs) {
        Ok(g) => (g, Alignment::Rigid),
        Err(Error::Degenerate(_)) => degenerate_alignment(&est, &refs),
        Err(e) => return Err(e),
    };
    let sq: f64 = est
        .iter()
        .zip(&refs)
        .map(|(e, r)| (g.apply(e) - r).norm_squared())
        .sum();
    Ok(AteReport {
        rmse: (sq / est.len() as f64).sqrt(),
        frames: est.len(),
        alignment,
    })
}

fn principal_direction(pts: &[Point3], mean: &Point3) -> Option<Point3> {
    let mut m = nalgebra::Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        m += d * d.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let (k, &l) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    (l > 1e-18).then(|| eig.eigenvectors.column(k).into_owned())
}

/// Straight-line paths leave the rotation about the line free; match the
/// dominant directions (sign chosen by the projection correlation), then
/// the centroids.
fn degenerate_alignment(est: &[Point3], refs: &[Point3]) -> (PoseSE3, Alignment) {
    let n = est.len() as f64;
    let me = est.iter().sum::<Point3>() / n;
    let mr = refs.iter().sum::<Point3>() / n;
    let rotation = match (
        principal_direction(est, &me),
        principal_direction(refs, &mr),
    ) {
        (Some(de), Some(dr)) => {
            let corr: f64 = est
                .iter()
                .zip(refs)
                .map(|(e, r)| (e - me).dot(&de) * (r - mr).dot(&dr))
                .sum();
            let de = if corr < 0.0 { -de } else { de };
            let r = Rotation3::rotation_between(&de, &dr).unwrap_or_else(|| {
                // Antiparallel: half turn about any perpendicular axis.
                let axis = de
                    .cross(&Point3::x())
                    .try_normalize(1e-9)
                    .unwrap_or_else(|| de.cross(&Point3::y()).normalize());
                Rotation3::new(axis * std::f64::consts::PI)
            });
            Some(*r.matrix())
        }
        _ => None,
    };
    match rotation {
        Some(rot) => (PoseSE3::new(rot, mr - rot * me), Alignment::Line),
        None => (PoseSE3::from_translation(mr - me), Alignment::Centroid),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthError {
    pub length: f64,
    pub segments: usize,
    pub translational_pct: f64,
    pub rotational_deg_per_100m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelErrorReport {
    pub translational_pct: f64,
    pub rotational_deg_per_100m: f64,
    pub segments: usize,
    /// Lengths with at least one segment.
    pub per_length: Vec<LengthError>,
    /// No segment of even the shortest length fits in the reference path.
    pub empty: bool,
}

fn cumulative_distances(poses: &[PoseSE3]) -> Vec<f64> {
    let mut d = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += (p.translation - poses[i - 1].translation).norm();
        }
        d.push(acc);
    }
    d
}

fn rotation_error(e: &PoseSE3) -> f64 {
    let d = 0.5 * (e.rotation.trace() - 1.0);
    d.clamp(-1.0, 1.0).acos()
}

/// KITTI odometry devkit protocol: for every 10th start frame and each
/// length in [`SEGMENT_LENGTHS`], take the first frame whose reference path
/// distance exceeds the length, and compare the relative motions through
/// `(Δest)⁻¹ · Δref`.
pub fn kitti_rel_errors(estimated: &[PoseSE3], reference: &[PoseSE3]) -> Result<RelErrorReport> {
    if estimated.len() != reference.len() {
        return Err(Error::LengthMismatch(estimated.len(), reference.len()));
    }
    let dist = cumulative_distances(reference);
    let mut sums = [(0usize, 0.0f64, 0.0f64); SEGMENT_LENGTHS.len()];
    for first in (0..reference.len()).step_by(SEGMENT_STEP) {
        for (k, &len) in SEGMENT_LENGTHS.iter().enumerate() {
            let target = dist[first] + len;
            let Some(last) = (first..dist.len()).find(|&j| dist[j] > target) else {
                continue;
            };
            let d_ref = reference[first].inverse() * reference[last];
            let d_est = estimated[first].inverse() * estimated[last];
            let err = d_est.inverse() * d_ref;
            sums[k].0 += 1;
            sums[k].1 += err.translation.norm() / len;
            sums[k].2 += rotation_error(&err) / len;
        }
    }
    let segments: usize = sums.iter().map(|s| s.0).sum();
    let to_deg100 = 180.0 / std::f64::consts::PI * 100.0;
    let per_length = SEGMENT_LENGTHS
        .iter()
        .zip(&sums)
        .filter(|(_, s)| s.0 > 0)
        .map(|(&length, s)| LengthError {
            length,
            segments: s.0,
            translational_pct: 100.0 * s.1 / s.0 as f64,
            rotational_deg_per_100m: to_deg100 * s.2 / s.0 as f64,
        })
        .collect();
    let (t, r) = if segments > 0 {
        let t: f64 = sums.iter().map(|s| s.1).sum();
        let r: f64 = sums.iter().map(|s| s.2).sum();
        (100.0 * t / segments as f64, to_deg100 * r / segments as f64)
    } else {
        (0.0, 0.0)
    };
    Ok(RelErrorReport {
        translational_pct: t,
        rotational_deg_per_100m: r,
        segments,
        per_length,
        empty: segments == 0,
    })
}

/// Translation of the last pose relative to the last reference pose, as a
/// fraction of the reference path length.
pub fn final_drift(estimated: &[PoseSE3], reference: &[PoseSE3]) -> Result<f64> {
    if estimated.len() != reference.len() {
        return Err(Error::LengthMismatch(estimated.len(), reference.len()));
    }
    let (Some(e), Some(r)) = (estimated.last(), reference.last()) else {
        return Err(Error::TooFewSamples { needed: 2, got: 0 });
    };
    let length = *cumulative_distances(reference).last().unwrap();
    if length <= 0.0 {
        return Err(Error::Degenerate("reference path has zero length"));
    }
    Ok((e.translation - r.translation).norm() / length)
}

/// Per-sweep map update times (ms) over a revisiting stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateTimings {
    pub hash_ms: Vec<f64>,
    /// Empty unless the baseline was timed.
    pub kd_ms: Vec<f64>,
}

/// Median of the first and the last tenth of a series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecileTrend {
    pub first_ms: f64,
    pub last_ms: f64,
    pub ratio: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn decile_trend(series: &[f64]) -> Result<DecileTrend> {
    let n = series.len() / 10;
    if n == 0 {
        return Err(Error::TooFewSamples {
            needed: 10,
            got: series.len(),
        });
    }
    let first = median(&series[..n]).unwrap_or(0.0);
    let last = median(&series[series.len() - n..]).unwrap_or(0.0);
    Ok(DecileTrend {
        first_ms: first,
        last_ms: last,
        ratio: if first > 0.0 {
            last / first
        } else {
            f64::INFINITY
        },
    })
}

/// Times `GlobalMap::update` (and optionally a k-d tree rebuilt from every
/// point) for each of the first `sweeps` batches of `stream`.
pub fn map_update_timings(
    stream: &RevisitStream,
    sweeps: usize,
    cfg: MapConfig,
    baseline: bool,
) -> UpdateTimings {
    let mut map = GlobalMap::new(cfg);
    let mut kd = MonolithicKdMap::new();
    let mut out = UpdateTimings {
        hash_ms: Vec::with_capacity(sweeps),
        kd_ms: Vec::new(),
    };
    for i in 0..sweeps {
        let batch = stream.sweep(i);
        let t = Instant::now();
        map.update(&batch);
        out.hash_ms.push(t.elapsed().as_secs_f64() * 1e3);
        if baseline {
            let t = Instant::now();
            kd.update(&batch);
            out.kd_ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    out
}

/// Bucket-occupancy entropy after inserting the first `sweeps` batches of
/// `stream` into a map keyed by `hash`.
pub fn stream_entropy(
    stream: &RevisitStream,
    sweeps: usize,
    cfg: MapConfig,
    hash: HashKind,
) -> Result<(usize, EntropyReport)> {
    let mut map = GlobalMap::new(MapConfig { hash, ..cfg });
    let mut inserted = 0;
    for i in 0..sweeps {
        let batch = stream.sweep(i);
        inserted += batch.len();
        map.update(&batch);
    }
    Ok((inserted, table_entropy(&map)?))
}
