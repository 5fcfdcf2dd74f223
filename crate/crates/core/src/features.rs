//! Edge feature extraction.
//!
//! Each scan is scored with a range-normalized curvature, split into equal
//! azimuth sectors, and the highest-curvature points of each sector are
//! selected greedily with non-maxima suppression along the scan.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::sweep_io::{Scan, Sweep};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sectors: usize,
    pub edges_per_sector: usize,
    /// Neighbours on each side of a point used for its curvature.
    pub curvature_half_width: usize,
    /// Index distance within which an accepted edge suppresses candidates.
    /// Defaults to `curvature_half_width`.
    pub suppression_half_width: Option<usize>,
    /// Candidates below this curvature are never selected.
    pub min_curvature: f64,
    /// Treat each scan as circular across the 360° seam.
    pub wrap_around: bool,
    /// Use `‖Σ(p_j − p_k)‖` instead of `Σ‖p_j − p_k‖`.
    pub loam_style_curvature: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sectors: 8,
            edges_per_sector: 10,
            curvature_half_width: 5,
            suppression_half_width: None,
            min_curvature: 0.01,
            wrap_around: false,
            loam_style_curvature: false,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sectors == 0 || self.curvature_half_width == 0 {
            return Err(Error::Config(
                "sectors and curvature_half_width must be >= 1".into(),
            ));
        }
        if !(self.min_curvature >= 0.0) {
            return Err(Error::Config("min_curvature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> CurvatureWindow {
        CurvatureWindow {
            half_width: self.curvature_half_width,
        }
    }

    pub fn suppression(&self) -> usize {
        self.suppression_half_width
            .unwrap_or(self.curvature_half_width)
    }
}

/// Half-width `m` of the neighbourhood: `2m` neighbours per point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurvatureWindow {
    pub half_width: usize,
}

impl CurvatureWindow {
    pub fn new(half_width: usize) -> Result<Self> {
        if half_width == 0 {
            return Err(Error::Config("curvature half-width must be >= 1".into()));
        }
        Ok(Self { half_width })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePoint {
    /// Sensor-frame position.
    pub position: Point3,
    pub curvature: f64,
    /// Sensor range `‖position‖`.
    pub range: f64,
    pub beam: u32,
    pub sector: usize,
    /// Index of the point within its scan.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeSet {
    pub sweep_index: usize,
    pub edges: Vec<EdgePoint>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Point3> + '_ {
        self.edges.iter().map(|e| e.position)
    }
}

fn neighbour(index: usize, offset: isize, len: usize, wrap: bool) -> Option<usize> {
    let j = index as isize + offset;
    if wrap {
        Some(j.rem_euclid(len as isize) as usize)
    } else if j < 0 || j >= len as isize {
        None
    } else {
        Some(j as usize)
    }
}

/// Curvature of point `index` without wrap-around.
pub fn curvature(scan: &Scan, index: usize, window: CurvatureWindow) -> Result<f64> {
    curvature_with(scan, index, window, false, false)
}

/// `c_j = Σ_{k∈Ω} ‖p_j − p_k‖ / (2m · ‖p_j‖)` over the `2m` scan neighbours of `j`
/// (or `‖Σ (p_j − p_k)‖ / (2m · ‖p_j‖)` in LOAM style).
pub fn curvature_with(
    scan: &Scan,
    index: usize,
    window: CurvatureWindow,
    wrap: bool,
    loam_style: bool,
) -> Result<f64> {
    let m = window.half_width;
    let len = scan.points.len();
    let err = Error::InsufficientNeighbors {
        index,
        needed: m,
        len,
    };
    if index >= len || (wrap && len < 2 * m + 1) {
        return Err(err);
    }
    let pj = scan.points[index].position;
    let mut sum_norms = 0.0;
    let mut sum_vec = Point3::zeros();
    for off in (-(m as isize)..=m as isize).filter(|&o| o != 0) {
        let k = neighbour(index, off, len, wrap).ok_or(Error::InsufficientNeighbors {
            index,
            needed: m,
            len,
        })?;
        let d = pj - scan.points[k].position;
        sum_norms += d.norm();
        sum_vec += d;
    }
    let numerator = if loam_style {
        sum_vec.norm()
    } else {
        sum_norms
    };
    let range = pj.norm();
    if range == 0.0 {
        return Err(Error::Degenerate(
            "curvature of a point at the sensor origin",
        ));
    }
    Ok(numerator / ((2 * m) as f64 * range))
}

/// Sector of an azimuth angle (radians) among `sectors` equal slices of
/// `[-π, π)`.
pub fn sector_of(azimuth: f64, sectors: usize) -> usize {
    let s = ((azimuth + PI) / (2.0 * PI) * sectors as f64).floor();
    (s.max(0.0) as usize).min(sectors - 1)
}

/// A scored point eligible for selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub curvature: f64,
    pub sector: usize,
}

/// Greedy per-sector selection with non-maxima suppression.
///
/// Sectors are visited in ascending order; within a sector candidates are
/// taken by decreasing curvature (lower index first on ties) and rejected if
/// an already accepted point of the scan lies within `suppression` indices.
/// Returns accepted candidates in acceptance order.
pub fn select_edges(
    candidates: &[Candidate],
    scan_len: usize,
    cfg: &FeatureConfig,
) -> Vec<Candidate> {
    let suppression = cfg.suppression();
    let mut taken = vec![false; scan_len];
    let mut accepted = Vec::new();

    let mut by_sector: Vec<Vec<Candidate>> = vec![Vec::new(); cfg.sectors];
    for c in candidates {
        by_sector[c.sector.min(cfg.sectors - 1)].push(*c);
    }

    for mut sector in by_sector {
        sector.sort_by(|a, b| {
            b.curvature
                .total_cmp(&a.curvature)
                .then(a.index.cmp(&b.index))
        });
        let mut count = 0;
        for c in sector {
            if count >= cfg.edges_per_sector || c.curvature < cfg.min_curvature {
                break;
            }
            let blocked = (-(suppression as isize)..=suppression as isize)
                .filter_map(|o| neighbour(c.index, o, scan_len, cfg.wrap_around))
                .any(|k| taken[k]);
            if blocked {
                continue;
            }
            taken[c.index] = true;
            accepted.push(c);
            count += 1;
        }
    }
    accepted
}

fn scan_candidates(scan: &Scan, cfg: &FeatureConfig) -> Vec<Candidate> {
    let window = cfg.window();
    (0..scan.points.len())
        .filter_map(|i| {
            let c =
                curvature_with(scan, i, window, cfg.wrap_around, cfg.loam_style_curvature).ok()?;
            c.is_finite().then(|| Candidate {
                index: i,
                curvature: c,
                sector: sector_of(scan.points[i].azimuth(), cfg.sectors),
            })
        })
        .collect()
}

/// Edge set of a range-filtered sweep, ordered by `(beam, sector, index)`.
pub fn extract_edges(sweep: &Sweep, cfg: &FeatureConfig) -> EdgeSet {
    let mut edges = Vec::new();
    for scan in &sweep.scans {
        let candidates = scan_candidates(scan, cfg);
        for c in select_edges(&candidates, scan.points.len(), cfg) {
            let position = scan.points[c.index].position;
            edges.push(EdgePoint {
                position,
                curvature: c.curvature,
                range: position.norm(),
                beam: scan.beam,
                sector: c.sector,
                index: c.index,
            });
        }
    }
    edges.sort_by_key(|e| (e.beam, e.sector, e.index));
    EdgeSet {
        sweep_index: sweep.index,
        edges,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::sweep_io::RawPoint;

    fn scan_of(points: &[Point3]) -> Scan {
        Scan {
            beam: 0,
            points: points
                .iter()
                .map(|p| RawPoint::new(p.x, p.y, p.z, 0.0))
                .collect(),
        }
    }

    #[test]
    fn curvature_zero_spread() {
        let pts = vec![Point3::new(5.0, 1.0, 0.0); 11];
        let c = curvature(&scan_of(&pts), 5, CurvatureWindow::new(5).unwrap()).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn curvature_hand_evaluated() {
        // p_j = (2,0,0); four neighbours at unit distance: (1/(4·2))·4 = 0.5.
        let pts = vec![
            Point3::new(2.0, 1.0, 0.0),
            Point3::new(2.0, 0.0, 1.0),
            Point3::new(2.0, 0.0, 0.0),
            Point3::new(2.0, -1.0, 0.0),
            Point3::new(3.0, 0.0, 0.0),
        ];
        let c = curvature(&scan_of(&pts), 2, CurvatureWindow::new(2).unwrap()).unwrap();
        assert!((c - 0.5).abs() < 1e-15);
    }

    #[test]
    fn curvature_scale_invariant() {
        let pts: Vec<Point3> = (0..11)
            .map(|i| {
                Point3::new(
                    10.0 + (i as f64 * 0.7).sin(),
                    i as f64 * 0.2,
                    0.3 * (i % 3) as f64,
                )
            })
            .collect();
        let w = CurvatureWindow::new(5).unwrap();
        let c = curvature(&scan_of(&pts), 5, w).unwrap();
        for s in [0.01, 0.5, 3.0, 1000.0] {
            let scaled: Vec<Point3> = pts.iter().map(|p| p * s).collect();
            let cs = curvature(&scan_of(&scaled), 5, w).unwrap();
            assert!((c - cs).abs() < 1e-12 * c.max(1.0), "{c} vs {cs}");
        }
    }

    #[test]
    fn curvature_window_bounds() {
        let pts: Vec<Point3> = (0..8).map(|i| Point3::new(10.0, i as f64, 0.0)).collect();
        let scan = scan_of(&pts);
        let w = CurvatureWindow::new(3).unwrap();
        assert!(matches!(
            curvature(&scan, 2, w),
            Err(Error::InsufficientNeighbors { .. })
        ));
        assert!(curvature(&scan, 3, w).is_ok());
        assert!(curvature_with(&scan, 0, w, true, false).is_ok());
        assert!(CurvatureWindow::new(0).is_err());
    }

    #[test]
    fn loam_style_cancels_symmetric_spread() {
        let pts: Vec<Point3> = (0..5)
            .map(|i| Point3::new(10.0, i as f64 - 2.0, 0.0))
            .collect();
        let w = CurvatureWindow::new(2).unwrap();
        let loam = curvature_with(&scan_of(&pts), 2, w, false, true).unwrap();
        assert!(loam.abs() < 1e-15);
        let expected_form = curvature(&scan_of(&pts), 2, w).unwrap();
        assert!((expected_form - 6.0 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn empty_sweep_yields_no_edges() {
        let e = extract_edges(&Sweep::empty(3, 0.0), &FeatureConfig::default());
        assert!(e.is_empty());
        assert_eq!(e.sweep_index, 3);
    }

    #[test]
    fn ten_largest_of_thirty_spread_candidates() {
        let cfg = FeatureConfig::default();
        let cands: Vec<Candidate> = (0..30)
            .map(|k| Candidate {
                index: k * 7,
                curvature: 0.02 + ((k * 13) % 30) as f64 * 0.01,
                sector: 2,
            })
            .collect();
        let sel = select_edges(&cands, 30 * 7, &cfg);
        assert_eq!(sel.len(), 10);
        let mut expected: Vec<f64> = cands.iter().map(|c| c.curvature).collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        let got: Vec<f64> = sel.iter().map(|c| c.curvature).collect();
        assert_eq!(got, expected[..10].to_vec());
    }

    #[test]
    fn adjacent_maxima_are_suppressed() {
        // 20-point scan; indices 9 and 10 hold the two highest scores.
        let mut curv = [0.0; 20];
        for (i, c) in curv.iter_mut().enumerate() {
            *c = 0.02 + 0.001 * i as f64;
        }
        curv[9] = 1.0;
        curv[10] = 0.9;
        curv[2] = 0.5;
        let cands: Vec<Candidate> = curv
            .iter()
            .enumerate()
            .map(|(i, &c)| Candidate {
                index: i,
                curvature: c,
                sector: 0,
            })
            .collect();
        let cfg = FeatureConfig {
            suppression_half_width: Some(1),
            edges_per_sector: 2,
            ..Default::default()
        };
        let sel = select_edges(&cands, 20, &cfg);
        let idx: Vec<usize> = sel.iter().map(|c| c.index).collect();
        assert_eq!(idx, oracle_greedy(&cands, 20, &cfg));
        // Third-highest score (index 2) follows the top one.
        assert_eq!(idx, vec![9, 2]);
    }

    #[test]
    fn min_curvature_gate() {
        let cands = vec![
            Candidate {
                index: 0,
                curvature: 0.005,
                sector: 0,
            },
            Candidate {
                index: 10,
                curvature: 0.02,
                sector: 0,
            },
        ];
        let sel = select_edges(&cands, 20, &FeatureConfig::default());
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].index, 10);
    }

    #[test]
    fn sector_boundaries() {
        assert_eq!(sector_of(-PI, 8), 0);
        assert_eq!(sector_of(PI, 8), 7);
        assert_eq!(sector_of(0.0, 8), 4);
        assert_eq!(sector_of(-1e-9, 8), 3);
    }

    /// Independent brute force: repeatedly pick the best remaining admissible
    /// candidate of each sector.
    fn oracle_greedy(cands: &[Candidate], len: usize, cfg: &FeatureConfig) -> Vec<usize> {
        let sup = cfg.suppression() as isize;
        let mut accepted: Vec<usize> = Vec::new();
        for s in 0..cfg.sectors {
            let mut pool: Vec<Candidate> =
                cands.iter().filter(|c| c.sector == s).copied().collect();
            let mut count = 0;
            while count < cfg.edges_per_sector {
                let mut best: Option<Candidate> = None;
                for c in &pool {
                    if c.curvature < cfg.min_curvature {
                        continue;
                    }
                    let near = accepted.iter().any(|&a| {
                        let d = (a as isize - c.index as isize).abs();
                        let d = if cfg.wrap_around {
                            d.min(len as isize - d)
                        } else {
                            d
                        };
                        d <= sup
                    });
                    if near {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some(b) => {
                            c.curvature > b.curvature
                                || (c.curvature == b.curvature && c.index < b.index)
                        }
                    };
                    if better {
                        best = Some(*c);
                    }
                }
                match best {
                    Some(b) => {
                        accepted.push(b.index);
                        pool.retain(|c| c.index != b.index);
                        count += 1;
                    }
                    None => break,
                }
            }
        }
        accepted
    }

    fn arb_scan() -> impl Strategy<Value = Vec<Point3>> {
        prop::collection::vec((2.0f64..40.0, -3.0f64..3.0), 12..50).prop_map(|v| {
            let n = v.len();
            v.into_iter()
                .enumerate()
                .map(|(i, (r, z))| {
                    let a = -PI + 2.0 * PI * (i as f64 + 0.5) / n as f64;
                    Point3::new(r * a.cos(), r * a.sin(), z)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn selection_matches_brute_force(points in arb_scan(), sup in 0usize..4, per in 1usize..5, wrap in any::<bool>()) {
            let cfg = FeatureConfig {
                sectors: 3,
                edges_per_sector: per,
                curvature_half_width: 2,
                suppression_half_width: Some(sup),
                wrap_around: wrap,
                ..Default::default()
            };
            let scan = scan_of(&points);
            let cands = scan_candidates(&scan, &cfg);
            let sel: Vec<usize> = select_edges(&cands, points.len(), &cfg).iter().map(|c| c.index).collect();
            prop_assert_eq!(sel, oracle_greedy(&cands, points.len(), &cfg));
        }

        #[test]
        fn edge_set_bounds_and_determinism(scans in prop::collection::vec(arb_scan(), 1..4)) {
            let cfg = FeatureConfig { sectors: 4, edges_per_sector: 3, min_curvature: 0.0, ..Default::default() };
            let sweep = Sweep {
                index: 0,
                timestamp: 0.0,
                scans: scans.iter().enumerate().map(|(b, pts)| Scan { beam: b as u32, ..scan_of(pts) }).collect(),
                dropped: 0,
            };
            let a = extract_edges(&sweep, &cfg);
            let b = extract_edges(&sweep, &cfg);
            prop_assert_eq!(&a, &b);
            prop_assert!(a.len() <= scans.len() * cfg.sectors * cfg.edges_per_sector);
            for beam in 0..scans.len() as u32 {
                let mut idx: Vec<usize> = a.edges.iter().filter(|e| e.beam == beam).map(|e| e.index).collect();
                idx.sort();
                for w in idx.windows(2) {
                    prop_assert!(w[1] - w[0] > cfg.suppression());
                }
                for s in 0..cfg.sectors {
                    let n = a.edges.iter().filter(|e| e.beam == beam && e.sector == s).count();
                    prop_assert!(n <= cfg.edges_per_sector);
                }
            }
        }
    }
}
