//! Pose optimization against the local map with weighted point-to-line
//! residuals.

mod lm;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use lm::{
    huber_rho, huber_rho_derivative, solve, total_cost, JacobianMode, LineResidual, LmReport,
    LmSettings,
};

use crate::error::{Error, Result};
use crate::features::EdgeSet;
use crate::geometry::{Point3, PoseSE3};
use crate::voxel_map::LocalMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Correspondence search + solve rounds.
    pub outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub initial_damping: f64,
    /// Relative cost decrease below which LM stops.
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    /// `λ_max ≥ eigen_ratio · λ_second` accepts a neighbourhood as a line.
    pub eigen_ratio: f64,
    pub knn_k: usize,
    pub huber_delta: f64,
    /// When false every correspondence gets weight 1.
    pub use_weighting: bool,
    pub jacobian: JacobianMode,
    /// Range bounds of the weighting term; mirrored from the sweep config.
    #[serde(skip)]
    pub r_min: f64,
    #[serde(skip)]
    pub r_max: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 2,
            max_inner_iterations: 25,
            initial_damping: 1e-4,
            cost_tolerance: 1e-8,
            step_tolerance: 1e-10,
            eigen_ratio: 3.0,
            knn_k: 5,
            huber_delta: 0.3,
            use_weighting: true,
            jacobian: JacobianMode::Analytic,
            r_min: 3.0,
            r_max: 75.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iterations < 1 || self.max_inner_iterations < 1 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
        }
        if self.knn_k < 2 {
            return Err(Error::Config("knn_k must be >= 2".into()));
        }
        if !(self.eigen_ratio > 0.0 && self.huber_delta > 0.0 && self.initial_damping > 0.0) {
            return Err(Error::Config(
                "eigen_ratio, huber_delta and initial_damping must be positive".into(),
            ));
        }
        if !(self.cost_tolerance > 0.0 && self.step_tolerance > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !(self.r_min >= 0.0 && self.r_min < self.r_max) {
            return Err(Error::InvalidInterval {
                r_min: self.r_min,
                r_max: self.r_max,
            });
        }
        Ok(())
    }

    pub fn lm_settings(&self) -> LmSettings {
        LmSettings {
            max_iterations: self.max_inner_iterations,
            initial_damping: self.initial_damping,
            cost_tolerance: self.cost_tolerance,
            step_tolerance: self.step_tolerance,
            huber_delta: self.huber_delta,
            jacobian: self.jacobian,
        }
    }
}

/// A validated point-to-line match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: Point3,
    pub world: Point3,
    pub n1: Point3,
    pub n2: Point3,
    pub weight: f64,
    pub distance: f64,
    pub residual: f64,
}

impl Correspondence {
    pub fn residual_block(&self) -> LineResidual {
        LineResidual::new(self.source, self.n1, self.n2, self.weight)
    }
}

/// Line test on a neighbourhood ordered by ascending distance: accepted when
/// the largest eigenvalue of the mean-centred scatter matrix is at least
/// `ratio` times the second largest. Returns the two nearest points as the
/// line anchors.
pub fn line_fit(neighbors: &[Point3], ratio: f64) -> Result<Option<(Point3, Point3)>> {
    if neighbors.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: neighbors.len(),
        });
    }
    let n = neighbors.len() as f64;
    let mean = neighbors.iter().sum::<Point3>() / n;
    let mut scatter = Matrix3::zeros();
    for p in neighbors {
        let d = p - mean;
        scatter += d * d.transpose();
    }
    scatter /= n;
    let mut ev: Vec<f64> = SymmetricEigen::new(scatter)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 {
        return Err(Error::Degenerate("neighbours coincide"));
    }
    let (n1, n2) = (neighbors[0], neighbors[1]);
    if (n1 - n2).norm() < 1e-12 {
        return Err(Error::Degenerate("line anchors coincide"));
    }
    let second = ev[1].max(0.0);
    Ok((ev[0] >= ratio * second).then_some((n1, n2)))
}

/// `‖(p − n1) × (n1 − n2)‖ / ‖n1 − n2‖`.
pub fn point_to_line_distance(p: &Point3, n1: &Point3, n2: &Point3) -> Result<f64> {
    let n12 = n1 - n2;
    let len = n12.norm();
    if len < 1e-12 {
        return Err(Error::Degenerate("line anchors coincide"));
    }
    Ok((p - n1).cross(&n12).norm() / len)
}

/// `1 − (r − r_min) / (r_max − r_min)`.
pub fn residual_weight(range: f64, r_min: f64, r_max: f64) -> Result<f64> {
    if !(r_min < r_max) {
        return Err(Error::InvalidInterval { r_min, r_max });
    }
    if !(range >= r_min && range <= r_max) {
        return Err(Error::OutOfRange {
            range,
            r_min,
            r_max,
        });
    }
    Ok(1.0 - (range - r_min) / (r_max - r_min))
}

pub fn weighted_residual(corr: &Correspondence) -> f64 {
    corr.weight * corr.distance
}

/// Projects every edge with `pose`, searches `knn_k` neighbours, and keeps
/// the edges whose neighbourhood passes [`line_fit`]. Output follows edge
/// order.
pub fn build_correspondences(
    edges: &EdgeSet,
    pose: &PoseSE3,
    local: &LocalMap,
    cfg: &OptimizerConfig,
) -> Vec<Correspondence> {
    let mut out = Vec::new();
    if local.len() < cfg.knn_k {
        return out;
    }
    for e in &edges.edges {
        let world = pose.apply(&e.position);
        let nn = local.knn(&world, cfg.knn_k);
        if nn.short {
            continue;
        }
        let Ok(Some((n1, n2))) = line_fit(&nn.points, cfg.eigen_ratio) else {
            continue;
        };
        let weight = if cfg.use_weighting {
            match residual_weight(e.range, cfg.r_min, cfg.r_max) {
                Ok(w) => w,
                Err(_) => continue,
            }
        } else {
            1.0
        };
        let Ok(distance) = point_to_line_distance(&world, &n1, &n2) else {
            continue;
        };
        out.push(Correspondence {
            source: e.position,
            world,
            n1,
            n2,
            weight,
            distance,
            residual: weight * distance,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveReport {
    pub final_cost: f64,
    /// Correspondence count of each outer iteration.
    pub correspondences: Vec<usize>,
    /// LM report of each outer iteration.
    pub inner: Vec<LmReport>,
    pub converged: bool,
    /// No correspondences in the first outer iteration; the initial guess
    /// was returned unchanged.
    pub degenerate: bool,
}

impl SolveReport {
    pub fn inner_iterations(&self) -> Vec<usize> {
        self.inner.iter().map(|r| r.iterations).collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.inner.iter().all(LmReport::is_monotone)
    }

    pub fn last_correspondences(&self) -> usize {
        self.correspondences.last().copied().unwrap_or(0)
    }
}

/// Runs `outer_iterations` rounds of correspondence search followed by a
/// Levenberg–Marquardt solve of `½ Σ ρ(‖ϱ‖²)`.
pub fn optimize_pose(
    edges: &EdgeSet,
    local: &LocalMap,
    initial_guess: PoseSE3,
    cfg: &OptimizerConfig,
) -> (PoseSE3, SolveReport) {
    let mut pose = initial_guess;
    let mut report = SolveReport::default();
    let settings = cfg.lm_settings();
    for outer in 0..cfg.outer_iterations {
        let corr = build_correspondences(edges, &pose, local, cfg);
        report.correspondences.push(corr.len());
        if corr.is_empty() {
            if outer == 0 {
                report.degenerate = true;
                return (initial_guess, report);
            }
            break;
        }
        let blocks: Vec<LineResidual> = corr.iter().map(Correspondence::residual_block).collect();
        let (next, lm) = solve(&blocks, pose, &settings);
        pose = next;
        report.final_cost = lm.final_cost;
        report.converged = lm.converged;
        report.inner.push(lm);
    }
    (pose.orthonormalized(), report)
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;
    use proptest::prelude::*;

    use super::*;
    use crate::features::EdgePoint;

    #[test]
    fn line_fit_examples() {
        let line: Vec<Point3> = (0..5)
            .map(|i| Point3::new(0.1 * i as f64, 0.0, 0.0))
            .collect();
        let (n1, n2) = line_fit(&line, 3.0).unwrap().unwrap();
        assert_eq!((n1, n2), (line[0], line[1]));

        // Square corners + centre: scatter = diag(0.4, 0.4, 0), isotropic in-plane.
        let square = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(1.0, -1.0, 0.0),
            Point3::new(-1.0, 1.0, 0.0),
            Point3::new(-1.0, -1.0, 0.0),
        ];
        assert_eq!(line_fit(&square, 3.0).unwrap(), None);

        let same = [Point3::new(1.0, 2.0, 3.0); 5];
        assert!(matches!(line_fit(&same, 3.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn distance_examples() {
        let o = Point3::zeros();
        assert_eq!(
            point_to_line_distance(&Point3::new(0.0, 0.0, 1.0), &o, &Point3::x()).unwrap(),
            1.0
        );
        assert_eq!(
            point_to_line_distance(&Point3::new(7.0, 0.0, 0.0), &o, &Point3::x()).unwrap(),
            0.0
        );
        // (3,4,0) × (0,0,-1) = (-4, 3, 0), norm 5.
        assert!(
            (point_to_line_distance(&Point3::new(3.0, 4.0, 0.0), &o, &Point3::z()).unwrap() - 5.0)
                .abs()
                < 1e-15
        );
        assert!(point_to_line_distance(&Point3::x(), &o, &Point3::new(1e-13, 0.0, 0.0)).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(residual_weight(3.0, 3.0, 75.0).unwrap(), 1.0);
        assert_eq!(residual_weight(75.0, 3.0, 75.0).unwrap(), 0.0);
        assert_eq!(residual_weight(39.0, 3.0, 75.0).unwrap(), 0.5);
        assert!(matches!(
            residual_weight(80.0, 3.0, 75.0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(residual_weight(10.0, 5.0, 5.0).is_err());
    }

    fn corr(weight: f64, distance: f64) -> Correspondence {
        Correspondence {
            source: Point3::zeros(),
            world: Point3::zeros(),
            n1: Point3::zeros(),
            n2: Point3::x(),
            weight,
            distance,
            residual: weight * distance,
        }
    }

    #[test]
    fn weighted_residual_examples() {
        assert_eq!(weighted_residual(&corr(1.0, 0.3)), 0.3);
        assert_eq!(weighted_residual(&corr(0.0, 12.0)), 0.0);
        assert_eq!(weighted_residual(&corr(0.5, 2.0)), 1.0);
    }

    fn edge(p: Point3) -> EdgePoint {
        EdgePoint {
            position: p,
            curvature: 1.0,
            range: p.norm(),
            beam: 0,
            sector: 0,
            index: 0,
        }
    }

    #[test]
    fn correspondence_examples() {
        let local = LocalMap::from_points(
            (0..20).map(|i| Point3::new(10.0, 0.0, -1.0 + 0.1 * i as f64)),
            0,
        );
        let cfg = OptimizerConfig::default();
        assert!(
            build_correspondences(&EdgeSet::default(), &PoseSE3::identity(), &local, &cfg)
                .is_empty()
        );

        let edges = EdgeSet {
            sweep_index: 1,
            edges: vec![edge(Point3::new(10.2, 0.0, 0.0))],
        };
        let c = build_correspondences(&edges, &PoseSE3::identity(), &local, &cfg);
        assert_eq!(c.len(), 1);
        assert!((c[0].distance - 0.2).abs() < 1e-12);
        assert!((c[0].residual - c[0].weight * c[0].distance).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&c[0].weight));
    }

    #[test]
    fn empty_local_map_is_degenerate() {
        let edges = EdgeSet {
            sweep_index: 1,
            edges: vec![edge(Point3::new(10.0, 0.0, 0.0))],
        };
        let guess = PoseSE3::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let (pose, rep) = optimize_pose(
            &edges,
            &LocalMap::default(),
            guess,
            &OptimizerConfig::default(),
        );
        assert_eq!(pose, guess);
        assert!(rep.degenerate);
    }

    /// Dense samples on random, mutually oblique segments spread around the
    /// sensor, plus sparser samples of the same segments as edges.
    fn line_scene(seed: u64) -> (Vec<Point3>, Vec<Point3>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (mut map, mut edges) = (Vec::new(), Vec::new());
        for _ in 0..40 {
            let r = rng.random_range(5.0..30.0);
            let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let c = Point3::new(r * az.cos(), r * az.sin(), rng.random_range(-1.0..1.0));
            let d = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            for k in -40..=40 {
                map.push(c + d * (0.05 * k as f64));
            }
            for _ in 0..8 {
                edges.push(c + d * rng.random_range(-1.5..1.5));
            }
        }
        (map, edges)
    }

    fn edge_set(world: &[Point3], pose: &PoseSE3) -> EdgeSet {
        let inv = pose.inverse();
        EdgeSet {
            sweep_index: 1,
            edges: world.iter().map(|p| edge(inv.apply(p))).collect(),
        }
    }

    #[test]
    fn recovers_perturbed_pose_on_exact_lines() {
        let (map, world_edges) = line_scene(3);
        let local = LocalMap::from_points(map, 0);
        let truth = PoseSE3::from_euler(0.02, -0.01, 0.4, Vector3::new(1.0, -2.0, 0.3));
        let edges = edge_set(&world_edges, &truth);
        let guess = PoseSE3::from_axis_angle(
            Vector3::new(0.3, -0.5, 1.0).normalize() * 2f64.to_radians(),
            Vector3::zeros(),
        ) * PoseSE3::from_translation(Vector3::new(0.12, -0.1, 0.12))
            * truth;
        let cfg = OptimizerConfig {
            outer_iterations: 4,
            ..OptimizerConfig::default()
        };
        let (pose, rep) = optimize_pose(&edges, &local, guess, &cfg);
        let err = truth.inverse() * pose;
        assert!(
            err.translation.norm() < 1e-3,
            "translation error {}",
            err.translation.norm()
        );
        assert!(
            err.rotation_angle().to_degrees() < 0.01,
            "rotation error {}",
            err.rotation_angle().to_degrees()
        );
        assert!(rep.is_monotone());
        assert!(!rep.degenerate);
    }

    #[test]
    fn exact_scene_is_a_fixed_point() {
        let (map, world_edges) = line_scene(4);
        let local = LocalMap::from_points(map, 0);
        let truth = PoseSE3::from_euler(0.0, 0.0, -1.0, Vector3::new(0.5, 0.5, 0.0));
        let edges = edge_set(&world_edges, &truth);
        let (pose, rep) = optimize_pose(&edges, &local, truth, &OptimizerConfig::default());
        assert!(rep.final_cost < 1e-12, "cost {}", rep.final_cost);
        assert!(pose.max_abs_diff(&truth) < 1e-9);
    }

    #[test]
    fn rigid_motion_of_scene_and_pose_commutes() {
        let (map, world_edges) = line_scene(5);
        let truth = PoseSE3::from_euler(0.0, 0.0, 0.2, Vector3::new(1.0, 0.0, 0.0));
        let guess = PoseSE3::from_translation(Vector3::new(0.1, 0.05, 0.0)) * truth;
        let edges = edge_set(&world_edges, &truth);
        let cfg = OptimizerConfig::default();
        let (a, _) = optimize_pose(&edges, &LocalMap::from_points(map.clone(), 0), guess, &cfg);

        let g = PoseSE3::from_euler(0.1, 0.2, 2.0, Vector3::new(-5.0, 3.0, 1.0));
        let moved: Vec<Point3> = map.iter().map(|p| g.apply(p)).collect();
        let (b, _) = optimize_pose(&edges, &LocalMap::from_points(moved, 0), g * guess, &cfg);
        assert!((g * a).max_abs_diff(&b) < 1e-6);
    }

    proptest! {
        #[test]
        fn line_fit_scale_invariant(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 5),
            s in 0.01f64..100.0,
        ) {
            let pts: Vec<Point3> = pts.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect();
            let mean = pts.iter().sum::<Point3>() / 5.0;
            let mut ev: Vec<f64> = {
                let mut m = Matrix3::zeros();
                for p in &pts { let d = p - mean; m += d * d.transpose(); }
                SymmetricEigen::new(m).eigenvalues.iter().copied().collect()
            };
            ev.sort_by(|a, b| b.total_cmp(a));
            prop_assume!((ev[0] - 3.0 * ev[1]).abs() > 1e-6 * ev[0]);
            let scaled: Vec<Point3> = pts.iter().map(|p| mean + (p - mean) * s).collect();
            let a = line_fit(&pts, 3.0).unwrap().is_some();
            let b = line_fit(&scaled, 3.0).unwrap().is_some();
            prop_assert_eq!(a, b);
        }
    }
}
