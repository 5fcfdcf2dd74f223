//! Raycast simulator for desk-scale worlds with exact ground truth.
//!
//! A world is a set of vertical poles and oriented boxes, optional floor and
//! ceiling planes, a scripted sensor trajectory and a uniform multi-beam
//! sensor. Worlds are described by versioned TOML files ([`WorldSpec`]).

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PoseSE3};
use crate::sweep_io::{split_scans, write_kitti_bin, BeamModel, RawPoint, Sweep, SweepConfig};

pub const WORLD_SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    pub beams: u32,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Rays per revolution and beam.
    pub azimuth_steps: u32,
    pub max_range: f64,
    /// Sweep period in seconds.
    pub period: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            beams: 16,
            elevation_min_deg: -15.0,
            elevation_max_deg: 15.0,
            azimuth_steps: 3600,
            max_range: 100.0,
            period: 0.1,
        }
    }
}

impl SensorSpec {
    pub fn beam_model(&self) -> BeamModel {
        BeamModel::Uniform {
            beams: self.beams,
            min_deg: self.elevation_min_deg,
            max_deg: self.elevation_max_deg,
        }
    }

    /// Beam elevations sit at the centres of the uniform bins so a pure
    /// elevation binning recovers the ring index.
    pub fn elevations(&self) -> Vec<f64> {
        let m = self.beam_model();
        (0..self.beams)
            .map(|b| m.bin_center_deg(b).unwrap().to_radians())
            .collect()
    }

    /// Ingest settings matching this sensor.
    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            beam_count: self.beams,
            elevation_min_deg: self.elevation_min_deg,
            elevation_max_deg: self.elevation_max_deg,
            ..SweepConfig::default()
        }
    }
}

/// Gaussian range noise, `sigma` up to `far_range` and
/// `far_factor · sigma` beyond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub far_range: f64,
    pub far_factor: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma: 0.02,
            far_range: f64::INFINITY,
            far_factor: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn sigma_at(&self, range: f64) -> f64 {
        if range > self.far_range {
            self.sigma * self.far_factor
        } else {
            self.sigma
        }
    }
}

/// Vertical cylinder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pole {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

/// Box with half extents along its own axes, rotated by roll/pitch/yaw
/// (radians) about its centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub pitch: f64,
    #[serde(default)]
    pub roll: f64,
}

impl BoxSpec {
    pub fn axis_aligned(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            center: [
                (min[0] + max[0]) / 2.0,
                (min[1] + max[1]) / 2.0,
                (min[2] + max[2]) / 2.0,
            ],
            half_extents: [
                (max[0] - min[0]) / 2.0,
                (max[1] - min[1]) / 2.0,
                (max[2] - min[2]) / 2.0,
            ],
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
        }
    }

    /// Thin bar of square section `width` between two points.
    pub fn bar(a: Point3, b: Point3, width: f64) -> Self {
        let d = b - a;
        let c = (a + b) / 2.0;
        let yaw = d.y.atan2(d.x);
        let pitch = -d.z.atan2(d.xy().norm());
        Self {
            center: [c.x, c.y, c.z],
            half_extents: [d.norm() / 2.0, width / 2.0, width / 2.0],
            yaw,
            pitch,
            roll: 0.0,
        }
    }
}

/// Scripted sensor motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// The same pose repeated.
    Static { sweeps: usize },
    /// Constant step along +x from the origin.
    Straight { sweeps: usize, step: f64 },
    /// Counter-clockwise rounded rectangle centred at the origin, starting
    /// at the middle of the bottom side heading +x.
    Loop {
        sweeps: usize,
        length: f64,
        width: f64,
        corner_radius: f64,
        /// Amplitude of a vertical oscillation (meters).
        #[serde(default)]
        bounce: f64,
    },
    /// Explicit poses as `[x, y, z, roll, pitch, yaw]`.
    Waypoints { poses: Vec<[f64; 6]> },
}

/// Parametric scene generators. Scenes are made of thin structure only
/// (posts, rails, braces, poles) so every return lies close to a 3D line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum Layout {
    /// Ring-shaped corridor with colonnades along both sides; `length` and
    /// `width` are those of the driving centreline.
    CorridorLoop {
        length: f64,
        width: f64,
        corridor_width: f64,
        post_spacing: f64,
        bottom: f64,
        top: f64,
    },
    /// Straight corridor along +x from 10 m behind the origin to 10 m past
    /// `length`, closed at both ends.
    StraightCorridor {
        length: f64,
        corridor_width: f64,
        post_spacing: f64,
        bottom: f64,
        top: f64,
    },
    /// Poles scattered uniformly (seeded) over a square, keeping a 6 m lane
    /// along the x axis clear.
    PoleField {
        poles: usize,
        extent: f64,
        bottom: f64,
        pole_radius: f64,
    },
}

/// File form of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub layout: Option<Layout>,
    #[serde(default)]
    pub floor: Option<f64>,
    #[serde(default)]
    pub ceiling: Option<f64>,
    #[serde(default)]
    pub poles: Vec<Pole>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default)]
    pub scatter: Option<Scatter>,
}

/// Seeded poles scattered around the trajectory, kept `clearance` meters
/// away from every scripted sensor position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub count: usize,
    /// Extent beyond the trajectory's bounding box (m).
    pub margin: f64,
    pub clearance: f64,
    pub radius: f64,
    pub z_min: f64,
    pub height_min: f64,
    pub height_max: f64,
}

impl Scatter {
    fn poles(&self, seed: u64, trajectory: &[PoseSE3]) -> Result<Vec<Pole>> {
        use rand::Rng;
        if !(self.radius > 0.0
            && self.clearance >= 0.0
            && self.margin >= 0.0
            && self.height_min <= self.height_max)
        {
            return Err(Error::Config("invalid scatter parameters".into()));
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in trajectory {
            for k in 0..2 {
                lo[k] = lo[k].min(p.translation[k]);
                hi[k] = hi[k].max(p.translation[k]);
            }
        }
        if trajectory.is_empty() {
            (lo, hi) = ([0.0; 2], [0.0; 2]);
        }
        let c2 = self.clearance * self.clearance;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca7_7e2d_0f1e_1d00);
        let mut out = Vec::with_capacity(self.count);
        let mut attempts = 0usize;
        while out.len() < self.count {
            attempts += 1;
            if attempts > 1000 * self.count.max(1) {
                return Err(Error::Config(
                    "scatter clearance leaves no room for poles".into(),
                ));
            }
            let x = rng.random_range(lo[0] - self.margin..=hi[0] + self.margin);
            let y = rng.random_range(lo[1] - self.margin..=hi[1] + self.margin);
            let clear = trajectory
                .iter()
                .all(|p| (p.translation.x - x).powi(2) + (p.translation.y - y).powi(2) >= c2);
            if clear {
                let h = rng.random_range(self.height_min..=self.height_max);
                out.push(Pole {
                    x,
                    y,
                    radius: self.radius,
                    z_min: self.z_min,
                    z_max: self.z_min + h,
                });
            }
        }
        Ok(out)
    }
}

impl WorldSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: WorldSpec =
            toml::from_str(text).map_err(|e| Error::Parse(format!("world spec: {e}")))?;
        if spec.version != WORLD_SPEC_VERSION {
            return Err(Error::Config(format!(
                "world spec version {} unsupported (expected {WORLD_SPEC_VERSION})",
                spec.version
            )));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("world spec: {e}")))
    }
}

#[derive(Debug, Clone, Copy)]
struct Obb {
    center: Vector3<f64>,
    /// Columns are the box axes in the world frame.
    axes: Matrix3<f64>,
    half: Vector3<f64>,
    bound_radius: f64,
}

impl Obb {
    fn new(b: &BoxSpec) -> Self {
        let axes = *Rotation3::from_euler_angles(b.roll, b.pitch, b.yaw).matrix();
        let half = Vector3::from(b.half_extents);
        Self {
            center: Vector3::from(b.center),
            axes,
            half,
            // Horizontal footprint radius, used for the per-column cull.
            bound_radius: (axes.abs() * half).xy().norm(),
        }
    }

    /// Slab test in the box frame; nearest positive hit distance.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let o = self.axes.tr_mul(&(origin - self.center));
        let d = self.axes.tr_mul(dir);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k].abs() > self.half[k] {
                    return None;
                }
                continue;
            }
            let a = (-self.half[k] - o[k]) / d[k];
            let b = (self.half[k] - o[k]) / d[k];
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        if t0 > 1e-9 {
            Some(t0)
        } else if t1 > 1e-9 {
            // Origin inside the box.
            Some(t1)
        } else {
            None
        }
    }
}

fn pole_hit(p: &Pole, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let (ox, oy) = (origin.x - p.x, origin.y - p.y);
    let a = dir.x * dir.x + dir.y * dir.y;
    if a < 1e-18 {
        return None;
    }
    let b = ox * dir.x + oy * dir.y;
    let c = ox * ox + oy * oy - p.radius * p.radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    for t in [(-b - sq) / a, (-b + sq) / a] {
        if t > 1e-9 {
            let z = origin.z + t * dir.z;
            if z >= p.z_min && z <= p.z_max {
                return Some(t);
            }
        }
    }
    None
}

/// Resolved world ready for raycasting.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub sensor: SensorSpec,
    pub noise: NoiseSpec,
    pub floor: Option<f64>,
    pub ceiling: Option<f64>,
    pub poles: Vec<Pole>,
    pub boxes: Vec<BoxSpec>,
    /// Sensor poses in the scene frame.
    pub trajectory: Vec<PoseSE3>,
    obbs: Vec<Obb>,
}

/// One simulated sweep with its ground-truth pose relative to the first
/// sweep.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub index: usize,
    pub timestamp: f64,
    pub points: Vec<RawPoint>,
    pub pose: PoseSE3,
}

impl SyntheticFrame {
    pub fn sweep(&self) -> Sweep {
        let mut s = split_scans(&self.points, &BeamModel::RingField);
        s.index = self.index;
        s.timestamp = self.timestamp;
        s
    }
}

impl SyntheticWorld {
    pub fn new(
        seed: u64,
        sensor: SensorSpec,
        noise: NoiseSpec,
        poles: Vec<Pole>,
        boxes: Vec<BoxSpec>,
        trajectory: Vec<PoseSE3>,
    ) -> Self {
        let obbs = boxes.iter().map(Obb::new).collect();
        Self {
            seed,
            sensor,
            noise,
            floor: None,
            ceiling: None,
            poles,
            boxes,
            trajectory,
            obbs,
        }
    }

    pub fn from_spec(spec: &WorldSpec) -> Result<Self> {
        let mut poles = spec.poles.clone();
        let mut boxes = spec.boxes.clone();
        if let Some(layout) = &spec.layout {
            let scene = build_layout(layout, spec.seed);
            poles.extend(scene.poles);
            boxes.extend(scene.boxes);
        }
        let trajectory = script_poses(&spec.trajectory)?;
        if let Some(scatter) = &spec.scatter {
            poles.extend(scatter.poles(spec.seed, &trajectory)?);
        }
        let mut w = Self::new(spec.seed, spec.sensor, spec.noise, poles, boxes, trajectory);
        w.floor = spec.floor;
        w.ceiling = spec.ceiling;
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_spec(&WorldSpec::load(path)?)
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    /// Ground-truth poses relative to the first sensor pose.
    pub fn ground_truth(&self) -> Vec<PoseSE3> {
        let Some(first) = self.trajectory.first() else {
            return Vec::new();
        };
        let inv = first.inverse();
        self.trajectory.iter().map(|t| inv * *t).collect()
    }

    pub fn path_length(&self) -> f64 {
        self.trajectory
            .windows(2)
            .map(|w| (w[1].translation - w[0].translation).norm())
            .sum()
    }

    fn cast(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        candidates: &[usize],
        pole_candidates: &[usize],
    ) -> Option<f64> {
        let mut best = f64::INFINITY;
        if dir.z < 0.0 {
            if let Some(f) = self.floor {
                let t = (f - origin.z) / dir.z;
                if t > 0.0 {
                    best = best.min(t);
                }
            }
        } else if dir.z > 0.0 {
            if let Some(c) = self.ceiling {
                let t = (c - origin.z) / dir.z;
                if t > 0.0 {
                    best = best.min(t);
                }
            }
        }
        for &i in pole_candidates {
            if let Some(t) = pole_hit(&self.poles[i], origin, dir) {
                best = best.min(t);
            }
        }
        for &i in candidates {
            if let Some(t) = self.obbs[i].hit(origin, dir) {
                best = best.min(t);
            }
        }
        (best <= self.sensor.max_range).then_some(best)
    }

    /// Raycasts sweep `i`: points in the sensor frame, azimuth-major order
    /// starting at −π, with exact ring indices and seeded range noise.
    pub fn render(&self, i: usize) -> SyntheticFrame {
        let pose = self.trajectory[i];
        let origin = pose.translation;
        let elevations = self.sensor.elevations();
        let steps = self.sensor.azimuth_steps.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        let unit = Normal::new(0.0, 1.0).unwrap();

        let mut points = Vec::with_capacity(steps as usize * elevations.len());
        let mut candidates = Vec::with_capacity(self.obbs.len());
        let mut pole_candidates = Vec::with_capacity(self.poles.len());
        let in_column = |c: Vector2<f64>, r: f64, h2: &Vector2<f64>, hn: f64| {
            let rel = c - origin.xy();
            let along = rel.dot(h2) / hn;
            let perp = (rel.x * h2.y - rel.y * h2.x).abs() / hn;
            along >= -r && perp <= r + 0.05 * along.abs() + 1e-6
        };
        for s in 0..steps {
            let az = -PI + TAU * s as f64 / steps as f64;
            let (sa, ca) = az.sin_cos();
            // Horizontal heading of this column in the world frame; the
            // sensor is near-level so a generous margin keeps the cull exact
            // for small roll/pitch.
            let h = pose.rotation * Vector3::new(ca, sa, 0.0);
            let h2 = h.xy();
            let hn = h2.norm().max(1e-12);
            candidates.clear();
            candidates.extend((0..self.obbs.len()).filter(|&k| {
                in_column(self.obbs[k].center.xy(), self.obbs[k].bound_radius, &h2, hn)
            }));
            pole_candidates.clear();
            pole_candidates.extend((0..self.poles.len()).filter(|&k| {
                in_column(
                    Vector2::new(self.poles[k].x, self.poles[k].y),
                    self.poles[k].radius,
                    &h2,
                    hn,
                )
            }));
            for (beam, &el) in elevations.iter().enumerate() {
                let (se, ce) = el.sin_cos();
                let local = Vector3::new(ce * ca, ce * sa, se);
                let dir = pose.rotation * local;
                // Draw unconditionally so the noise sequence does not depend
                // on which rays hit.
                let n: f64 = unit.sample(&mut rng);
                if let Some(t) = self.cast(&origin, &dir, &candidates, &pole_candidates) {
                    let r = t + n * self.noise.sigma_at(t);
                    if r > 0.0 {
                        let p = local * r;
                        points.push(RawPoint::new(p.x, p.y, p.z, 0.0).with_ring(beam as u32));
                    }
                }
            }
        }
        let first_inv = self.trajectory[0].inverse();
        SyntheticFrame {
            index: i,
            timestamp: i as f64 * self.sensor.period,
            points,
            pose: first_inv * pose,
        }
    }
}

/// Lazily rendered sweeps with their ground-truth poses.
pub fn generate_sweeps(world: &SyntheticWorld) -> impl Iterator<Item = (Sweep, PoseSE3)> + '_ {
    (0..world.len()).map(|i| {
        let f = world.render(i);
        (f.sweep(), f.pose)
    })
}

/// Writes `velodyne/NNNNNN.bin`, `times.txt` and `poses.txt` (ground truth)
/// under `root`.
pub fn write_dataset(world: &SyntheticWorld, root: &Path) -> Result<()> {
    let velo = root.join("velodyne");
    fs::create_dir_all(&velo).map_err(|e| Error::io(&velo, e))?;
    let mut times = String::new();
    for i in 0..world.len() {
        let f = world.render(i);
        write_kitti_bin(&velo.join(format!("{i:06}.bin")), &f.points)?;
        times.push_str(&format!("{:e}\n", f.timestamp));
    }
    let tp = root.join("times.txt");
    fs::write(&tp, times).map_err(|e| Error::io(&tp, e))?;
    crate::pipeline::write_kitti_poses(&root.join("poses.txt"), &world.ground_truth())
}

fn script_poses(spec: &TrajectorySpec) -> Result<Vec<PoseSE3>> {
    Ok(match spec {
        TrajectorySpec::Static { sweeps } => vec![PoseSE3::identity(); *sweeps],
        TrajectorySpec::Straight { sweeps, step } => (0..*sweeps)
            .map(|i| PoseSE3::from_translation(Vector3::new(i as f64 * step, 0.0, 0.0)))
            .collect(),
        TrajectorySpec::Loop {
            sweeps,
            length,
            width,
            corner_radius,
            bounce,
        } => {
            let path = RoundedRect::new(*length, *width, *corner_radius)?;
            let total = path.perimeter();
            (0..*sweeps)
                .map(|i| {
                    let s = total * i as f64 / *sweeps as f64;
                    let (x, y, yaw) = path.at(s);
                    let z = bounce * (TAU * 3.0 * s / total).sin();
                    PoseSE3::from_euler(0.0, 0.0, yaw, Vector3::new(x, y, z))
                })
                .collect()
        }
        TrajectorySpec::Waypoints { poses } => poses
            .iter()
            .map(|p| PoseSE3::from_euler(p[3], p[4], p[5], Vector3::new(p[0], p[1], p[2])))
            .collect(),
    })
}

/// Rounded rectangle of outer size `length × width` centred at the origin.
#[derive(Debug, Clone, Copy)]
pub struct RoundedRect {
    sx: f64,
    sy: f64,
    rc: f64,
}

impl RoundedRect {
    pub fn new(length: f64, width: f64, corner_radius: f64) -> Result<Self> {
        if !(corner_radius >= 0.0 && 2.0 * corner_radius <= length.min(width)) {
            return Err(Error::Config(
                "corner radius must fit within the loop".into(),
            ));
        }
        Ok(Self {
            sx: length - 2.0 * corner_radius,
            sy: width - 2.0 * corner_radius,
            rc: corner_radius,
        })
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.sx + self.sy) + TAU * self.rc
    }

    /// Position and heading at arc length `s` from the start.
    pub fn at(&self, s: f64) -> (f64, f64, f64) {
        let (hx, hy, rc) = (self.sx / 2.0, self.sy / 2.0, self.rc);
        let arc = PI / 2.0 * rc;
        let mut s = s.rem_euclid(self.perimeter());
        // Segments: half bottom, corner, right, corner, top, corner, left,
        // corner, half bottom.
        let segs: [(f64, u8); 9] = [
            (hx, 0),
            (arc, 1),
            (self.sy, 2),
            (arc, 3),
            (self.sx, 4),
            (arc, 5),
            (self.sy, 6),
            (arc, 7),
            (hx, 8),
        ];
        let bottom = -(hy + rc);
        for (len, id) in segs {
            if s > len && id != 8 {
                s -= len;
                continue;
            }
            let corner = |cx: f64, cy: f64, start: f64| {
                let a = start + s / rc.max(1e-12);
                (cx + rc * a.cos(), cy + rc * a.sin(), a + PI / 2.0)
            };
            return match id {
                0 => (s, bottom, 0.0),
                1 => corner(hx, -hy, -PI / 2.0),
                2 => (hx + rc, -hy + s, PI / 2.0),
                3 => corner(hx, hy, 0.0),
                4 => (hx - s, hy + rc, PI),
                5 => corner(-hx, hy, PI / 2.0),
                6 => (-hx - rc, hy - s, -PI / 2.0),
                7 => corner(-hx, -hy, PI),
                _ => (-hx + s, bottom, 0.0),
            };
        }
        unreachable!()
    }
}

/// World-frame edge batches of a vehicle lapping a rounded-rectangle loop
/// through a fixed field of vertical lines, one batch per sweep. Stands in
/// for the mapping input of a long revisiting drive when only the map is
/// under test.
#[derive(Debug, Clone)]
pub struct RevisitStream {
    path: RoundedRect,
    lines: Vec<[f64; 2]>,
    step: f64,
    radius: f64,
    points_per_sweep: usize,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevisitSpec {
    pub seed: u64,
    pub length: f64,
    pub width: f64,
    /// Distance travelled per sweep (m).
    pub step: f64,
    /// Vertical lines per 100 m² of the field.
    pub density: f64,
    /// Sensing radius (m).
    pub radius: f64,
    pub points_per_sweep: usize,
}

impl Default for RevisitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            length: 400.0,
            width: 200.0,
            step: 1.0,
            density: 1.0,
            radius: 40.0,
            points_per_sweep: 800,
        }
    }
}

impl RevisitStream {
    pub fn new(spec: &RevisitSpec) -> Result<Self> {
        use rand::Rng;
        if !(spec.step > 0.0 && spec.radius > 0.0 && spec.density > 0.0) {
            return Err(Error::Config(
                "step, radius and density must be positive".into(),
            ));
        }
        let path = RoundedRect::new(spec.length, spec.width, spec.width.min(spec.length) / 4.0)?;
        let (hx, hy) = (
            spec.length / 2.0 + spec.radius,
            spec.width / 2.0 + spec.radius,
        );
        let count = (4.0 * hx * hy * spec.density / 100.0).ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let lines = (0..count)
            .map(|_| [rng.random_range(-hx..hx), rng.random_range(-hy..hy)])
            .collect();
        Ok(Self {
            path,
            lines,
            step: spec.step,
            radius: spec.radius,
            points_per_sweep: spec.points_per_sweep,
            seed: spec.seed,
        })
    }

    /// Sweeps per lap.
    pub fn lap_sweeps(&self) -> usize {
        (self.path.perimeter() / self.step).ceil() as usize
    }

    /// Vehicle position at sweep `i`.
    pub fn position(&self, i: usize) -> Point3 {
        let (x, y, _) = self.path.at(i as f64 * self.step);
        Point3::new(x, y, 0.0)
    }

    /// Edge points of sweep `i`: samples on the lines within the sensing
    /// radius, with 2 cm jitter. Deterministic in `(seed, i)`.
    pub fn sweep(&self, i: usize) -> Vec<Point3> {
        use rand::Rng;
        let c = self.position(i);
        let r2 = self.radius * self.radius;
        let near: Vec<&[f64; 2]> = self
            .lines
            .iter()
            .filter(|l| (l[0] - c.x).powi(2) + (l[1] - c.y).powi(2) <= r2)
            .collect();
        if near.is_empty() {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64 + 1);
        let jitter = Normal::new(0.0, 0.02).unwrap();
        (0..self.points_per_sweep)
            .map(|_| {
                let l = near[rng.random_range(0..near.len())];
                Point3::new(
                    l[0] + jitter.sample(&mut rng),
                    l[1] + jitter.sample(&mut rng),
                    rng.random_range(-2.0..3.0),
                )
            })
            .collect()
    }
}

struct Scene {
    poles: Vec<Pole>,
    boxes: Vec<BoxSpec>,
}

/// Structure sizes of the colonnade presets (meters).
const POST_RADIUS: f64 = 0.02;
const RAIL: f64 = 0.05;
const BRACE: f64 = 0.05;

/// Round posts from `a` to `b` (xy) at `spacing`, two horizontal rails
/// along the row and an inclined brace in every other bay.
fn colonnade(a: [f64; 2], b: [f64; 2], spacing: f64, bottom: f64, top: f64, out: &mut Scene) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dy * dy).sqrt();
    let n = (len / spacing).round().max(1.0) as usize;
    let step = len / n as f64;
    let (ux, uy) = (dx / len, dy / len);
    let height = top - bottom;
    let posts: Vec<(f64, f64)> = (0..n)
        .map(|k| (a[0] + ux * step * k as f64, a[1] + uy * step * k as f64))
        .collect();
    for &(x, y) in &posts {
        out.poles.push(Pole {
            x,
            y,
            radius: POST_RADIUS,
            z_min: bottom,
            z_max: top,
        });
    }
    for frac in [0.3, 0.8] {
        let z = bottom + frac * height;
        out.boxes.push(BoxSpec::bar(
            Point3::new(a[0], a[1], z),
            Point3::new(b[0], b[1], z),
            RAIL,
        ));
    }
    for k in (0..n).step_by(2) {
        let (x0, y0) = posts[k];
        let (x1, y1) = (x0 + ux * step, y0 + uy * step);
        out.boxes.push(BoxSpec::bar(
            Point3::new(x0, y0, bottom + 0.1 * height),
            Point3::new(x1, y1, bottom + 0.65 * height),
            BRACE,
        ));
    }
}

/// Colonnades along the four sides of the axis-aligned rectangle with
/// corners `lo` and `hi`.
fn colonnade_rect(
    lo: [f64; 2],
    hi: [f64; 2],
    spacing: f64,
    bottom: f64,
    top: f64,
    out: &mut Scene,
) {
    let ([x0, y0], [x1, y1]) = (lo, hi);
    colonnade([x0, y0], [x1, y0], spacing, bottom, top, out);
    colonnade([x1, y0], [x1, y1], spacing, bottom, top, out);
    colonnade([x1, y1], [x0, y1], spacing, bottom, top, out);
    colonnade([x0, y1], [x0, y0], spacing, bottom, top, out);
}

fn build_layout(layout: &Layout, seed: u64) -> Scene {
    match *layout {
        Layout::CorridorLoop {
            length,
            width,
            corridor_width,
            post_spacing,
            bottom,
            top,
        } => {
            let half = corridor_width / 2.0;
            let mut scene = Scene {
                poles: Vec::new(),
                boxes: Vec::new(),
            };
            let (ox, oy) = (length / 2.0 + half, width / 2.0 + half);
            let (ix, iy) = (length / 2.0 - half, width / 2.0 - half);
            colonnade_rect([-ox, -oy], [ox, oy], post_spacing, bottom, top, &mut scene);
            colonnade_rect([-ix, -iy], [ix, iy], post_spacing, bottom, top, &mut scene);
            scene
        }
        Layout::StraightCorridor {
            length,
            corridor_width,
            post_spacing,
            bottom,
            top,
        } => {
            let half = corridor_width / 2.0;
            let mut scene = Scene {
                poles: Vec::new(),
                boxes: Vec::new(),
            };
            colonnade_rect(
                [-10.0, -half],
                [length + 10.0, half],
                post_spacing,
                bottom,
                top,
                &mut scene,
            );
            scene
        }
        Layout::PoleField {
            poles,
            extent,
            bottom,
            pole_radius,
        } => {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut out = Vec::with_capacity(poles);
            let mut boxes = Vec::with_capacity(poles / 2);
            while out.len() < poles {
                let x = rng.random_range(-extent..extent);
                let y = rng.random_range(-extent..extent);
                if y.abs() < 3.0 {
                    continue;
                }
                let top = bottom + rng.random_range(3.0..6.0);
                out.push(Pole {
                    x,
                    y,
                    radius: pole_radius,
                    z_min: bottom,
                    z_max: top,
                });
                // Every other pole carries a tilted arm for vertical
                // constraints.
                if out.len() % 2 == 0 {
                    let yaw = rng.random_range(-PI..PI);
                    let tip = Point3::new(x + 2.0 * yaw.cos(), y + 2.0 * yaw.sin(), top + 1.0);
                    boxes.push(BoxSpec::bar(Point3::new(x, y, top - 1.0), tip, BRACE));
                }
            }
            Scene { poles: out, boxes }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sensor(beams: u32, steps: u32) -> SensorSpec {
        SensorSpec {
            beams,
            azimuth_steps: steps,
            ..SensorSpec::default()
        }
    }

    #[test]
    fn empty_world_gives_empty_sweeps() {
        let w = SyntheticWorld::new(
            1,
            SensorSpec::default(),
            NoiseSpec::default(),
            vec![],
            vec![],
            vec![PoseSE3::identity(); 3],
        );
        for (sweep, _) in generate_sweeps(&w) {
            assert!(sweep.is_empty());
        }
    }

    #[test]
    fn single_pole_ranges() {
        let r = 0.05;
        let pole = Pole {
            x: 10.0 + r,
            y: 0.0,
            radius: r,
            z_min: -100.0,
            z_max: 100.0,
        };
        let noise = NoiseSpec {
            sigma: 0.0,
            ..NoiseSpec::default()
        };
        // Azimuth step exactly hits 0 rad: −π + 2π·s/steps = 0 at s = steps/2.
        let w = SyntheticWorld::new(
            3,
            sensor(16, 3600),
            noise,
            vec![pole],
            vec![],
            vec![PoseSE3::identity()],
        );
        let f = w.render(0);
        assert!(!f.points.is_empty());
        let els = w.sensor.elevations();
        for p in &f.points {
            let az = p.position.y.atan2(p.position.x);
            assert!(az.abs() < 0.01, "return off the pole azimuth: {az}");
            if p.position.y.abs() < 1e-12 {
                let e = els[p.ring.unwrap() as usize];
                assert!((p.range() - 10.0 / e.cos()).abs() < 1e-9);
            }
        }
        // Every beam sees the pole head-on.
        let mut rings: Vec<u32> = f
            .points
            .iter()
            .filter(|p| p.position.y.abs() < 1e-12)
            .map(|p| p.ring.unwrap())
            .collect();
        rings.dedup();
        assert_eq!(rings.len(), 16);
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = corridor_spec();
        let a = SyntheticWorld::from_spec(&spec).unwrap();
        let b = SyntheticWorld::from_spec(&spec).unwrap();
        for i in [0, 7] {
            let (fa, fb) = (a.render(i), b.render(i));
            assert_eq!(fa.points.len(), fb.points.len());
            for (p, q) in fa.points.iter().zip(&fb.points) {
                assert_eq!(p.position.map(f64::to_bits), q.position.map(f64::to_bits));
                assert_eq!(p.ring, q.ring);
            }
        }
        let mut other = spec.clone();
        other.seed += 1;
        let c = SyntheticWorld::from_spec(&other).unwrap();
        assert_ne!(
            a.render(3).points[0].position,
            c.render(3).points[0].position
        );
    }

    fn corridor_spec() -> WorldSpec {
        WorldSpec {
            version: 1,
            seed: 11,
            sensor: sensor(16, 900),
            noise: NoiseSpec::default(),
            trajectory: TrajectorySpec::Loop {
                sweeps: 20,
                length: 62.0,
                width: 32.0,
                corner_radius: 4.0,
                bounce: 0.0,
            },
            layout: Some(Layout::CorridorLoop {
                length: 62.0,
                width: 32.0,
                corridor_width: 10.0,
                post_spacing: 2.0,
                bottom: -1.8,
                top: 2.5,
            }),
            floor: Some(-1.8),
            ceiling: None,
            poles: vec![],
            boxes: vec![],
            scatter: None,
        }
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = corridor_spec();
        let text = spec.to_toml().unwrap();
        assert_eq!(WorldSpec::from_toml(&text).unwrap(), spec);
        let bad = text.replace("version = 1", "version = 9");
        assert!(WorldSpec::from_toml(&bad).is_err());
    }

    #[test]
    fn column_cull_matches_brute_force_cast() {
        let mut spec = corridor_spec();
        spec.noise.sigma = 0.0;
        spec.sensor.azimuth_steps = 720;
        let w = SyntheticWorld::from_spec(&spec).unwrap();
        let all_boxes: Vec<usize> = (0..w.obbs.len()).collect();
        let all_poles: Vec<usize> = (0..w.poles.len()).collect();
        for i in [0, 7, 19] {
            let f = w.render(i);
            let pose = w.trajectory[i];
            let mut expected = Vec::new();
            for s in 0..spec.sensor.azimuth_steps {
                let az = -PI + TAU * s as f64 / spec.sensor.azimuth_steps as f64;
                for el in w.sensor.elevations() {
                    let local = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                    if let Some(t) = w.cast(
                        &pose.translation,
                        &(pose.rotation * local),
                        &all_boxes,
                        &all_poles,
                    ) {
                        expected.push(local * t);
                    }
                }
            }
            assert!(!expected.is_empty());
            assert_eq!(f.points.len(), expected.len());
            for (p, e) in f.points.iter().zip(&expected) {
                assert!((p.position - e).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn rounded_rect_is_continuous_and_closed() {
        let r = RoundedRect::new(62.0, 32.0, 4.0).unwrap();
        let n = 2000;
        let step = r.perimeter() / n as f64;
        for i in 0..=n {
            let (x0, y0, _) = r.at(i as f64 * step);
            let (x1, y1, yaw) = r.at((i as f64 + 0.5) * step);
            let d = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            assert!((d - step / 2.0).abs() < 1e-3, "gap {d} at {i}");
            let heading = (y1 - y0).atan2(x1 - x0);
            let dy = (heading - yaw + PI).rem_euclid(TAU) - PI;
            assert!(dy.abs() < 0.05);
        }
        let (x, y, _) = r.at(r.perimeter());
        assert!((x - 0.0).abs() < 1e-9 && (y + 16.0).abs() < 1e-9);
    }

    #[test]
    fn box_hit_matches_plane_arithmetic() {
        let b = Obb::new(&BoxSpec::axis_aligned([5.0, -1.0, -1.0], [6.0, 1.0, 1.0]));
        let t = b
            .hit(&Vector3::zeros(), &Vector3::new(1.0, 0.0, 0.0))
            .unwrap();
        assert!((t - 5.0).abs() < 1e-12);
        let d = Vector3::new(1.0, 0.1, 0.0).normalize();
        let t = b.hit(&Vector3::zeros(), &d).unwrap();
        assert!((t * d.x - 5.0).abs() < 1e-12);
        assert!(b
            .hit(&Vector3::zeros(), &Vector3::new(-1.0, 0.0, 0.0))
            .is_none());
    }
}
