//! Sequence runner: feature extraction, pose optimization and mapping as
//! three lock-stepped stages, plus trajectory and stats I/O.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_edges, EdgeSet, FeatureConfig};
use crate::geometry::{constant_velocity_prior, Point3, PoseSE3};
use crate::odometry::{optimize_pose, OptimizerConfig};
use crate::sweep_io::{prepare_sweep, Dataset, RawPoint, SweepConfig};
use crate::synth::SyntheticWorld;
use crate::voxel_map::{local_map, GlobalMap, LocalMap, MapConfig, MapStats};

/// All run settings. The file form is a flat TOML table; every key of every
/// sub-config lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub sweep: SweepConfig,
    #[serde(flatten)]
    pub features: FeatureConfig,
    #[serde(flatten)]
    pub map: MapConfig,
    #[serde(flatten)]
    pub optimizer: OptimizerConfig,
    pub dataset: Option<PathBuf>,
    pub poses_out: Option<PathBuf>,
    pub stats_out: Option<PathBuf>,
    pub velocity_out: Option<PathBuf>,
    /// Final map dump (`ix iy iz x y z`); a `.json` stats sidecar is written
    /// next to it.
    pub map_out: Option<PathBuf>,
    /// Run the stages inline on one thread.
    pub deterministic: bool,
    /// Sweep period used when the dataset has no timestamps (seconds).
    pub period: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sweep: SweepConfig::default(),
            features: FeatureConfig::default(),
            map: MapConfig::default(),
            optimizer: OptimizerConfig::default(),
            dataset: None,
            poses_out: None,
            stats_out: None,
            velocity_out: None,
            map_out: None,
            deterministic: false,
            period: 0.1,
        }
    }
}

impl RunConfig {
    /// Parses a flat TOML config and applies `key=value` overrides (values in
    /// TOML syntax; bare words are taken as strings). Unknown keys are
    /// rejected.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let value = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        let known = Self::known_keys();
        if let Some(bad) = table.keys().find(|k| !known.contains(k)) {
            return Err(Error::Config(format!("unknown config key `{bad}`")));
        }
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    fn known_keys() -> Vec<String> {
        let mut keys: Vec<String> = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        };
        // Optional paths are absent from the serialized default.
        keys.extend(
            [
                "dataset",
                "poses_out",
                "stats_out",
                "velocity_out",
                "map_out",
            ]
            .map(String::from),
        );
        keys
    }

    /// Copies values shared between sub-configs.
    pub fn sync(&mut self) {
        self.optimizer.r_min = self.sweep.r_min;
        self.optimizer.r_max = self.sweep.r_max;
    }

    pub fn validate(&self) -> Result<()> {
        self.sweep.validate()?;
        self.features.validate()?;
        self.map.validate()?;
        self.optimizer.validate()?;
        if !(self.period > 0.0) {
            return Err(Error::Config("period must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub index: usize,
    pub timestamp: f64,
    pub pose: PoseSE3,
}

/// Sensor poses in the frame of the first sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Poses with consecutive indices and a fixed period.
    pub fn from_poses(poses: Vec<PoseSE3>, period: f64) -> Self {
        Self {
            entries: poses
                .into_iter()
                .enumerate()
                .map(|(i, pose)| TrajectoryEntry {
                    index: i,
                    timestamp: i as f64 * period,
                    pose,
                })
                .collect(),
        }
    }

    pub fn push(&mut self, index: usize, timestamp: f64, pose: PoseSE3) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if index <= last.index {
                return Err(Error::Parse(format!(
                    "trajectory index {index} after {}",
                    last.index
                )));
            }
        }
        self.entries.push(TrajectoryEntry {
            index,
            timestamp,
            pose,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        self.entries.iter().map(|e| e.pose).collect()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.entries.iter().map(|e| e.pose.translation).collect()
    }

    pub fn path_length(&self) -> f64 {
        self.entries
            .windows(2)
            .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityEstimate {
    pub epoch: usize,
    /// World-frame linear velocity, m/s.
    pub linear: [f64; 3],
}

/// Finite-difference velocity between entries `i − 1` and `i`.
pub fn estimate_velocity(traj: &Trajectory, i: usize) -> Result<VelocityEstimate> {
    let e = traj.entries();
    if i == 0 {
        return Err(Error::NoPreviousFrame(i));
    }
    if i >= e.len() {
        return Err(Error::LengthMismatch(i + 1, e.len()));
    }
    let (a, b) = (&e[i - 1], &e[i]);
    let dt = b.timestamp - a.timestamp;
    if !(dt > 0.0) {
        return Err(Error::ZeroDt(a.index, b.index));
    }
    let v: Vector3<f64> = (b.pose.translation - a.pose.translation) / dt;
    Ok(VelocityEstimate {
        epoch: b.index,
        linear: [v.x, v.y, v.z],
    })
}

/// How a sweep's pose is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bootstrap {
    /// Identity pose, no optimization; the sweep only seeds the map.
    SeedOnly,
    /// Previous pose as the initial guess.
    IdentityMotion,
    /// Constant-velocity extrapolation of the last two poses.
    ConstantVelocity,
}

pub fn bootstrap_policy(i: usize) -> Bootstrap {
    match i {
        0 => Bootstrap::SeedOnly,
        1 => Bootstrap::IdentityMotion,
        _ => Bootstrap::ConstantVelocity,
    }
}

/// Anything that yields raw sweeps by index.
pub trait SweepSource: Sync {
    fn len(&self) -> usize;
    fn timestamp(&self, i: usize, default_period: f64) -> f64;
    fn read_points(&self, i: usize) -> Result<Vec<RawPoint>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SweepSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn timestamp(&self, i: usize, default_period: f64) -> f64 {
        Dataset::timestamp(self, i, default_period)
    }

    fn read_points(&self, i: usize) -> Result<Vec<RawPoint>> {
        Dataset::read_points(self, i)
    }
}

impl SweepSource for SyntheticWorld {
    fn len(&self) -> usize {
        SyntheticWorld::len(self)
    }

    fn timestamp(&self, i: usize, _default_period: f64) -> f64 {
        i as f64 * self.sensor.period
    }

    fn read_points(&self, i: usize) -> Result<Vec<RawPoint>> {
        Ok(self.render(i).points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FrameStats {
    pub frame: usize,
    pub t_feat_ms: f64,
    pub t_opt_ms: f64,
    pub t_map_ms: f64,
    pub n_corr: usize,
    pub degenerate: bool,
    pub t_local_ms: f64,
    /// No accepted LM step increased the cost.
    #[serde(skip)]
    pub lm_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunStats {
    pub frames: Vec<FrameStats>,
}

impl RunStats {
    pub fn degenerate_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.degenerate).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        for f in &self.frames {
            w.serialize(f)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub velocities: Vec<VelocityEstimate>,
    pub stats: RunStats,
    /// Global map after the last update.
    pub map: GlobalMap,
}

impl RunOutput {
    /// Writes whichever outputs `cfg` names.
    pub fn write(&self, cfg: &RunConfig) -> Result<()> {
        if let Some(p) = &cfg.poses_out {
            write_kitti_poses(p, &self.trajectory.poses())?;
        }
        if let Some(p) = &cfg.stats_out {
            self.stats.write_csv(p)?;
        }
        if let Some(p) = &cfg.velocity_out {
            write_velocities(p, &self.velocities)?;
        }
        if let Some(p) = &cfg.map_out {
            self.map.write_dump(p)?;
            MapStats::of(&self.map)?.write_json(&p.with_extension("json"))?;
        }
        Ok(())
    }
}

struct FeatureMsg {
    index: usize,
    timestamp: f64,
    edges: EdgeSet,
    t_feat_ms: f64,
}

struct PoseMsg {
    index: usize,
    pose: PoseSE3,
    edges_world: Vec<Point3>,
}

struct MapMsg {
    local: LocalMap,
    t_map_ms: f64,
    t_local_ms: f64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn feature_stage(source: &dyn SweepSource, cfg: &RunConfig, i: usize) -> Result<FeatureMsg> {
    let t = Instant::now();
    let timestamp = source.timestamp(i, cfg.period);
    let points = source.read_points(i)?;
    let sweep = prepare_sweep(&points, &cfg.sweep, i, timestamp)?;
    let edges = extract_edges(&sweep, &cfg.features);
    Ok(FeatureMsg {
        index: i,
        timestamp,
        edges,
        t_feat_ms: ms(t),
    })
}

#[derive(Default)]
struct OdometryState {
    prev: Option<PoseSE3>,
    prevprev: Option<PoseSE3>,
}

struct OdometryResult {
    pose: PoseSE3,
    t_opt_ms: f64,
    n_corr: usize,
    degenerate: bool,
    monotone: bool,
}

fn odometry_stage(
    state: &mut OdometryState,
    msg: &FeatureMsg,
    local: Option<&LocalMap>,
    cfg: &RunConfig,
) -> OdometryResult {
    let t = Instant::now();
    let prior = match (bootstrap_policy(msg.index), state.prev, state.prevprev) {
        (Bootstrap::SeedOnly, _, _) | (_, None, _) => None,
        (Bootstrap::IdentityMotion, Some(p), _) | (Bootstrap::ConstantVelocity, Some(p), None) => {
            Some(p)
        }
        (Bootstrap::ConstantVelocity, Some(p), Some(pp)) => Some(constant_velocity_prior(&p, &pp)),
    };
    let (pose, n_corr, degenerate, monotone) = match (prior, local) {
        (None, _) => (PoseSE3::identity(), 0, false, true),
        (Some(prior), Some(local)) => {
            let (pose, rep) = optimize_pose(&msg.edges, local, prior, &cfg.optimizer);
            (
                pose,
                rep.last_correspondences(),
                rep.degenerate,
                rep.is_monotone(),
            )
        }
        (Some(prior), None) => (prior, 0, true, true),
    };
    state.prevprev = state.prev;
    state.prev = Some(pose);
    OdometryResult {
        pose,
        t_opt_ms: ms(t),
        n_corr,
        degenerate,
        monotone,
    }
}

struct MappingState {
    map: GlobalMap,
    /// World-frame edge sets of previous sweeps, newest first.
    recent: VecDeque<Vec<Point3>>,
}

impl MappingState {
    fn new(cfg: &MapConfig) -> Self {
        Self {
            map: GlobalMap::new(*cfg),
            recent: VecDeque::new(),
        }
    }
}

/// Inserts `E_i` into the global map, then builds `m_i` from the cells
/// around `T_i` plus the edge sets of the previous sweeps `i−1, i−2, …`.
fn mapping_stage(state: &mut MappingState, msg: PoseMsg) -> MapMsg {
    let t = Instant::now();
    state.map.update(&msg.edges_world);
    let t_map_ms = ms(t);

    let t = Instant::now();
    let recent: Vec<&[Point3]> = state.recent.iter().map(Vec::as_slice).collect();
    let local = local_map(&state.map, &msg.pose, &recent, msg.index);
    let t_local_ms = ms(t);

    state.recent.push_front(msg.edges_world);
    state.recent.truncate(state.map.config().recent_sweeps);
    MapMsg {
        local,
        t_map_ms,
        t_local_ms,
    }
}

fn pose_msg(index: usize, pose: PoseSE3, edges: &EdgeSet) -> PoseMsg {
    PoseMsg {
        index,
        pose,
        edges_world: edges
            .edges
            .iter()
            .map(|e| pose.apply(&e.position))
            .collect(),
    }
}

/// Per-sweep bookkeeping shared by both execution modes.
struct Collector {
    trajectory: Trajectory,
    stats: RunStats,
}

impl Collector {
    fn new() -> Self {
        Self {
            trajectory: Trajectory::new(),
            stats: RunStats::default(),
        }
    }

    fn record(&mut self, f: &FeatureMsg, o: &OdometryResult) -> Result<()> {
        self.trajectory.push(f.index, f.timestamp, o.pose)?;
        self.stats.frames.push(FrameStats {
            frame: f.index,
            t_feat_ms: f.t_feat_ms,
            t_opt_ms: o.t_opt_ms,
            n_corr: o.n_corr,
            degenerate: o.degenerate,
            lm_monotone: o.monotone,
            ..Default::default()
        });
        Ok(())
    }

    fn record_map(&mut self, m: &MapMsg) {
        if let Some(last) = self.stats.frames.last_mut() {
            last.t_map_ms = m.t_map_ms;
            last.t_local_ms = m.t_local_ms;
        }
    }

    fn finish(self, map: GlobalMap) -> RunOutput {
        let velocities = (1..self.trajectory.len())
            .filter_map(|i| estimate_velocity(&self.trajectory, i).ok())
            .collect();
        RunOutput {
            trajectory: self.trajectory,
            velocities,
            stats: self.stats,
            map,
        }
    }
}

fn run_inline(source: &dyn SweepSource, cfg: &RunConfig) -> Result<RunOutput> {
    let mut odo = OdometryState::default();
    let mut mapping = MappingState::new(&cfg.map);
    let mut local: Option<LocalMap> = None;
    let mut out = Collector::new();
    for i in 0..source.len() {
        let f = feature_stage(source, cfg, i)?;
        let o = odometry_stage(&mut odo, &f, local.as_ref(), cfg);
        out.record(&f, &o)?;
        let m = mapping_stage(&mut mapping, pose_msg(f.index, o.pose, &f.edges));
        out.record_map(&m);
        local = Some(m.local);
    }
    Ok(out.finish(mapping.map))
}

fn run_threaded(source: &dyn SweepSource, cfg: &RunConfig) -> Result<RunOutput> {
    let n = source.len();
    thread::scope(|scope| {
        let (feat_tx, feat_rx): (SyncSender<Result<FeatureMsg>>, Receiver<_>) = sync_channel(1);
        let (pose_tx, pose_rx) = sync_channel::<PoseMsg>(1);
        let (map_tx, map_rx) = sync_channel::<MapMsg>(1);

        scope.spawn(move || {
            for i in 0..n {
                let msg = feature_stage(source, cfg, i);
                let failed = msg.is_err();
                if feat_tx.send(msg).is_err() || failed {
                    break;
                }
            }
        });

        let map_cfg = cfg.map;
        let mapper = scope.spawn(move || {
            let mut state = MappingState::new(&map_cfg);
            for msg in pose_rx {
                if map_tx.send(mapping_stage(&mut state, msg)).is_err() {
                    break;
                }
            }
            state.map
        });

        let mut odo = OdometryState::default();
        let mut local: Option<LocalMap> = None;
        let mut out = Collector::new();
        for _ in 0..n {
            let f = feat_rx
                .recv()
                .map_err(|_| Error::Parse("feature stage stopped".into()))??;
            // Lock-step: m_{i-1} must be complete before sweep i is optimized.
            if f.index > 0 {
                let m = map_rx
                    .recv()
                    .map_err(|_| Error::Parse("mapping stage stopped".into()))?;
                out.record_map(&m);
                local = Some(m.local);
            }
            let o = odometry_stage(&mut odo, &f, local.as_ref(), cfg);
            out.record(&f, &o)?;
            pose_tx
                .send(pose_msg(f.index, o.pose, &f.edges))
                .map_err(|_| Error::Parse("mapping stage stopped".into()))?;
        }
        drop(pose_tx);
        if n > 0 {
            if let Ok(m) = map_rx.recv() {
                out.record_map(&m);
            }
        }
        let map = mapper
            .join()
            .map_err(|_| Error::Parse("mapping stage panicked".into()))?;
        Ok(out.finish(map))
    })
}

/// Runs odometry and mapping over every sweep of `source`.
pub fn run_source(source: &dyn SweepSource, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if cfg.deterministic {
        run_inline(source, cfg)
    } else {
        run_threaded(source, cfg)
    }
}

/// Runs over the dataset named in `cfg`.
pub fn run_sequence(cfg: &RunConfig) -> Result<RunOutput> {
    let root = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset path given".into()))?;
    let dataset = Dataset::open(root)?;
    run_source(&dataset, cfg)
}

/// KITTI pose format: the row-major upper 3×4 of each pose, one per line.
/// Values are written in shortest round-trip form.
pub fn write_kitti_poses(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    let mut text = String::with_capacity(poses.len() * 12 * 24);
    for p in poses {
        let row: Vec<String> = p
            .to_row_major_3x4()
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn parse_kitti_poses(text: &str) -> Result<Vec<PoseSE3>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("pose line {}: {e}", n + 1)))?;
            let arr: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| {
                Error::Parse(format!(
                    "pose line {}: {} values, expected 12",
                    n + 1,
                    v.len()
                ))
            })?;
            Ok(PoseSE3::from_row_major_3x4(&arr))
        })
        .collect()
}

pub fn read_kitti_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_poses(&text)
}

pub fn write_velocities(path: &Path, v: &[VelocityEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    w.write_record(["frame", "vx", "vy", "vz"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for e in v {
        w.write_record([
            e.epoch.to_string(),
            format!("{:e}", e.linear[0]),
            format!("{:e}", e.linear[1]),
            format!("{:e}", e.linear[2]),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
