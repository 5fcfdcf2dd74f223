//! `edgeodom` command-line front end. Every subcommand prints a JSON report
//! on stdout.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use edgeodom::eval::{ate_report, decile_trend, final_drift, kitti_rel_errors, map_update_timings};
use edgeodom::pipeline::{read_kitti_poses, run_sequence};
use edgeodom::synth::{write_dataset, RevisitSpec, RevisitStream};
use edgeodom::voxel_map::MapStats;
use edgeodom::{GlobalMap, RunConfig, SyntheticWorld, WorldSpec};

#[derive(Parser)]
#[command(name = "edgeodom", version, about = "Edge-feature LiDAR odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry over a dataset and write poses and stats.
    Run(RunArgs),
    /// KITTI relative errors of an estimate against ground truth.
    EvalRel(EvalArgs),
    /// Absolute trajectory error after rigid alignment.
    EvalAte(EvalArgs),
    /// Render a synthetic world to a KITTI-layout dataset.
    Synth(SynthArgs),
    /// Entropy and occupancy of a map dump.
    MapStats(MapStatsArgs),
    /// Map update times against a rebuilt monolithic k-d tree.
    BenchMap(BenchMapArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<RunConfig> {
        let mut all = self.overrides.clone();
        all.extend(extra);
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p, &all),
            None => RunConfig::from_toml_with_overrides("", &all),
        };
        cfg.context("loading config")
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory; overrides `dataset` from the config.
    dataset: Option<PathBuf>,
    /// Write `poses.txt`, `stats.csv` and `velocity.txt` here unless the
    /// config names other paths.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Ground-truth poses; adds ATE, drift and relative errors to the report.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated poses, KITTI format.
    #[arg(long)]
    estimate: PathBuf,
    /// Reference poses, KITTI format.
    #[arg(long)]
    reference: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// World spec (TOML).
    #[arg(long)]
    world: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace the world file's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MapStatsArgs {
    /// Map dump (`ix iy iz x y z` per line).
    #[arg(long)]
    dump: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct BenchMapArgs {
    #[arg(long, default_value_t = 1000)]
    sweeps: usize,
    #[arg(long, default_value_t = 150)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loop length of the revisiting stream (m).
    #[arg(long, default_value_t = 160.0)]
    length: f64,
    /// Loop width of the revisiting stream (m).
    #[arg(long, default_value_t = 80.0)]
    width: f64,
    /// Skip the k-d tree baseline.
    #[arg(long)]
    no_baseline: bool,
    /// Per-sweep timings as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> Result<()> {
    let report = match Cli::parse().command {
        Command::Run(a) => run(a)?,
        Command::EvalRel(a) => {
            let (est, gt) = load_pair(&a)?;
            serde_json::to_value(kitti_rel_errors(&est, &gt)?)?
        }
        Command::EvalAte(a) => {
            let (est, gt) = load_pair(&a)?;
            serde_json::to_value(ate_report(&est, &gt)?)?
        }
        Command::Synth(a) => synth(a)?,
        Command::MapStats(a) => {
            let cfg = a.config.load(Vec::new())?;
            let map = GlobalMap::read_dump(&a.dump, cfg.map)?;
            serde_json::to_value(MapStats::of(&map)?)?
        }
        Command::BenchMap(a) => bench_map(a)?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn load_pair(a: &EvalArgs) -> Result<(Vec<edgeodom::PoseSE3>, Vec<edgeodom::PoseSE3>)> {
    let est = read_kitti_poses(&a.estimate)
        .with_context(|| format!("reading {}", a.estimate.display()))?;
    let gt = read_kitti_poses(&a.reference)
        .with_context(|| format!("reading {}", a.reference.display()))?;
    Ok((est, gt))
}

fn toml_path(key: &str, p: &Path) -> String {
    format!("{key}={}", toml_string(&p.display().to_string()))
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn run(a: RunArgs) -> Result<Value> {
    let mut extra = Vec::new();
    if let Some(d) = &a.dataset {
        extra.push(toml_path("dataset", d));
    }
    let mut cfg = a.config.load(extra)?;
    if cfg.dataset.is_none() {
        bail!("no dataset: pass a directory or set `dataset` in the config");
    }
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        cfg.poses_out.get_or_insert_with(|| dir.join("poses.txt"));
        cfg.stats_out.get_or_insert_with(|| dir.join("stats.csv"));
        cfg.velocity_out
            .get_or_insert_with(|| dir.join("velocity.txt"));
    }
    let start = Instant::now();
    let out = run_sequence(&cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    out.write(&cfg)?;

    let frames = &out.stats.frames;
    let mean = |f: fn(&edgeodom::pipeline::FrameStats) -> f64| {
        if frames.is_empty() {
            0.0
        } else {
            frames.iter().map(f).sum::<f64>() / frames.len() as f64
        }
    };
    let mut report = json!({
        "frames": out.trajectory.len(),
        "degenerate_frames": out.stats.degenerate_frames(),
        "path_length_m": out.trajectory.path_length(),
        "seconds": seconds,
        "mean_ms": {
            "features": mean(|f| f.t_feat_ms),
            "local_map": mean(|f| f.t_local_ms),
            "optimize": mean(|f| f.t_opt_ms),
            "map_update": mean(|f| f.t_map_ms),
        },
        "map_cells": out.map.cell_count(),
        "map_points": out.map.point_count(),
        "poses_out": cfg.poses_out,
    });
    if let Some(gt_path) = &a.ground_truth {
        let gt =
            read_kitti_poses(gt_path).with_context(|| format!("reading {}", gt_path.display()))?;
        let est = out.trajectory.poses();
        report["ate"] = serde_json::to_value(ate_report(&est, &gt)?)?;
        report["final_drift_pct"] = json!(100.0 * final_drift(&est, &gt)?);
        report["relative"] = serde_json::to_value(kitti_rel_errors(&est, &gt)?)?;
    }
    Ok(report)
}

fn synth(a: SynthArgs) -> Result<Value> {
    let mut spec =
        WorldSpec::load(&a.world).with_context(|| format!("reading {}", a.world.display()))?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let world = SyntheticWorld::from_spec(&spec)?;
    write_dataset(&world, &a.out)?;

    // Run config matching the sensor; the Huber transition suits the
    // centimetre-level noise of synthetic worlds.
    let mut cfg = RunConfig {
        sweep: world.sensor.sweep_config(),
        dataset: Some(a.out.clone()),
        period: world.sensor.period,
        ..RunConfig::default()
    };
    cfg.optimizer.huber_delta = 0.1;
    cfg.sync();
    let cfg_path = a.out.join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?)
        .with_context(|| format!("writing {}", cfg_path.display()))?;
    Ok(json!({
        "sweeps": world.len(),
        "path_length_m": world.path_length(),
        "dataset": a.out,
        "ground_truth": a.out.join("poses.txt"),
        "config": cfg_path,
    }))
}

fn bench_map(a: BenchMapArgs) -> Result<Value> {
    let cfg = a.config.load(Vec::new())?;
    let stream = RevisitStream::new(&RevisitSpec {
        seed: a.seed,
        length: a.length,
        width: a.width,
        points_per_sweep: a.points,
        ..RevisitSpec::default()
    })?;
    let t = map_update_timings(&stream, a.sweeps, cfg.map, !a.no_baseline);
    if let Some(p) = &a.csv {
        let mut text = String::from("sweep,hash_ms,kd_ms\n");
        for (i, h) in t.hash_ms.iter().enumerate() {
            let kd = t.kd_ms.get(i).map(|v| v.to_string()).unwrap_or_default();
            text.push_str(&format!("{i},{h},{kd}\n"));
        }
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    let kd = if t.kd_ms.is_empty() {
        Value::Null
    } else {
        serde_json::to_value(decile_trend(&t.kd_ms)?)?
    };
    Ok(json!({
        "sweeps": a.sweeps,
        "lap_sweeps": stream.lap_sweeps(),
        "inserts": a.sweeps * a.points,
        "hash_map": decile_trend(&t.hash_ms)?,
        "kd_rebuild": kd,
    }))
}
