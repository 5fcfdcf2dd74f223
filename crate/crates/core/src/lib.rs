//! Edge-feature LiDAR odometry with a spatially hashed voxel map.
//!
//! The pipeline extracts high-curvature edge points per beam, registers
//! them against a local map with weighted point-to-line residuals, and
//! inserts them into a global map keyed by voxel cell.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod odometry;
pub mod pipeline;
pub mod sweep_io;
pub mod synth;
pub mod voxel_map;

pub use error::{Error, Result};
pub use features::{EdgePoint, EdgeSet, FeatureConfig};
pub use geometry::{Point3, PoseDelta6, PoseSE3};
pub use odometry::{optimize_pose, OptimizerConfig};
pub use pipeline::{run_sequence, run_source, RunConfig, RunOutput, Trajectory};
pub use sweep_io::{RawPoint, Scan, Sweep, SweepConfig};
pub use synth::{SyntheticWorld, WorldSpec};
pub use voxel_map::{GlobalMap, LocalMap, MapConfig};
