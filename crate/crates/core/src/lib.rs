//! Batch 2D lidar SLAM that jointly optimizes the robot trajectory and a
//! continuous occupancy grid map from laser scans and odometry.
//!
//! The map is parameterized by log-odds evidence values at grid cell nodes and
//! evaluated anywhere by bilinear interpolation. Scans are converted into
//! free/occupied sample points along each beam, and a sparse Gauss-Newton
//! solver minimizes a weighted sum of observation, odometry and map-smoothing
//! residuals over all poses and node values at once. A synthetic lidar
//! simulator and trajectory/map accuracy metrics round out the toolkit.

pub mod eval;
pub mod grid;
pub mod io;
pub mod model;
pub mod objective;
pub mod sampling;
pub mod sim;
pub mod solver;
pub mod sparse;

pub use eval::{
    classify_map, map_errors, pose_errors, CellClassification, CellLabel, MapErrorReport,
    PoseErrorReport,
};
pub use grid::{GridGeometry, GridMap, HitMap};
pub use model::{
    anchor_at_origin, wrap_angle, Dataset, MapMode, OdomIncrement, Pose2, ScanRecord, SolverConfig,
};
pub use sampling::{sample_scan, SamplePoint, SampledScan};
pub use sim::{
    generate_dataset, make_scenario, make_scenario_sized, raycast, NoiseSpec, SensorSpec, World,
};
pub use solver::{solve, solve_with_progress, CovarianceSummary, SolveOutput, SolveReport};
