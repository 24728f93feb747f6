//! Shared domain types: poses, odometry, scans, datasets and solver
//! configuration.

use nalgebra::{Matrix2, Matrix3, Vector2};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Wraps an angle to `[-pi, pi]`. Errors on non-finite input.
pub fn wrap_angle(a: f64) -> Result<f64, ModelError> {
    if !a.is_finite() {
        return Err(ModelError::InvalidArgument(format!(
            "angle must be finite, got {a}"
        )));
    }
    Ok(wrap(a))
}

/// Infallible wrap for values already known to be finite.
pub(crate) fn wrap(a: f64) -> f64 {
    debug_assert!(a.is_finite());
    a - TAU * ((a + PI) / TAU).floor()
}

/// A robot pose in SE(2): world position `t` and heading `theta`.
///
/// `theta` is always stored wrapped to `[-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub t: Vector2<f64>,
    theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            t: Vector2::new(x, y),
            theta: if theta.is_finite() {
                wrap(theta)
            } else {
                theta
            },
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Rotation matrix `[[cos t, sin t], [-sin t, cos t]]` mapping world-frame
    /// vectors into the robot frame.
    pub fn rotation(&self) -> Matrix2<f64> {
        rot_world_to_local(self.theta)
    }

    /// Transforms a point from the robot/laser frame into the world frame.
    pub fn local_to_world(&self, p_local: Vector2<f64>) -> Vector2<f64> {
        self.rotation().transpose() * p_local + self.t
    }
}

/// `[[cos t, sin t], [-sin t, cos t]]`: applied to a world-frame vector it
/// yields the robot-frame vector; its transpose rotates local to world.
pub(crate) fn rot_world_to_local(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, s, -s, c)
}

/// Derivative of [`rot_world_to_local`] with respect to the angle.
pub(crate) fn rot_world_to_local_dtheta(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, c, -c, -s)
}

/// Relative motion between two consecutive poses, expressed in the earlier
/// pose's frame, with its covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdomIncrement {
    /// Translation in the previous pose's frame.
    pub dt: Vector2<f64>,
    /// Heading change, wrapped to `[-pi, pi]`.
    pub dtheta: f64,
    /// Covariance of `(dt.x, dt.y, dtheta)`; symmetric positive definite.
    pub sigma: Matrix3<f64>,
}

/// Covariance used when a record does not carry one: 0.04 m on x-y,
/// 0.003 rad on heading.
pub fn default_odom_sigma() -> Matrix3<f64> {
    Matrix3::from_diagonal(&nalgebra::Vector3::new(
        0.04 * 0.04,
        0.04 * 0.04,
        0.003 * 0.003,
    ))
}

impl OdomIncrement {
    /// Builds an increment, applying the default covariance when `sigma` is
    /// absent. Rejects non-finite values and non-SPD covariances.
    pub fn new(
        dt: Vector2<f64>,
        dtheta: f64,
        sigma: Option<Matrix3<f64>>,
    ) -> Result<Self, ModelError> {
        if !dt.x.is_finite() || !dt.y.is_finite() || !dtheta.is_finite() {
            return Err(ModelError::InvalidArgument(
                "odometry increment must be finite".into(),
            ));
        }
        let sigma = sigma.unwrap_or_else(default_odom_sigma);
        if (sigma - sigma.transpose()).norm() > 1e-9 * sigma.norm().max(1.0) {
            return Err(ModelError::InvalidArgument(
                "odometry covariance must be symmetric".into(),
            ));
        }
        if nalgebra::Cholesky::new(sigma).is_none() {
            return Err(ModelError::InvalidArgument(
                "odometry covariance must be positive definite".into(),
            ));
        }
        Ok(Self {
            dt,
            dtheta: wrap(dtheta),
            sigma,
        })
    }
}

/// The noiseless odometry between two poses: `(R(theta_prev) * (t_next -
/// t_prev), wrap(theta_next - theta_prev))`. Plugged back into the odometry
/// residual it yields exactly zero.
pub fn pose_compose_relative(prev: &Pose2, next: &Pose2) -> (Vector2<f64>, f64) {
    let dt = prev.rotation() * (next.t - prev.t);
    (dt, wrap(next.theta - prev.theta))
}

/// Composes two relative increments `(dt, dtheta)` into one covering both
/// steps, with first-order covariance propagation.
pub fn compose_increments(a: &OdomIncrement, b: &OdomIncrement) -> OdomIncrement {
    let rot_a = rot_world_to_local(a.dtheta).transpose();
    let dt = a.dt + rot_a * b.dt;
    let dtheta = wrap(a.dtheta + b.dtheta);

    // d(net)/d(a) and d(net)/d(b) for the composition above.
    let drot_a = rot_world_to_local_dtheta(a.dtheta).transpose();
    let col = drot_a * b.dt;
    let mut ja = Matrix3::identity();
    ja[(0, 2)] = col.x;
    ja[(1, 2)] = col.y;
    let mut jb = Matrix3::identity();
    jb.fixed_view_mut::<2, 2>(0, 0).copy_from(&rot_a);
    let sigma = ja * a.sigma * ja.transpose() + jb * b.sigma * jb.transpose();
    // Propagated covariance stays SPD; construct directly.
    OdomIncrement {
        dt,
        dtheta,
        sigma: 0.5 * (sigma + sigma.transpose()),
    }
}

/// One lidar scan plus the odometry increment that led to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub timestamp: f64,
    /// One range per beam, meters. A value of `range_max + 1` marks a beam
    /// with no return.
    pub ranges: Vec<f64>,
    pub angle_min: f64,
    pub angle_increment: f64,
    pub range_max: f64,
    /// Absent on the first record of a dataset.
    pub odom: Option<OdomIncrement>,
    pub gt_pose: Option<Pose2>,
    pub init_pose: Option<Pose2>,
}

impl ScanRecord {
    pub fn beam_angle(&self, beam: usize) -> f64 {
        self.angle_min + beam as f64 * self.angle_increment
    }

    /// True when the stored range means "no return".
    pub fn is_no_return(&self, range: f64) -> bool {
        range > self.range_max
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.ranges.is_empty() {
            return Err(ModelError::InvalidArgument(
                "scan must have at least one beam".into(),
            ));
        }
        let sentinel = self.range_max + 1.0;
        for (b, &r) in self.ranges.iter().enumerate() {
            let ok =
                r.is_finite() && r > 0.0 && (r <= self.range_max || (r - sentinel).abs() < 1e-9);
            if !ok {
                return Err(ModelError::InvalidArgument(format!(
                    "beam {b}: range {r} outside (0, {}] and not the no-return sentinel {}",
                    self.range_max, sentinel
                )));
            }
        }
        Ok(())
    }
}

/// An ordered sequence of scan records with free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<ScanRecord>,
    pub meta: Vec<(String, String)>,
}

impl Dataset {
    /// Number of odometry edges (`records.len() - 1`).
    pub fn n_edges(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn has_odometry(&self) -> bool {
        self.records.len() >= 2 && self.records[1..].iter().all(|r| r.odom.is_some())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.records.len() < 2 {
            return Err(ModelError::InvalidArgument(
                "dataset needs at least two records".into(),
            ));
        }
        if self.records[0].odom.is_some() {
            return Err(ModelError::InvalidArgument(
                "odometry on first record".into(),
            ));
        }
        let with_odom = self.records[1..]
            .iter()
            .filter(|r| r.odom.is_some())
            .count();
        if with_odom != 0 && with_odom != self.records.len() - 1 {
            return Err(ModelError::InvalidArgument(
                "odometry must be present on all records after the first, or on none".into(),
            ));
        }
        for (i, r) in self.records.iter().enumerate() {
            r.validate()
                .map_err(|e| ModelError::InvalidArgument(format!("record {i}: {e}")))?;
        }
        Ok(())
    }

    /// Ground-truth poses, if every record carries one.
    pub fn gt_poses(&self) -> Option<Vec<Pose2>> {
        self.records.iter().map(|r| r.gt_pose).collect()
    }

    /// Externally supplied initial-guess poses, if every record carries one.
    pub fn init_poses(&self) -> Option<Vec<Pose2>> {
        self.records.iter().map(|r| r.init_pose).collect()
    }

    /// Integrates the odometry increments from the origin (dead reckoning).
    pub fn dead_reckon(&self) -> Result<Vec<Pose2>, ModelError> {
        if !self.has_odometry() {
            return Err(ModelError::InvalidArgument(
                "dataset has no odometry to integrate".into(),
            ));
        }
        let mut poses = Vec::with_capacity(self.records.len());
        poses.push(Pose2::identity());
        for r in &self.records[1..] {
            let od = r.odom.as_ref().unwrap();
            let prev = *poses.last().unwrap();
            let t = prev.t + prev.rotation().transpose() * od.dt;
            poses.push(Pose2::new(t.x, t.y, prev.theta + od.dtheta));
        }
        Ok(poses)
    }
}

/// Re-expresses a trajectory in the frame of its first pose, so pose 0
/// becomes exactly the origin.
pub fn anchor_at_origin(poses: &[Pose2]) -> Vec<Pose2> {
    if poses.is_empty() {
        return Vec::new();
    }
    let p0 = poses[0];
    poses
        .iter()
        .map(|p| {
            let (dt, dth) = pose_compose_relative(&p0, p);
            Pose2::new(dt.x, dt.y, dth)
        })
        .collect()
}

/// How map values and hit counts are looked up at continuous coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MapMode {
    /// Bilinear interpolation over the four adjacent nodes.
    #[default]
    Continuous,
    /// Nearest-node lookup (map-representation ablation).
    DiscreteNearest,
}

/// Weights, schedules and thresholds of the joint solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Grid node spacing in meters; also the beam sampling step.
    pub resolution_s: f64,
    /// Observation term weight.
    pub w_z: f64,
    /// Odometry term weight.
    pub w_o: f64,
    /// Initial smoothing weight; divided by `d_s` every `tau_s` iterations.
    pub w_s_initial: f64,
    /// Annealing divisor, > 1.
    pub d_s: f64,
    /// Iterations between annealing steps.
    pub tau_s: usize,
    /// Maximum iterations.
    pub tau_k: usize,
    /// Stop once the squared step norm drops below this.
    pub tau_delta: f64,
    /// Smoothing weight never anneals below this.
    pub w_s_floor: f64,
    /// Meters added around the initial-guess bounding box when the map
    /// geometry is fitted.
    pub map_margin: f64,
    /// Backtracking step halving when a full step increases cost.
    pub step_control: bool,
    /// Map lookup model; `DiscreteNearest` is the ablation toggle.
    pub map_mode: MapMode,
    /// Compute pose marginals and node variances at the solution.
    pub compute_covariance: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            resolution_s: 0.2,
            w_z: 1.0,
            w_o: 1.0,
            w_s_initial: 0.1,
            d_s: 10.0,
            tau_s: 18,
            tau_k: 60,
            tau_delta: 1e-8,
            w_s_floor: 1e-4,
            map_margin: 1.0,
            step_control: true,
            map_mode: MapMode::Continuous,
            compute_covariance: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        if !(self.resolution_s.is_finite() && self.resolution_s > 0.0) {
            problems.push("resolution_s must be > 0");
        }
        if self.tau_s < 1 {
            problems.push("tau_s must be >= 1");
        }
        if self.tau_k < 1 {
            problems.push("tau_k must be >= 1");
        }
        if !(self.tau_delta.is_finite() && self.tau_delta > 0.0) {
            problems.push("tau_delta must be > 0");
        }
        if !(self.d_s.is_finite() && self.d_s > 1.0) {
            problems.push("d_s must be > 1");
        }
        if !(self.w_s_floor.is_finite() && self.w_s_floor >= 0.0) {
            problems.push("w_s_floor must be >= 0");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidArgument(problems.join("; ")))
        }
    }
}
