//! Synthetic 2D lidar datasets: line-segment worlds, exact ray casting,
//! Gaussian beam and odometry noise, and built-in scenario worlds with
//! waypoint trajectories.

use crate::model::{pose_compose_relative, Dataset, OdomIncrement, Pose2, ScanRecord};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown scenario '{0}' (expected room, sim1-like or sim2-like)")]
    UnknownScenario(String),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
}

/// Obstacles as a set of wall segments.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub segments: Vec<(Vector2<f64>, Vector2<f64>)>,
    pub name: String,
}

impl World {
    pub fn new(name: &str, segments: Vec<(Vector2<f64>, Vector2<f64>)>) -> Result<Self, SimError> {
        for (i, (a, b)) in segments.iter().enumerate() {
            if (a - b).norm() < 1e-12 {
                return Err(SimError::InvalidWorld(format!("segment {i} is degenerate")));
            }
        }
        Ok(Self {
            segments,
            name: name.to_string(),
        })
    }

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let a = Vector2::new(x0, y0);
        let b = Vector2::new(x1, y0);
        let c = Vector2::new(x1, y1);
        let d = Vector2::new(x0, y1);
        vec![(a, b), (b, c), (c, d), (d, a)]
    }
}

/// Beam layout and range noise of the simulated scanner. Defaults model a
/// 270-degree, 1081-beam unit with 30 m range and 0.02 m range noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSpec {
    pub n_beams: usize,
    pub angle_min: f64,
    pub angle_max: f64,
    pub range_max: f64,
    pub range_noise_sigma: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            n_beams: 1081,
            angle_min: -135.0f64.to_radians(),
            angle_max: 135.0f64.to_radians(),
            range_max: 30.0,
            range_noise_sigma: 0.02,
        }
    }
}

impl SensorSpec {
    pub fn angle_increment(&self) -> f64 {
        if self.n_beams <= 1 {
            0.0
        } else {
            (self.angle_max - self.angle_min) / (self.n_beams - 1) as f64
        }
    }
}

/// Odometry noise levels and the master seed for all noise streams.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub odom_xy_sigma: f64,
    pub odom_theta_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            odom_xy_sigma: 0.04,
            odom_theta_sigma: 0.003,
            seed: 1,
        }
    }
}

/// Noiseless ranges for every beam: minimum positive ray-segment
/// intersection distance, `None` beyond `range_max`.
pub fn raycast(world: &World, pose: &Pose2, spec: &SensorSpec) -> Vec<Option<f64>> {
    let inc = spec.angle_increment();
    (0..spec.n_beams)
        .map(|b| {
            let alpha = spec.angle_min + b as f64 * inc;
            let world_angle = pose.theta() + alpha;
            let d = Vector2::new(world_angle.cos(), world_angle.sin());
            let mut best = f64::INFINITY;
            for (a, bseg) in &world.segments {
                if let Some(r) = ray_segment(pose.t, d, *a, *bseg) {
                    best = best.min(r);
                }
            }
            (best <= spec.range_max).then_some(best)
        })
        .collect()
}

/// Parametric ray-segment intersection: the distance `r > 0` with
/// `o + r d = a + u (b - a)`, `0 <= u <= 1`. Parallel rays miss.
fn ray_segment(o: Vector2<f64>, d: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> Option<f64> {
    let e = b - a;
    let denom = d.x * e.y - d.y * e.x;
    if denom.abs() < 1e-15 {
        return None;
    }
    let ao = a - o;
    let r = (ao.x * e.y - ao.y * e.x) / denom;
    let u = (ao.x * d.y - ao.y * d.x) / denom;
    (r > 1e-9 && (0.0..=1.0).contains(&u)).then_some(r)
}

fn record_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates a dataset along `trajectory`: noisy ranges per beam, noisy
/// odometry increments between consecutive poses, ground truth recorded.
/// Noise streams are derived from `(seed, record index)`, so generation is
/// deterministic and independent of parallel scheduling.
pub fn generate_dataset(
    world: &World,
    trajectory: &[Pose2],
    sensor: &SensorSpec,
    noise: &NoiseSpec,
) -> Dataset {
    let sentinel = sensor.range_max + 1.0;
    let records: Vec<ScanRecord> = trajectory
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut rng = record_rng(noise.seed, 2 * i as u64);
            let beam_noise = Normal::new(0.0, sensor.range_noise_sigma.max(0.0)).unwrap();
            let ranges: Vec<f64> = raycast(world, pose, sensor)
                .into_iter()
                .map(|hit| match hit {
                    None => sentinel,
                    Some(r) => {
                        if sensor.range_noise_sigma <= 0.0 {
                            return r;
                        }
                        // Redraw the rare tail samples that would produce a
                        // non-physical range.
                        let mut noisy = r + beam_noise.sample(&mut rng);
                        while noisy < 1e-3 {
                            noisy = r + beam_noise.sample(&mut rng);
                        }
                        noisy.min(sensor.range_max)
                    }
                })
                .collect();
            let odom = (i > 0).then(|| {
                let (dt, dth) = pose_compose_relative(&trajectory[i - 1], pose);
                let mut rng = record_rng(noise.seed, 2 * i as u64 + 1);
                let (mut dt, mut dth) = (dt, dth);
                if noise.odom_xy_sigma > 0.0 {
                    let n = Normal::new(0.0, noise.odom_xy_sigma).unwrap();
                    dt.x += n.sample(&mut rng);
                    dt.y += n.sample(&mut rng);
                }
                if noise.odom_theta_sigma > 0.0 {
                    let n = Normal::new(0.0, noise.odom_theta_sigma).unwrap();
                    dth += n.sample(&mut rng);
                }
                // The recorded covariance reflects the injected noise; a tiny
                // floor keeps it positive definite for noise-free datasets,
                // whose increments really are exact.
                let sx = noise.odom_xy_sigma.max(1e-7);
                let st = noise.odom_theta_sigma.max(1e-7);
                let sigma = Matrix3::from_diagonal(&Vector3::new(sx * sx, sx * sx, st * st));
                OdomIncrement::new(dt, dth, Some(sigma)).expect("finite odometry increment")
            });
            ScanRecord {
                timestamp: i as f64 * 0.5,
                ranges,
                angle_min: sensor.angle_min,
                angle_increment: sensor.angle_increment(),
                range_max: sensor.range_max,
                odom,
                gt_pose: Some(*pose),
                init_pose: None,
            }
        })
        .collect();
    Dataset {
        records,
        meta: vec![("world".into(), world.name.clone())],
    }
}

/// Evenly resamples a waypoint polyline into `n` poses with chord headings;
/// `closed` joins the last waypoint back to the first.
pub fn trajectory_from_waypoints(waypoints: &[Vector2<f64>], n: usize, closed: bool) -> Vec<Pose2> {
    assert!(waypoints.len() >= 2 && n >= 2);
    let mut pts = waypoints.to_vec();
    if closed {
        pts.push(waypoints[0]);
    }
    let cum: Vec<f64> = pts
        .windows(2)
        .scan(0.0, |acc, w| {
            *acc += (w[1] - w[0]).norm();
            Some(*acc)
        })
        .collect();
    let total = *cum.last().unwrap();
    let at = |dist: f64| -> Vector2<f64> {
        let d = dist.clamp(0.0, total);
        let seg = cum.partition_point(|&c| c < d);
        let seg = seg.min(pts.len() - 2);
        let seg_start = if seg == 0 { 0.0 } else { cum[seg - 1] };
        let seg_len = cum[seg] - seg_start;
        let t = if seg_len > 0.0 {
            (d - seg_start) / seg_len
        } else {
            0.0
        };
        pts[seg] + (pts[seg + 1] - pts[seg]) * t
    };
    let step = if closed {
        total / n as f64
    } else {
        total / (n - 1) as f64
    };
    let positions: Vec<Vector2<f64>> = (0..n).map(|i| at(i as f64 * step)).collect();
    (0..n)
        .map(|i| {
            let dir = if closed {
                positions[(i + 1) % n] - positions[i]
            } else if i + 1 < n {
                positions[i + 1] - positions[i]
            } else {
                positions[i] - positions[i - 1]
            };
            Pose2::new(positions[i].x, positions[i].y, dir.y.atan2(dir.x))
        })
        .collect()
}

/// Built-in scenario worlds with their default pose counts (60, 340, 527).
pub fn make_scenario(name: &str) -> Result<(World, Vec<Pose2>), SimError> {
    let n = match name {
        "room" => 60,
        "sim1-like" => 340,
        "sim2-like" => 527,
        other => return Err(SimError::UnknownScenario(other.into())),
    };
    make_scenario_sized(name, n)
}

/// Scenario worlds with a caller-chosen trajectory length.
pub fn make_scenario_sized(name: &str, n_poses: usize) -> Result<(World, Vec<Pose2>), SimError> {
    match name {
        "room" => {
            // Rectangular room with an interior box and an L-shaped nook.
            let mut segs = World::rect(0.0, 0.0, 10.0, 8.0);
            segs.extend(World::rect(4.0, 3.2, 5.5, 4.8));
            segs.push((Vector2::new(8.5, 1.0), Vector2::new(8.5, 3.0)));
            segs.push((Vector2::new(8.5, 3.0), Vector2::new(9.5, 3.0)));
            let world = World::new("room", segs)?;
            // Elliptical loop around the box.
            let waypoints: Vec<Vector2<f64>> = (0..24)
                .map(|i| {
                    let phi = i as f64 / 24.0 * std::f64::consts::TAU;
                    Vector2::new(5.0 + 3.1 * phi.cos(), 4.0 + 2.3 * phi.sin())
                })
                .collect();
            Ok((world, trajectory_from_waypoints(&waypoints, n_poses, true)))
        }
        "sim1-like" => {
            // Three-bay hall traversed by an out-and-back serpentine.
            let mut segs = World::rect(0.0, 0.0, 20.0, 14.0);
            segs.push((Vector2::new(5.0, 0.0), Vector2::new(5.0, 9.0)));
            segs.push((Vector2::new(10.0, 5.0), Vector2::new(10.0, 14.0)));
            segs.push((Vector2::new(15.0, 0.0), Vector2::new(15.0, 9.0)));
            segs.extend(World::rect(1.5, 12.5, 2.5, 13.5));
            segs.extend(World::rect(13.2, 6.0, 14.2, 7.0));
            let world = World::new("sim1-like", segs)?;
            let fwd = [
                Vector2::new(2.5, 3.0),
                Vector2::new(2.5, 11.0),
                Vector2::new(7.5, 11.0),
                Vector2::new(7.5, 2.5),
                Vector2::new(12.5, 2.5),
                Vector2::new(12.5, 11.5),
                Vector2::new(17.5, 11.5),
                Vector2::new(17.5, 3.0),
            ];
            let mut waypoints = fwd.to_vec();
            waypoints.extend(fwd.iter().rev().skip(1).copied());
            Ok((world, trajectory_from_waypoints(&waypoints, n_poses, true)))
        }
        "sim2-like" => {
            // Square hall with corner boxes and wall stubs, crossed by a
            // figure-eight sweep with strong rotation everywhere.
            let mut segs = World::rect(0.0, 0.0, 18.0, 18.0);
            for (x, y) in [(2.0, 2.0), (15.0, 15.0), (2.0, 15.0), (15.0, 2.0)] {
                segs.extend(World::rect(x, y, x + 1.0, y + 1.0));
            }
            segs.push((Vector2::new(9.0, 0.0), Vector2::new(9.0, 3.0)));
            segs.push((Vector2::new(9.0, 15.0), Vector2::new(9.0, 18.0)));
            let world = World::new("sim2-like", segs)?;
            let waypoints: Vec<Vector2<f64>> = (0..64)
                .map(|i| {
                    let t = i as f64 / 64.0 * std::f64::consts::TAU;
                    Vector2::new(9.0 + 5.5 * t.sin(), 9.0 + 3.8 * (2.0 * t).sin())
                })
                .collect();
            Ok((world, trajectory_from_waypoints(&waypoints, n_poses, true)))
        }
        other => Err(SimError::UnknownScenario(other.into())),
    }
}
