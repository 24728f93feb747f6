//! The joint Gauss-Newton solve: linearize, solve the sparse normal
//! equations, update poses and map, rebuild the hit map, with graduated
//! annealing of the smoothing weight.

use crate::grid::{
    compute_node_gradients, initialize_map, scatter_hits, GridGeometry, GridMap, HitMap,
};
use crate::model::{anchor_at_origin, Dataset, ModelError, Pose2, SolverConfig};
use crate::objective::{
    assemble_system, build_pattern, evaluate_cost, evaluate_cost_frozen, Problem, SmoothingMatrix,
    StateLayout, Weights,
};
use crate::sampling::{sample_scan, SampledScan};
use crate::sparse::{solve_linear_regularized, SparseError, SparseSymMatrix};
use nalgebra::Matrix3;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error("linear solve failed at iteration {iteration}: {source}")]
    LinearSolve {
        iteration: usize,
        #[source]
        source: SparseError,
    },
    #[error("cost became non-finite at iteration {0}")]
    NonFiniteCost(usize),
    #[error("{0}")]
    InvalidInput(String),
}

/// Marginal uncertainties at the solution: one 3x3 block per free pose and
/// one variance per map node.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSummary {
    /// Marginal covariance of poses `1..=n`, in order.
    pub pose_marginals: Vec<Matrix3<f64>>,
    pub node_variances: Vec<f64>,
}

/// Per-iteration progress snapshot passed to the caller's callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationInfo {
    pub k: usize,
    /// Accepted cost of this iteration under its own hit map and weights.
    pub cost: f64,
    pub step_sq_norm: f64,
    pub smoothing_weight: f64,
    pub skipped_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// True when the squared step norm dropped below `tau_delta` (or no
    /// descent step remained under step control).
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
    /// Initial cost followed by one accepted cost per iteration, each
    /// evaluated under that iteration's hit map and smoothing weight.
    /// Entries are comparable to the matching `cost_start_per_iter` value;
    /// consecutive entries live under different hit maps once poses move.
    pub cost_history: Vec<f64>,
    /// Cost at the start of each iteration under that iteration's own hit
    /// map and smoothing weight (the step-control reference).
    pub cost_start_per_iter: Vec<f64>,
    pub skipped_samples_per_iter: Vec<usize>,
    /// Smoothing weight used by each iteration.
    pub smoothing_weights: Vec<f64>,
    pub step_sq_norms: Vec<f64>,
    pub covariance: Option<CovarianceSummary>,
}

pub struct SolveOutput {
    pub poses: Vec<Pose2>,
    pub map: GridMap,
    pub hitmap: HitMap,
    pub report: SolveReport,
}

/// Smoothing weight at iteration `k` (1-based): divided by `d_s` every
/// `tau_s` iterations, floored at `w_s_floor`.
pub fn smoothing_weight_at(config: &SolverConfig, k: usize) -> f64 {
    let drops = (k / config.tau_s) as i32;
    (config.w_s_initial / config.d_s.powi(drops)).max(config.w_s_floor)
}

/// Solves the sparse SPD normal system; thin wrapper over the sparse module
/// kept for discoverability next to [`solve`].
pub fn solve_linear(normal: &SparseSymMatrix, rhs: &[f64]) -> Result<Vec<f64>, SparseError> {
    crate::sparse::solve_linear(normal, rhs)
}

/// Pose marginals and node variances from the normal matrix at the solution,
/// via per-column solves against the sparse factorization (the dense inverse
/// is never formed).
pub fn extract_covariance(
    normal: &SparseSymMatrix,
    layout: &StateLayout,
) -> Result<CovarianceSummary, SparseError> {
    let factor = normal.factor()?;
    let pose_marginals: Vec<Matrix3<f64>> = (1..=layout.n_poses)
        .into_par_iter()
        .map(|i| {
            let c = layout.pose_col(i);
            let block = factor.inverse_block(&[c, c + 1, c + 2]);
            Matrix3::from_fn(|r, cc| block[r][cc])
        })
        .collect();
    let node_variances: Vec<f64> = (0..layout.n_nodes)
        .into_par_iter()
        .map(|id| factor.inverse_diagonal_entry(layout.node_col(id)))
        .collect();
    Ok(CovarianceSummary {
        pose_marginals,
        node_variances,
    })
}

pub fn solve(
    dataset: &Dataset,
    init_poses: &[Pose2],
    config: &SolverConfig,
) -> Result<SolveOutput, SolveError> {
    solve_with_progress(dataset, init_poses, config, |_| {})
}

pub fn solve_with_progress(
    dataset: &Dataset,
    init_poses: &[Pose2],
    config: &SolverConfig,
    mut progress: impl FnMut(&IterationInfo),
) -> Result<SolveOutput, SolveError> {
    config.validate()?;
    dataset.validate()?;
    if init_poses.len() != dataset.records.len() {
        return Err(SolveError::InvalidInput(format!(
            "{} initial poses for {} records",
            init_poses.len(),
            dataset.records.len()
        )));
    }

    let mut poses = anchor_at_origin(init_poses);
    let samples: Vec<SampledScan> = dataset
        .records
        .par_iter()
        .map(|r| sample_scan(r, config.resolution_s))
        .collect::<Result<_, _>>()?;

    // Map geometry is fitted once from the initial guess and frozen; points
    // that later project outside are skipped per iteration.
    let geom = GridGeometry::fit(&samples, &poses, config.resolution_s, config.map_margin)?;
    let mut map = initialize_map(&samples, &poses, &geom, config.map_mode);
    let (mut hitmap, _) = scatter_hits(&samples, &poses, &geom, config.map_mode);

    let smoothing = SmoothingMatrix::build(&geom);
    let layout = StateLayout::new(poses.len() - 1, &geom);
    let use_odometry = dataset.has_odometry() && config.w_o > 0.0;
    let odom_edges: Vec<(crate::model::OdomIncrement, Matrix3<f64>)> = if use_odometry {
        dataset.records[1..]
            .iter()
            .map(|r| {
                let od = r.odom.unwrap();
                let inv = od.sigma.try_inverse().ok_or_else(|| {
                    SolveError::InvalidInput("odometry covariance not invertible".into())
                })?;
                Ok((od, inv))
            })
            .collect::<Result<_, SolveError>>()?
    } else {
        Vec::new()
    };
    let problem = Problem {
        layout: layout.clone(),
        geom: &geom,
        samples: &samples,
        odom_edges: &odom_edges,
        smoothing: &smoothing,
        mode: config.map_mode,
    };
    let pattern = std::sync::Arc::new(build_pattern(&layout, &geom));

    const TIKHONOV: f64 = 1e-8;
    let weights_at = |w_s: f64| Weights {
        w_z: config.w_z,
        w_o: if use_odometry { config.w_o } else { 0.0 },
        w_s,
        tikhonov: TIKHONOV,
    };

    // Outermost sample radius; bounds how far a heading change can move any
    // projected point (used by the discrete-mode step cap).
    let max_sample_radius = samples
        .iter()
        .flat_map(|s| s.points.iter())
        .map(|p| p.x_local.norm())
        .fold(1.0f64, f64::max);

    let mut node_gradients = compute_node_gradients(&map);
    let w_s_first = smoothing_weight_at(config, 1);
    let (initial_cost, _) = evaluate_cost(
        &problem,
        &poses,
        &map,
        &node_gradients,
        &hitmap,
        &weights_at(w_s_first),
    );
    if !initial_cost.is_finite() {
        return Err(SolveError::NonFiniteCost(0));
    }

    let mut cost_history = vec![initial_cost];
    let mut cost_start_per_iter = Vec::new();
    let mut skipped_per_iter = Vec::new();
    let mut smoothing_weights = Vec::new();
    let mut step_sq_norms = Vec::new();
    let mut converged = false;
    let mut final_w_s = w_s_first;

    for k in 1..=config.tau_k {
        let w_s = smoothing_weight_at(config, k);
        final_w_s = w_s;
        let weights = weights_at(w_s);

        node_gradients = compute_node_gradients(&map);
        let sys = assemble_system(
            &problem,
            &poses,
            &map,
            &node_gradients,
            &hitmap,
            &weights,
            &pattern,
        );
        if !sys.cost.is_finite() {
            return Err(SolveError::NonFiniteCost(k));
        }
        let (delta, _extra_reg) = solve_linear_regularized(&sys.normal, &sys.rhs, TIKHONOV)
            .map_err(|source| SolveError::LinearSolve {
                iteration: k,
                source,
            })?;

        // Descent reference: the iteration's own starting cost under its own
        // hit map and weights.
        let reference = sys.cost;

        let mut accepted: Option<(Vec<Pose2>, GridMap, f64, f64)> = None;
        // A nearest-node map is piecewise constant in the poses, so a
        // backtracking search sees no smooth descent there; discrete-mode
        // step control instead caps pose motion to half a cell per
        // iteration, keeping the linearization inside its validity region.
        let discrete = config.map_mode == crate::model::MapMode::DiscreteNearest;
        let mut alpha = if discrete && config.step_control {
            let mut max_trans: f64 = 0.0;
            let mut max_rot: f64 = 0.0;
            for i in 1..poses.len() {
                let c = layout.pose_col(i);
                max_trans =
                    max_trans.max((delta[c] * delta[c] + delta[c + 1] * delta[c + 1]).sqrt());
                max_rot = max_rot.max(delta[c + 2].abs());
            }
            let cap = 0.5 * config.resolution_s;
            let mut a: f64 = 1.0;
            if max_trans > cap {
                a = a.min(cap / max_trans);
            }
            if max_rot > cap / max_sample_radius {
                a = a.min(cap / (max_sample_radius * max_rot));
            }
            a
        } else {
            1.0
        };
        let max_tries = if config.step_control && !discrete {
            9
        } else {
            1
        };
        for _ in 0..max_tries {
            let (cand_poses, cand_map) = apply_step(&poses, &map, &layout, &delta, alpha, &geom);
            // Per-sample hit counts stay frozen at the linearization point,
            // matching the Jacobian, so the full step is a descent direction
            // of the compared cost.
            let cand_cost = evaluate_cost_frozen(
                &problem,
                &poses,
                &cand_poses,
                &cand_map,
                &node_gradients,
                &hitmap,
                &weights,
            );
            let unconditional = !config.step_control || discrete;
            if unconditional || cand_cost <= reference + 1e-12 * reference.abs() {
                if !cand_cost.is_finite() {
                    return Err(SolveError::NonFiniteCost(k));
                }
                accepted = Some((cand_poses, cand_map, cand_cost, alpha));
                break;
            }
            alpha *= 0.5;
        }

        let Some((new_poses, new_map, new_cost, alpha)) = accepted else {
            // No halved step descends below the reference: the linearization
            // has no usable progress left, stop here.
            converged = true;
            break;
        };

        let step_sq: f64 = delta.iter().map(|d| (alpha * d) * (alpha * d)).sum();
        poses = new_poses;
        map = new_map;
        let (new_hits, _) = scatter_hits(&samples, &poses, &geom, config.map_mode);
        hitmap = new_hits;

        cost_history.push(new_cost);
        cost_start_per_iter.push(sys.cost);
        skipped_per_iter.push(sys.skipped);
        smoothing_weights.push(w_s);
        step_sq_norms.push(step_sq);
        progress(&IterationInfo {
            k,
            cost: new_cost,
            step_sq_norm: step_sq,
            smoothing_weight: w_s,
            skipped_samples: sys.skipped,
        });

        if step_sq < config.tau_delta {
            converged = true;
            break;
        }
    }

    let covariance = if config.compute_covariance {
        node_gradients = compute_node_gradients(&map);
        let sys = assemble_system(
            &problem,
            &poses,
            &map,
            &node_gradients,
            &hitmap,
            &weights_at(final_w_s),
            &pattern,
        );
        extract_covariance(&sys.normal, &layout).ok()
    } else {
        None
    };

    debug_assert_eq!(poses[0], Pose2::identity());
    let report = SolveReport {
        converged,
        iterations: cost_history.len() - 1,
        final_cost: *cost_history.last().unwrap(),
        cost_history,
        cost_start_per_iter,
        skipped_samples_per_iter: skipped_per_iter,
        smoothing_weights,
        step_sq_norms,
        covariance,
    };
    Ok(SolveOutput {
        poses,
        map,
        hitmap,
        report,
    })
}

fn apply_step(
    poses: &[Pose2],
    map: &GridMap,
    layout: &StateLayout,
    delta: &[f64],
    alpha: f64,
    geom: &GridGeometry,
) -> (Vec<Pose2>, GridMap) {
    let mut new_poses = poses.to_vec();
    for i in 1..poses.len() {
        let c = layout.pose_col(i);
        let p = poses[i];
        new_poses[i] = Pose2::new(
            p.t.x + alpha * delta[c],
            p.t.y + alpha * delta[c + 1],
            p.theta() + alpha * delta[c + 2],
        );
    }
    let mut new_map = GridMap::zeros(geom.clone());
    for id in 0..layout.n_nodes {
        new_map.values[id] = map.values[id] + alpha * delta[layout.node_col(id)];
    }
    (new_poses, new_map)
}
