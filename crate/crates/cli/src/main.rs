//! Command-line front end: simulate synthetic datasets, run the joint
//! pose/map solve, evaluate results and decimate datasets.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gridslam::io::{
    load_poses, parse_dataset, parse_trajectory, parse_world, subsample_dataset, write_dataset,
    write_metrics, write_outputs, write_trajectory, write_world, SolveArtifacts,
};
use gridslam::model::anchor_at_origin;
use gridslam::sim::{
    generate_dataset, make_scenario_sized, trajectory_from_waypoints, NoiseSpec, SensorSpec,
};
use gridslam::{
    classify_map, map_errors, pose_errors, solve_with_progress, Dataset, MapMode, Pose2,
    SolverConfig,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "gridslam",
    about = "Batch 2D lidar SLAM: jointly optimizes a trajectory and an occupancy grid map",
    version
)]
struct Cli {
    /// Worker thread cap. Outputs are deterministic for any thread count;
    /// --threads 1 additionally forces fully serial execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lidar dataset from a built-in scenario or a
    /// world file plus trajectory.
    Simulate(SimulateArgs),
    /// Jointly optimize robot poses and the occupancy map from a dataset.
    Solve(SolveArgs),
    /// Compare an estimated trajectory (and optionally maps) against ground
    /// truth.
    Evaluate(EvaluateArgs),
    /// Drop records to a fraction of the original rate, compounding odometry
    /// across dropped steps.
    Subsample(SubsampleArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in scenario: room, sim1-like or sim2-like.
    #[arg(long, conflicts_with = "world")]
    scenario: Option<String>,
    /// World file to ray-cast instead of a scenario.
    #[arg(long, requires = "trajectory")]
    world: Option<PathBuf>,
    /// Trajectory file with the ground-truth poses (used with --world).
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Number of poses (scenario default when omitted).
    #[arg(long)]
    poses: Option<usize>,
    /// Noise stream seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1081)]
    beams: usize,
    #[arg(long, default_value_t = 30.0)]
    range_max: f64,
    /// Per-beam range noise sigma, meters.
    #[arg(long, default_value_t = 0.02)]
    range_noise: f64,
    /// Odometry x-y noise sigma, meters per step.
    #[arg(long, default_value_t = 0.04)]
    odom_xy_noise: f64,
    /// Odometry heading noise sigma, radians per step.
    #[arg(long, default_value_t = 0.003)]
    odom_theta_noise: f64,
    /// Output directory (dataset.txt, world.txt, gt_trajectory.txt).
    #[arg(long, env = "GRIDSLAM_OUT_DIR")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SolverFlags {
    /// Grid node spacing in meters (also the beam sampling step).
    #[arg(long, default_value_t = 0.2)]
    resolution: f64,
    /// Observation term weight.
    #[arg(long, default_value_t = 1.0)]
    w_z: f64,
    /// Odometry term weight (0 disables the term).
    #[arg(long, default_value_t = 1.0)]
    w_o: f64,
    /// Initial smoothing weight. Around 0.01 suits dense desk-scale scans;
    /// larger values widen the basin for poor initial guesses.
    #[arg(long, default_value_t = 0.1)]
    w_s: f64,
    /// Smoothing anneal divisor.
    #[arg(long, default_value_t = 10.0)]
    d_s: f64,
    /// Iterations between smoothing anneals.
    #[arg(long, default_value_t = 18)]
    tau_s: usize,
    /// Maximum iterations.
    #[arg(long, default_value_t = 60)]
    tau_k: usize,
    /// Squared-step-norm stopping threshold.
    #[arg(long, default_value_t = 1e-8)]
    tau_delta: f64,
    /// Smoothing weight floor.
    #[arg(long, default_value_t = 1e-4)]
    w_s_floor: f64,
    /// Map border margin around the initial guess, meters.
    #[arg(long, default_value_t = 1.0)]
    map_margin: f64,
    /// Disable backtracking step control.
    #[arg(long)]
    no_step_control: bool,
    /// Nearest-node map lookups instead of bilinear interpolation.
    #[arg(long)]
    discrete_map: bool,
    /// Compute pose marginals and the node-variance uncertainty map.
    #[arg(long)]
    covariance: bool,
}

impl SolverFlags {
    fn to_config(&self) -> SolverConfig {
        SolverConfig {
            resolution_s: self.resolution,
            w_z: self.w_z,
            w_o: self.w_o,
            w_s_initial: self.w_s,
            d_s: self.d_s,
            tau_s: self.tau_s,
            tau_k: self.tau_k,
            tau_delta: self.tau_delta,
            w_s_floor: self.w_s_floor,
            map_margin: self.map_margin,
            step_control: !self.no_step_control,
            map_mode: if self.discrete_map {
                MapMode::DiscreteNearest
            } else {
                MapMode::Continuous
            },
            compute_covariance: self.covariance,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Dataset file.
    dataset: PathBuf,
    /// Output directory.
    #[arg(long, env = "GRIDSLAM_OUT_DIR")]
    out: PathBuf,
    /// Initial guess source: integrate odometry, read a pose file, or use
    /// the init poses embedded in the dataset records.
    #[arg(long, default_value = "odometry", value_parser = ["odometry", "file", "embedded"])]
    init: String,
    /// Trajectory file used when --init file.
    #[arg(long)]
    init_file: Option<PathBuf>,
    /// Add Gaussian noise to the initial poses: sigma_xy sigma_theta seed.
    #[arg(long, num_args = 3, value_names = ["SIGMA_XY", "SIGMA_THETA", "SEED"])]
    perturb_init: Option<Vec<f64>>,
    /// Occupied-probability classification threshold.
    #[arg(long, default_value_t = 0.6)]
    p_occ: f64,
    /// Free-probability classification threshold.
    #[arg(long, default_value_t = 0.4)]
    p_free: f64,
    /// Print one progress line per iteration.
    #[arg(long)]
    progress: bool,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated trajectory file.
    #[arg(long)]
    estimate: PathBuf,
    /// Ground truth: a trajectory file or a dataset with gt poses.
    #[arg(long)]
    truth: PathBuf,
    /// Dataset used to additionally build and compare occupancy maps from
    /// both pose sets.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Map resolution for the --dataset map comparison.
    #[arg(long, default_value_t = 0.2)]
    resolution: f64,
    #[arg(long, default_value_t = 0.6)]
    p_occ: f64,
    #[arg(long, default_value_t = 0.4)]
    p_free: f64,
    /// Write the metrics to this file as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SubsampleArgs {
    /// Dataset file.
    dataset: PathBuf,
    /// Fraction of records to keep, in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not configure {n} worker threads: {e}");
            return std::process::ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Solve(args) => run_solve(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Subsample(args) => run_subsample(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::from(1)
        }
    }
}

fn check_thresholds(p_occ: f64, p_free: f64) -> Result<()> {
    if !(0.0 < p_free && p_free < p_occ && p_occ < 1.0) {
        bail!("thresholds must satisfy 0 < --p-free < --p-occ < 1 (got {p_free} and {p_occ})");
    }
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let (world, trajectory) = if let Some(name) = &args.scenario {
        match args.poses {
            Some(n) => make_scenario_sized(name, n)?,
            None => gridslam::make_scenario(name)?,
        }
    } else if let (Some(world_path), Some(traj_path)) = (&args.world, &args.trajectory) {
        let world = parse_world(world_path)?;
        let waypoints = parse_trajectory(traj_path)?;
        let traj = match args.poses {
            Some(n) => trajectory_from_waypoints(
                &waypoints.iter().map(|p| p.t).collect::<Vec<_>>(),
                n,
                false,
            ),
            None => waypoints,
        };
        (world, traj)
    } else {
        bail!("either --scenario or --world with --trajectory is required");
    };

    let sensor = SensorSpec {
        n_beams: args.beams,
        range_max: args.range_max,
        range_noise_sigma: args.range_noise,
        ..SensorSpec::default()
    };
    let noise = NoiseSpec {
        odom_xy_sigma: args.odom_xy_noise,
        odom_theta_sigma: args.odom_theta_noise,
        seed: args.seed,
    };
    let ds = generate_dataset(&world, &trajectory, &sensor, &noise);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_dataset(&args.out.join("dataset.txt"), &ds)?;
    write_world(&args.out.join("world.txt"), &world)?;
    write_trajectory(&args.out.join("gt_trajectory.txt"), &trajectory)?;
    println!(
        "wrote {} records ({} beams each) to {}",
        ds.records.len(),
        args.beams,
        args.out.join("dataset.txt").display()
    );
    Ok(())
}

fn initial_poses(args: &SolveArgs, ds: &Dataset) -> Result<Vec<Pose2>> {
    let mut init = match args.init.as_str() {
        "odometry" => ds
            .dead_reckon()
            .context("integrating odometry for the initial guess")?,
        "file" => {
            let path = args
                .init_file
                .as_ref()
                .context("--init file requires --init-file")?;
            let poses = parse_trajectory(path)?;
            if poses.len() != ds.records.len() {
                bail!(
                    "initial pose file has {} poses for {} records",
                    poses.len(),
                    ds.records.len()
                );
            }
            poses
        }
        "embedded" => ds
            .init_poses()
            .context("dataset records carry no embedded init poses")?,
        other => bail!("unknown init source '{other}'"),
    };
    if let Some(p) = &args.perturb_init {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let (sxy, sth, seed) = (p[0], p[1], p[2] as u64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let nxy = Normal::new(0.0, sxy.max(0.0)).unwrap();
        let nth = Normal::new(0.0, sth.max(0.0)).unwrap();
        init = init
            .iter()
            .map(|pose| {
                Pose2::new(
                    pose.t.x + nxy.sample(&mut rng),
                    pose.t.y + nxy.sample(&mut rng),
                    pose.theta() + nth.sample(&mut rng),
                )
            })
            .collect();
    }
    Ok(init)
}

fn run_solve(args: SolveArgs) -> Result<()> {
    check_thresholds(args.p_occ, args.p_free)?;
    let ds = parse_dataset(&args.dataset)?;
    let config = args.solver.to_config();
    let init = initial_poses(&args, &ds)?;
    let show_progress = args.progress;
    let out = solve_with_progress(&ds, &init, &config, |info| {
        if show_progress {
            eprintln!(
                "iter {:3}  cost {:14.4}  |step|^2 {:10.3e}  w_s {:8.2e}  skipped {}",
                info.k, info.cost, info.step_sq_norm, info.smoothing_weight, info.skipped_samples
            );
        }
    })?;

    // Metrics whenever the dataset carries ground truth: pose errors against
    // the anchored truth, map quality against the truth-pose map at the same
    // geometry.
    let mut pose_report = None;
    let mut map_report = None;
    if let Some(gt_raw) = ds.gt_poses() {
        let gt = anchor_at_origin(&gt_raw);
        pose_report = Some(pose_errors(&out.poses, &gt)?);
        let samples: Vec<_> = ds
            .records
            .iter()
            .map(|r| gridslam::sample_scan(r, config.resolution_s))
            .collect::<Result<_, _>>()?;
        let gt_map = gridslam::grid::initialize_map(&samples, &gt, &out.map.geom, config.map_mode);
        let (gt_hits, _) =
            gridslam::grid::scatter_hits(&samples, &gt, &out.map.geom, config.map_mode);
        let est_cls = classify_map(&out.map, &out.hitmap, args.p_occ, args.p_free);
        let gt_cls = classify_map(&gt_map, &gt_hits, args.p_occ, args.p_free);
        map_report = map_errors(&est_cls, &gt_cls).ok();
    }

    let artifacts = SolveArtifacts {
        poses: &out.poses,
        map: &out.map,
        hitmap: &out.hitmap,
        covariance: out.report.covariance.as_ref(),
        pose_report: pose_report.as_ref(),
        map_report: map_report.as_ref(),
        p_occ_thresh: args.p_occ,
        p_free_thresh: args.p_free,
    };
    let files = write_outputs(&args.out, &artifacts)?;
    println!(
        "{} after {} iterations, final cost {:.4}",
        if out.report.converged {
            "converged"
        } else {
            "stopped at the iteration cap"
        },
        out.report.iterations,
        out.report.final_cost
    );
    if let Some(p) = &pose_report {
        println!(
            "pose errors: MAE {:.4} m / {:.5} rad, RMSE {:.4} m / {:.5} rad",
            p.mae_translation, p.mae_rotation, p.rmse_translation, p.rmse_rotation
        );
    }
    if let Some(m) = &map_report {
        println!(
            "map quality: AUC {:.4}, known-cell precision {:.4}",
            m.auc,
            m.known_cell_precision()
        );
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    check_thresholds(args.p_occ, args.p_free)?;
    let estimate = anchor_at_origin(&parse_trajectory(&args.estimate)?);
    let truth = anchor_at_origin(&load_poses(&args.truth)?);
    let pose_report = pose_errors(&estimate, &truth)?;
    println!("mae_translation {}", pose_report.mae_translation);
    println!("mae_rotation {}", pose_report.mae_rotation);
    println!("rmse_translation {}", pose_report.rmse_translation);
    println!("rmse_rotation {}", pose_report.rmse_rotation);

    let mut map_report = None;
    if let Some(ds_path) = &args.dataset {
        let ds = parse_dataset(ds_path)?;
        if ds.records.len() != estimate.len() {
            bail!(
                "dataset has {} records for {} poses",
                ds.records.len(),
                estimate.len()
            );
        }
        let samples: Vec<_> = ds
            .records
            .iter()
            .map(|r| gridslam::sample_scan(r, args.resolution))
            .collect::<Result<_, _>>()?;
        // Maps remapped from both pose sets on a shared geometry.
        let geom = gridslam::GridGeometry::fit(&samples, &truth, args.resolution, 1.0)?;
        let build = |poses: &[Pose2]| {
            let map = gridslam::grid::initialize_map(&samples, poses, &geom, MapMode::Continuous);
            let (hits, _) =
                gridslam::grid::scatter_hits(&samples, poses, &geom, MapMode::Continuous);
            classify_map(&map, &hits, args.p_occ, args.p_free)
        };
        let est_cls = build(&estimate);
        let gt_cls = build(&truth);
        let report = map_errors(&est_cls, &gt_cls)?;
        println!("auc {}", report.auc);
        println!("precision_known {}", report.known_cell_precision());
        map_report = Some(report);
    }
    if let Some(out) = &args.out {
        write_metrics(out, Some(&pose_report), map_report.as_ref())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run_subsample(args: SubsampleArgs) -> Result<()> {
    let ds = parse_dataset(&args.dataset)?;
    let sub = subsample_dataset(&ds, args.rate)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_dataset(&args.out, &sub)?;
    println!(
        "kept {} of {} records at rate {}",
        sub.records.len(),
        ds.records.len(),
        args.rate
    );
    Ok(())
}
