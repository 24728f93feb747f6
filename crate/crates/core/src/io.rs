//! Plain-text dataset/world/trajectory/metrics formats and binary grayscale
//! raster export with text sidecars. Every format starts with a magic token
//! and a format version; readers reject unknown majors.

use crate::eval::{classify_map, CellLabel, MapErrorReport, PoseErrorReport};
use crate::grid::{GridMap, HitMap};
use crate::model::{compose_increments, Dataset, OdomIncrement, Pose2, ScanRecord};
use crate::sim::World;
use crate::solver::CovarianceSummary;
use nalgebra::{Matrix3, Vector2};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DATASET_MAGIC: &str = "GRIDSLAM_DATASET";
pub const WORLD_MAGIC: &str = "GRIDSLAM_WORLD";
pub const TRAJECTORY_MAGIC: &str = "GRIDSLAM_TRAJECTORY";
pub const METRICS_MAGIC: &str = "GRIDSLAM_METRICS";
pub const RASTER_META_MAGIC: &str = "GRIDSLAM_RASTER_META";
pub const FORMAT_VERSION: u32 = 1;

/// Evidence exported to rasters is clamped to this symmetric range.
pub const EXPORT_EVIDENCE_CLAMP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: expected '{expected} {FORMAT_VERSION}' header, found '{found}'")]
    BadHeader {
        path: String,
        expected: String,
        found: String,
    },
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads and checks the `<MAGIC> <version>` header line, returning the rest
/// of the lines with their 1-based numbers.
fn check_header<'a>(
    path: &Path,
    content: &'a str,
    magic: &str,
) -> Result<impl Iterator<Item = (usize, &'a str)>, IoError> {
    let mut lines = content.lines();
    let first = lines.next().unwrap_or("");
    let mut parts = first.split_whitespace();
    let found_magic = parts.next().unwrap_or("");
    let found_version: Option<u32> = parts.next().and_then(|v| v.parse().ok());
    if found_magic != magic || found_version != Some(FORMAT_VERSION) {
        return Err(IoError::BadHeader {
            path: path.display().to_string(),
            expected: magic.to_string(),
            found: first.to_string(),
        });
    }
    Ok(content
        .lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#')))
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(path: &'a Path, line: usize, rest: &'a str) -> Self {
        Self {
            path,
            line,
            it: rest.split_whitespace(),
        }
    }

    fn next_f64(&mut self, what: &str) -> Result<f64, IoError> {
        let tok = self
            .it
            .next()
            .ok_or_else(|| parse_err(self.path, self.line, format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| parse_err(self.path, self.line, format!("bad {what}: '{tok}'")))
    }

    fn next_usize(&mut self, what: &str) -> Result<usize, IoError> {
        let tok = self
            .it
            .next()
            .ok_or_else(|| parse_err(self.path, self.line, format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| parse_err(self.path, self.line, format!("bad {what}: '{tok}'")))
    }

    fn peek_tag(&mut self) -> Option<&'a str> {
        self.it.clone().next()
    }

    fn take_tag(&mut self) {
        self.it.next();
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(&format!("{DATASET_MAGIC} {FORMAT_VERSION}\n"));
    for (k, v) in &ds.meta {
        out.push_str(&format!("meta {k} {v}\n"));
    }
    for r in &ds.records {
        out.push_str(&format!(
            "record {} {} {} {} {}",
            r.timestamp,
            r.angle_min,
            r.angle_increment,
            r.range_max,
            r.ranges.len()
        ));
        for v in &r.ranges {
            out.push_str(&format!(" {v}"));
        }
        if let Some(od) = &r.odom {
            out.push_str(&format!(" odom {} {} {}", od.dt.x, od.dt.y, od.dtheta));
            for i in 0..3 {
                for j in 0..3 {
                    out.push_str(&format!(" {}", od.sigma[(i, j)]));
                }
            }
        }
        if let Some(p) = &r.gt_pose {
            out.push_str(&format!(" gt {} {} {}", p.t.x, p.t.y, p.theta()));
        }
        if let Some(p) = &r.init_pose {
            out.push_str(&format!(" init {} {} {}", p.t.x, p.t.y, p.theta()));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn parse_dataset(path: &Path) -> Result<Dataset, IoError> {
    let content = fs::read_to_string(path)?;
    let lines = check_header(path, &content, DATASET_MAGIC)?;
    let mut ds = Dataset::default();
    let mut beam_count: Option<usize> = None;
    for (lineno, line) in lines {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("meta ") {
            let mut parts = rest.splitn(2, char::is_whitespace);
            let key = parts.next().unwrap_or("").to_string();
            let value = parts.next().unwrap_or("").trim().to_string();
            ds.meta.push((key, value));
            continue;
        }
        let Some(rest) = trimmed.strip_prefix("record") else {
            return Err(parse_err(
                path,
                lineno,
                format!("unknown record tag: '{trimmed}'"),
            ));
        };
        let mut f = Fields::new(path, lineno, rest);
        let timestamp = f.next_f64("timestamp")?;
        let angle_min = f.next_f64("angle_min")?;
        let angle_increment = f.next_f64("angle_increment")?;
        let range_max = f.next_f64("range_max")?;
        let n_beams = f.next_usize("beam count")?;
        if let Some(expected) = beam_count {
            if n_beams != expected {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("inconsistent beam count {n_beams}, expected {expected}"),
                ));
            }
        } else {
            beam_count = Some(n_beams);
        }
        let mut ranges = Vec::with_capacity(n_beams);
        for b in 0..n_beams {
            ranges.push(f.next_f64(&format!("range {b}"))?);
        }
        let mut odom = None;
        let mut gt_pose = None;
        let mut init_pose = None;
        while let Some(tag) = f.peek_tag() {
            match tag {
                "odom" => {
                    f.take_tag();
                    let dx = f.next_f64("odom dx")?;
                    let dy = f.next_f64("odom dy")?;
                    let dth = f.next_f64("odom dtheta")?;
                    let mut sigma = Matrix3::zeros();
                    for i in 0..3 {
                        for j in 0..3 {
                            sigma[(i, j)] = f.next_f64("odom sigma")?;
                        }
                    }
                    let od = OdomIncrement::new(Vector2::new(dx, dy), dth, Some(sigma))
                        .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                    odom = Some(od);
                }
                "gt" => {
                    f.take_tag();
                    let x = f.next_f64("gt x")?;
                    let y = f.next_f64("gt y")?;
                    let th = f.next_f64("gt theta")?;
                    gt_pose = Some(Pose2::new(x, y, th));
                }
                "init" => {
                    f.take_tag();
                    let x = f.next_f64("init x")?;
                    let y = f.next_f64("init y")?;
                    let th = f.next_f64("init theta")?;
                    init_pose = Some(Pose2::new(x, y, th));
                }
                other => {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("unknown field tag '{other}'"),
                    ));
                }
            }
        }
        ds.records.push(ScanRecord {
            timestamp,
            ranges,
            angle_min,
            angle_increment,
            range_max,
            odom,
            gt_pose,
            init_pose,
        });
    }
    ds.validate()
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(ds)
}

pub fn write_world(path: &Path, world: &World) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(&format!("{WORLD_MAGIC} {FORMAT_VERSION}\n"));
    out.push_str(&format!("name {}\n", world.name));
    for (a, b) in &world.segments {
        out.push_str(&format!("segment {} {} {} {}\n", a.x, a.y, b.x, b.y));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn parse_world(path: &Path) -> Result<World, IoError> {
    let content = fs::read_to_string(path)?;
    let lines = check_header(path, &content, WORLD_MAGIC)?;
    let mut name = String::from("world");
    let mut segments = Vec::new();
    for (lineno, line) in lines {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("name ") {
            name = rest.trim().to_string();
        } else if let Some(rest) = trimmed.strip_prefix("segment") {
            let mut f = Fields::new(path, lineno, rest);
            let x1 = f.next_f64("x1")?;
            let y1 = f.next_f64("y1")?;
            let x2 = f.next_f64("x2")?;
            let y2 = f.next_f64("y2")?;
            segments.push((Vector2::new(x1, y1), Vector2::new(x2, y2)));
        } else {
            return Err(parse_err(
                path,
                lineno,
                format!("unknown line: '{trimmed}'"),
            ));
        }
    }
    World::new(&name, segments).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn write_trajectory(path: &Path, poses: &[Pose2]) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(&format!("{TRAJECTORY_MAGIC} {FORMAT_VERSION}\n"));
    for (i, p) in poses.iter().enumerate() {
        out.push_str(&format!("pose {i} {} {} {}\n", p.t.x, p.t.y, p.theta()));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn parse_trajectory(path: &Path) -> Result<Vec<Pose2>, IoError> {
    let content = fs::read_to_string(path)?;
    let lines = check_header(path, &content, TRAJECTORY_MAGIC)?;
    let mut poses = Vec::new();
    for (lineno, line) in lines {
        let trimmed = line.trim_start();
        let Some(rest) = trimmed.strip_prefix("pose") else {
            return Err(parse_err(
                path,
                lineno,
                format!("unknown line: '{trimmed}'"),
            ));
        };
        let mut f = Fields::new(path, lineno, rest);
        let idx = f.next_usize("index")?;
        if idx != poses.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("pose index {idx} out of order"),
            ));
        }
        let x = f.next_f64("x")?;
        let y = f.next_f64("y")?;
        let th = f.next_f64("theta")?;
        poses.push(Pose2::new(x, y, th));
    }
    Ok(poses)
}

/// Detects whether `path` holds a trajectory or a dataset (by magic) and
/// returns its poses; datasets contribute their ground-truth poses.
pub fn load_poses(path: &Path) -> Result<Vec<Pose2>, IoError> {
    let content = fs::read_to_string(path)?;
    let magic = content.split_whitespace().next().unwrap_or("");
    match magic {
        TRAJECTORY_MAGIC => parse_trajectory(path),
        DATASET_MAGIC => {
            let ds = parse_dataset(path)?;
            ds.gt_poses()
                .ok_or_else(|| parse_err(path, 0, "dataset has records without ground-truth poses"))
        }
        other => Err(IoError::BadHeader {
            path: path.display().to_string(),
            expected: format!("{TRAJECTORY_MAGIC} or {DATASET_MAGIC}"),
            found: other.to_string(),
        }),
    }
}

/// Drops records to roughly `rate` times the original count (record 0 always
/// kept), compounding odometry across the dropped steps so the chain stays
/// consistent.
pub fn subsample_dataset(ds: &Dataset, rate: f64) -> Result<Dataset, crate::model::ModelError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(crate::model::ModelError::InvalidArgument(format!(
            "subsample rate must be in (0, 1], got {rate}"
        )));
    }
    let mut records: Vec<ScanRecord> = Vec::new();
    let mut pending: Option<OdomIncrement> = None;
    for (i, r) in ds.records.iter().enumerate() {
        let keep = i == 0 || ((i as f64 * rate).floor() > ((i - 1) as f64 * rate).floor());
        if let Some(od) = &r.odom {
            pending = Some(match pending {
                None => *od,
                Some(acc) => compose_increments(&acc, od),
            });
        }
        if keep {
            let mut kept = r.clone();
            kept.odom = if i == 0 { None } else { pending.take() };
            records.push(kept);
        }
    }
    let mut meta = ds.meta.clone();
    meta.push(("subsample_rate".into(), format!("{rate}")));
    let out = Dataset { records, meta };
    out.validate()?;
    Ok(out)
}

fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), IoError> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

fn raster_meta(
    kind: &str,
    map_geom: &crate::grid::GridGeometry,
    width: usize,
    height: usize,
    mapping: &[(String, String)],
) -> String {
    let mut out = String::new();
    out.push_str(&format!("{RASTER_META_MAGIC} {FORMAT_VERSION}\n"));
    out.push_str(&format!("kind {kind}\n"));
    out.push_str(&format!("origin_x {}\n", map_geom.origin_t0.x));
    out.push_str(&format!("origin_y {}\n", map_geom.origin_t0.y));
    out.push_str(&format!("resolution {}\n", map_geom.resolution_s));
    out.push_str(&format!("l_w {}\n", map_geom.l_w));
    out.push_str(&format!("l_h {}\n", map_geom.l_h));
    out.push_str(&format!("width {width}\n"));
    out.push_str(&format!("height {height}\n"));
    out.push_str("row0 top_h_index\n");
    for (k, v) in mapping {
        out.push_str(&format!("{k} {v}\n"));
    }
    out
}

/// Everything [`write_outputs`] can serialize after a solve.
pub struct SolveArtifacts<'a> {
    pub poses: &'a [Pose2],
    pub map: &'a GridMap,
    pub hitmap: &'a HitMap,
    pub covariance: Option<&'a CovarianceSummary>,
    pub pose_report: Option<&'a PoseErrorReport>,
    pub map_report: Option<&'a MapErrorReport>,
    pub p_occ_thresh: f64,
    pub p_free_thresh: f64,
}

/// Writes the trajectory, evidence/probability rasters (plus the uncertainty
/// raster when a covariance is present) and a metrics file when reports are
/// present. Returns the written paths.
pub fn write_outputs(dir: &Path, art: &SolveArtifacts) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let geom = &art.map.geom;

    let traj = dir.join("trajectory.txt");
    write_trajectory(&traj, art.poses)?;
    written.push(traj);

    // Evidence raster: one byte per node, clamped symmetric range, occupied
    // (positive evidence) dark.
    let (nw, nh) = (geom.l_w + 1, geom.l_h + 1);
    let mut pixels = Vec::with_capacity(nw * nh);
    for h in (0..nh).rev() {
        for w in 0..nw {
            let e = art.map.values[geom.node_id(w, h)]
                .clamp(-EXPORT_EVIDENCE_CLAMP, EXPORT_EVIDENCE_CLAMP);
            let px = 255.0 * (EXPORT_EVIDENCE_CLAMP - e) / (2.0 * EXPORT_EVIDENCE_CLAMP);
            pixels.push(px.round() as u8);
        }
    }
    let ev = dir.join("map_evidence.pgm");
    write_pgm(&ev, nw, nh, &pixels)?;
    let meta = raster_meta(
        "evidence",
        geom,
        nw,
        nh,
        &[
            ("samples".into(), "nodes".into()),
            ("evidence_clamp".into(), format!("{EXPORT_EVIDENCE_CLAMP}")),
            ("pixel_rule".into(), "round(255*(clamp-e)/(2*clamp))".into()),
        ],
    );
    let ev_meta = dir.join("map_evidence.meta");
    fs::write(&ev_meta, meta)?;
    written.push(ev);
    written.push(ev_meta);

    // Probability raster: one byte per cell, occupied dark, unknown mid-gray.
    let classes = classify_map(art.map, art.hitmap, art.p_occ_thresh, art.p_free_thresh);
    let mut pixels = Vec::with_capacity(geom.n_cells());
    for h in (0..geom.l_h).rev() {
        for w in 0..geom.l_w {
            let i = h * geom.l_w + w;
            let px = match classes.labels[i] {
                CellLabel::Unknown => 128u8,
                _ => (255.0 * (1.0 - classes.probs[i])).round() as u8,
            };
            pixels.push(px);
        }
    }
    let prob = dir.join("map_probability.pgm");
    write_pgm(&prob, geom.l_w, geom.l_h, &pixels)?;
    let meta = raster_meta(
        "probability",
        geom,
        geom.l_w,
        geom.l_h,
        &[
            ("samples".into(), "cells".into()),
            (
                "pixel_rule".into(),
                "round(255*(1-p)); unknown cells 128".into(),
            ),
            ("p_occ_thresh".into(), format!("{}", art.p_occ_thresh)),
            ("p_free_thresh".into(), format!("{}", art.p_free_thresh)),
        ],
    );
    let prob_meta = dir.join("map_probability.meta");
    fs::write(&prob_meta, meta)?;
    written.push(prob);
    written.push(prob_meta);

    if let Some(cov) = art.covariance {
        let lo = cov
            .node_variances
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let hi = cov
            .node_variances
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut pixels = Vec::with_capacity(nw * nh);
        for h in (0..nh).rev() {
            for w in 0..nw {
                let v = cov.node_variances[geom.node_id(w, h)];
                // Low variance white, high variance black.
                let px = 255.0 * (1.0 - (v - lo) / span);
                pixels.push(px.round() as u8);
            }
        }
        let unc = dir.join("map_uncertainty.pgm");
        write_pgm(&unc, nw, nh, &pixels)?;
        let meta = raster_meta(
            "uncertainty",
            geom,
            nw,
            nh,
            &[
                ("samples".into(), "nodes".into()),
                ("variance_min".into(), format!("{lo}")),
                ("variance_max".into(), format!("{hi}")),
                (
                    "pixel_rule".into(),
                    "round(255*(1-(v-min)/(max-min)))".into(),
                ),
            ],
        );
        let unc_meta = dir.join("map_uncertainty.meta");
        fs::write(&unc_meta, meta)?;
        written.push(unc);
        written.push(unc_meta);
    }

    if art.pose_report.is_some() || art.map_report.is_some() {
        let metrics = dir.join("metrics.txt");
        write_metrics(&metrics, art.pose_report, art.map_report)?;
        written.push(metrics);
    }
    Ok(written)
}

pub fn write_metrics(
    path: &Path,
    pose: Option<&PoseErrorReport>,
    map: Option<&MapErrorReport>,
) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(&format!("{METRICS_MAGIC} {FORMAT_VERSION}\n"));
    if let Some(p) = pose {
        out.push_str(&format!("mae_translation {}\n", p.mae_translation));
        out.push_str(&format!("mae_rotation {}\n", p.mae_rotation));
        out.push_str(&format!("rmse_translation {}\n", p.rmse_translation));
        out.push_str(&format!("rmse_rotation {}\n", p.rmse_rotation));
    }
    if let Some(m) = map {
        out.push_str(&format!("auc {}\n", m.auc));
        out.push_str(&format!("precision_free {}\n", m.precision_free));
        out.push_str(&format!("precision_occupied {}\n", m.precision_occupied));
        out.push_str(&format!("precision_unknown {}\n", m.precision_unknown));
        out.push_str(&format!("precision_known {}\n", m.known_cell_precision()));
        let names = ["free", "occupied", "unknown"];
        for (gi, gname) in names.iter().enumerate() {
            for (ei, ename) in names.iter().enumerate() {
                out.push_str(&format!(
                    "confusion_{gname}_{ename} {}\n",
                    m.confusion[gi][ei]
                ));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}
