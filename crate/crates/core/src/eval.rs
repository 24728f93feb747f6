//! Trajectory and map accuracy metrics: translation/rotation MAE and RMSE,
//! cell classification, confusion counts and occupied-vs-free AUC.

use crate::grid::{interpolate, GridMap, HitMap};
use crate::model::{wrap, Pose2};
use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("trajectory lengths differ: {estimate} vs {truth}")]
    LengthMismatch { estimate: usize, truth: usize },
    #[error("map geometries differ")]
    GeometryMismatch,
    #[error("no overlapping known cells (or a single class) to score")]
    InsufficientOverlap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseErrorReport {
    pub mae_translation: f64,
    pub mae_rotation: f64,
    pub rmse_translation: f64,
    pub rmse_rotation: f64,
    pub per_step_translation: Vec<f64>,
    pub per_step_rotation: Vec<f64>,
}

/// Per-pose translation and rotation errors between trajectories sharing the
/// same gauge (both anchored at pose 0). No alignment is performed.
pub fn pose_errors(estimate: &[Pose2], gt: &[Pose2]) -> Result<PoseErrorReport, EvalError> {
    if estimate.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            estimate: estimate.len(),
            truth: gt.len(),
        });
    }
    let per_step_translation: Vec<f64> = estimate
        .iter()
        .zip(gt)
        .map(|(e, g)| (e.t - g.t).norm())
        .collect();
    let per_step_rotation: Vec<f64> = estimate
        .iter()
        .zip(gt)
        .map(|(e, g)| wrap(e.theta() - g.theta()).abs())
        .collect();
    let mae = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rmse = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    Ok(PoseErrorReport {
        mae_translation: mae(&per_step_translation),
        mae_rotation: mae(&per_step_rotation),
        rmse_translation: rmse(&per_step_translation),
        rmse_rotation: rmse(&per_step_rotation),
        per_step_translation,
        per_step_rotation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellLabel {
    Free,
    Occupied,
    Unknown,
}

impl CellLabel {
    pub fn index(self) -> usize {
        match self {
            CellLabel::Free => 0,
            CellLabel::Occupied => 1,
            CellLabel::Unknown => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellLabel::Free => "free",
            CellLabel::Occupied => "occupied",
            CellLabel::Unknown => "unknown",
        }
    }
}

/// Per-cell labels and occupancy probabilities, `l_w x l_h` cells in
/// row-major order (`h * l_w + w`).
#[derive(Debug, Clone, PartialEq)]
pub struct CellClassification {
    pub l_w: usize,
    pub l_h: usize,
    pub labels: Vec<CellLabel>,
    pub probs: Vec<f64>,
}

/// Log-odds evidence to probability.
pub fn evidence_to_probability(e: f64) -> f64 {
    1.0 / (1.0 + (-e).exp())
}

/// Classifies each grid cell from the evidence interpolated at its center.
/// Cells whose four corner nodes hold fewer than half a hit in total are
/// unknown regardless of evidence.
pub fn classify_map(
    map: &GridMap,
    hitmap: &HitMap,
    p_occ_thresh: f64,
    p_free_thresh: f64,
) -> CellClassification {
    assert!(
        0.0 < p_free_thresh && p_free_thresh < p_occ_thresh && p_occ_thresh < 1.0,
        "thresholds must satisfy 0 < free < occ < 1"
    );
    let g = &map.geom;
    let mut labels = Vec::with_capacity(g.n_cells());
    let mut probs = Vec::with_capacity(g.n_cells());
    for h in 0..g.l_h {
        for w in 0..g.l_w {
            let hits = hitmap.counts[g.node_id(w, h)]
                + hitmap.counts[g.node_id(w + 1, h)]
                + hitmap.counts[g.node_id(w, h + 1)]
                + hitmap.counts[g.node_id(w + 1, h + 1)];
            let center = Vector2::new(w as f64 + 0.5, h as f64 + 0.5);
            let p = evidence_to_probability(interpolate(map, center).expect("center in bounds"));
            probs.push(p);
            let label = if hits < 0.5 {
                CellLabel::Unknown
            } else if p >= p_occ_thresh {
                CellLabel::Occupied
            } else if p <= p_free_thresh {
                CellLabel::Free
            } else {
                CellLabel::Unknown
            };
            labels.push(label);
        }
    }
    CellClassification {
        l_w: g.l_w,
        l_h: g.l_h,
        labels,
        probs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapErrorReport {
    /// Occupied-vs-free AUC over cells known in both maps, scored by the
    /// estimate's probabilities.
    pub auc: f64,
    /// Per predicted class: fraction of cells predicted as that class whose
    /// reference label agrees. NaN when the class is never predicted.
    pub precision_free: f64,
    pub precision_occupied: f64,
    pub precision_unknown: f64,
    /// `confusion[gt][est]` counts over all cells.
    pub confusion: [[usize; 3]; 3],
}

impl MapErrorReport {
    /// Fraction of correctly labeled cells among those known (free or
    /// occupied) in both maps.
    pub fn known_cell_precision(&self) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for gt in 0..2 {
            for est in 0..2 {
                total += self.confusion[gt][est];
                if gt == est {
                    correct += self.confusion[gt][est];
                }
            }
        }
        correct as f64 / total as f64
    }
}

/// Compares an estimated classification against a reference one built at the
/// same geometry.
pub fn map_errors(
    estimate: &CellClassification,
    gt: &CellClassification,
) -> Result<MapErrorReport, EvalError> {
    if estimate.l_w != gt.l_w || estimate.l_h != gt.l_h {
        return Err(EvalError::GeometryMismatch);
    }
    let mut confusion = [[0usize; 3]; 3];
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for i in 0..estimate.labels.len() {
        confusion[gt.labels[i].index()][estimate.labels[i].index()] += 1;
        if gt.labels[i] != CellLabel::Unknown && estimate.labels[i] != CellLabel::Unknown {
            scored.push((estimate.probs[i], gt.labels[i] == CellLabel::Occupied));
        }
    }
    let auc = ranked_auc(&scored)?;
    let precision = |class: usize| {
        let predicted: usize = (0..3).map(|gt_i| confusion[gt_i][class]).sum();
        if predicted == 0 {
            f64::NAN
        } else {
            confusion[class][class] as f64 / predicted as f64
        }
    };
    Ok(MapErrorReport {
        auc,
        precision_free: precision(0),
        precision_occupied: precision(1),
        precision_unknown: precision(2),
        confusion,
    })
}

/// Mann-Whitney AUC with average ranks for ties.
fn ranked_auc(scored: &[(f64, bool)]) -> Result<f64, EvalError> {
    let n_pos = scored.iter().filter(|(_, p)| *p).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::InsufficientOverlap);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.partial_cmp(&scored[b].0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        // 1-based average rank of the tie group [i, j].
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if scored[idx].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}
