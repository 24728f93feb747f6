//! Continuous occupancy map over grid node values, with bilinear
//! interpolation, node gradients and the hit map that counts how many sample
//! points land at each location.

use crate::model::{MapMode, Pose2};
use crate::sampling::SampledScan;
use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("coordinate ({x}, {y}) outside grid 0..={l_w} x 0..={l_h}")]
    OutOfBounds {
        x: f64,
        y: f64,
        l_w: usize,
        l_h: usize,
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

/// Placement and extent of the node lattice: `(l_w + 1) x (l_h + 1)` nodes
/// spaced `resolution_s` meters apart, node (0, 0) at world point `origin_t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    pub origin_t0: Vector2<f64>,
    pub resolution_s: f64,
    pub l_w: usize,
    pub l_h: usize,
}

impl GridGeometry {
    pub fn new(
        origin_t0: Vector2<f64>,
        resolution_s: f64,
        l_w: usize,
        l_h: usize,
    ) -> Result<Self, GridError> {
        let resolution_ok = resolution_s.is_finite() && resolution_s > 0.0;
        if !resolution_ok || l_w < 1 || l_h < 1 {
            return Err(GridError::InvalidGeometry(format!(
                "need resolution > 0 and at least 1x1 cells, got s={resolution_s} {l_w}x{l_h}"
            )));
        }
        Ok(Self {
            origin_t0,
            resolution_s,
            l_w,
            l_h,
        })
    }

    pub fn n_nodes(&self) -> usize {
        (self.l_w + 1) * (self.l_h + 1)
    }

    pub fn n_cells(&self) -> usize {
        self.l_w * self.l_h
    }

    pub fn node_id(&self, w: usize, h: usize) -> usize {
        debug_assert!(w <= self.l_w && h <= self.l_h);
        h * (self.l_w + 1) + w
    }

    pub fn node_coords(&self, id: usize) -> (usize, usize) {
        (id % (self.l_w + 1), id / (self.l_w + 1))
    }

    /// Continuous grid coordinate of a world point: `(p - t0) / s`.
    pub fn world_to_grid(&self, p_world: Vector2<f64>) -> Vector2<f64> {
        (p_world - self.origin_t0) / self.resolution_s
    }

    pub fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0 && p.x <= self.l_w as f64 && p.y >= 0.0 && p.y <= self.l_h as f64
    }

    /// Fits a grid around a point cloud: bounding box of all projected sample
    /// points and pose positions, expanded by `margin` meters, origin at the
    /// lower-left corner.
    pub fn fit(
        samples: &[SampledScan],
        poses: &[Pose2],
        resolution_s: f64,
        margin: f64,
    ) -> Result<Self, GridError> {
        let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut grow = |p: Vector2<f64>| {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        };
        for pose in poses {
            grow(pose.t);
        }
        for (scan, pose) in samples.iter().zip(poses) {
            for pt in &scan.points {
                grow(pose.local_to_world(pt.x_local));
            }
        }
        if !lo.x.is_finite() {
            return Err(GridError::InvalidGeometry(
                "no points to fit a grid around".into(),
            ));
        }
        let origin = lo - Vector2::new(margin, margin);
        let span = hi + Vector2::new(margin, margin) - origin;
        let l_w = ((span.x / resolution_s).ceil() as usize).max(1);
        let l_h = ((span.y / resolution_s).ceil() as usize).max(1);
        Self::new(origin, resolution_s, l_w, l_h)
    }
}

/// Cell anchor `(w, h)` and bilinear weights for the nodes
/// `[(w,h), (w+1,h), (w,h+1), (w+1,h+1)]`, in that order.
#[inline]
pub(crate) fn cell_weights(
    p: Vector2<f64>,
    l_w: usize,
    l_h: usize,
) -> Option<((usize, usize), [f64; 4])> {
    if !(p.x >= 0.0 && p.x <= l_w as f64 && p.y >= 0.0 && p.y <= l_h as f64) {
        return None;
    }
    let w = (p.x.floor() as usize).min(l_w - 1);
    let h = (p.y.floor() as usize).min(l_h - 1);
    let a0 = p.x - w as f64;
    let a1 = (w + 1) as f64 - p.x;
    let b0 = p.y - h as f64;
    let b1 = (h + 1) as f64 - p.y;
    Some(((w, h), [a1 * b1, a0 * b1, a1 * b0, a0 * b0]))
}

pub(crate) const NODE_OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Log-odds evidence values at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub geom: GridGeometry,
    pub values: Vec<f64>,
}

impl GridMap {
    pub fn zeros(geom: GridGeometry) -> Self {
        let n = geom.n_nodes();
        Self {
            geom,
            values: vec![0.0; n],
        }
    }

    pub fn value_at(&self, w: usize, h: usize) -> f64 {
        self.values[self.geom.node_id(w, h)]
    }
}

fn out_of_bounds(p: Vector2<f64>, geom: &GridGeometry) -> GridError {
    GridError::OutOfBounds {
        x: p.x,
        y: p.y,
        l_w: geom.l_w,
        l_h: geom.l_h,
    }
}

/// Map value at a continuous grid coordinate by bilinear interpolation of the
/// four adjacent node values.
pub fn interpolate(map: &GridMap, p: Vector2<f64>) -> Result<f64, GridError> {
    let ((w, h), wt) =
        cell_weights(p, map.geom.l_w, map.geom.l_h).ok_or_else(|| out_of_bounds(p, &map.geom))?;
    let mut v = 0.0;
    for (k, (dw, dh)) in NODE_OFFSETS.iter().enumerate() {
        v += wt[k] * map.values[map.geom.node_id(w + dw, h + dh)];
    }
    Ok(v)
}

/// Nearest-node map value; the discrete-map ablation counterpart of
/// [`interpolate`].
pub fn value_nearest(map: &GridMap, p: Vector2<f64>) -> Result<f64, GridError> {
    let id = nearest_node(&map.geom, p).ok_or_else(|| out_of_bounds(p, &map.geom))?;
    Ok(map.values[id])
}

pub(crate) fn nearest_node(geom: &GridGeometry, p: Vector2<f64>) -> Option<usize> {
    if !geom.contains(p) {
        return None;
    }
    let w = (p.x.round() as usize).min(geom.l_w);
    let h = (p.y.round() as usize).min(geom.l_h);
    Some(geom.node_id(w, h))
}

/// Per-node spatial gradient of the map in grid units: central differences at
/// interior nodes, one-sided at the borders.
pub fn compute_node_gradients(map: &GridMap) -> Vec<Vector2<f64>> {
    let g = &map.geom;
    let mut out = vec![Vector2::zeros(); g.n_nodes()];
    for h in 0..=g.l_h {
        for w in 0..=g.l_w {
            let dx = if w == 0 {
                map.value_at(1, h) - map.value_at(0, h)
            } else if w == g.l_w {
                map.value_at(g.l_w, h) - map.value_at(g.l_w - 1, h)
            } else {
                0.5 * (map.value_at(w + 1, h) - map.value_at(w - 1, h))
            };
            let dy = if h == 0 {
                map.value_at(w, 1) - map.value_at(w, 0)
            } else if h == g.l_h {
                map.value_at(w, g.l_h) - map.value_at(w, g.l_h - 1)
            } else {
                0.5 * (map.value_at(w, h + 1) - map.value_at(w, h - 1))
            };
            out[g.node_id(w, h)] = Vector2::new(dx, dy);
        }
    }
    out
}

/// Smoothed map gradient at a continuous coordinate: bilinear blend of the
/// four adjacent node gradients, with the same weights as [`interpolate`].
///
/// This averages information from outside the current cell, so on rough maps
/// it deviates from the slope of the interpolant itself; see
/// [`interpolate_gradient_exact`] for the derivative that is consistent with
/// [`interpolate`] to machine precision.
pub fn interpolate_gradient(
    map: &GridMap,
    node_gradients: &[Vector2<f64>],
    p: Vector2<f64>,
) -> Result<Vector2<f64>, GridError> {
    let ((w, h), wt) =
        cell_weights(p, map.geom.l_w, map.geom.l_h).ok_or_else(|| out_of_bounds(p, &map.geom))?;
    let mut v = Vector2::zeros();
    for (k, (dw, dh)) in NODE_OFFSETS.iter().enumerate() {
        v += wt[k] * node_gradients[map.geom.node_id(w + dw, h + dh)];
    }
    Ok(v)
}

/// Exact spatial gradient of the bilinear interpolant inside the cell
/// containing `p`, in grid units:
/// `d/dx = b1*(M10 - M00) + b0*(M11 - M01)`, `d/dy = a1*(M01 - M00) +
/// a0*(M11 - M10)`. Matches finite differences of [`interpolate`] away from
/// cell edges.
pub fn interpolate_gradient_exact(
    map: &GridMap,
    p: Vector2<f64>,
) -> Result<Vector2<f64>, GridError> {
    let g = &map.geom;
    if !g.contains(p) {
        return Err(out_of_bounds(p, g));
    }
    let w = (p.x.floor() as usize).min(g.l_w - 1);
    let h = (p.y.floor() as usize).min(g.l_h - 1);
    let a0 = p.x - w as f64;
    let b0 = p.y - h as f64;
    let m00 = map.values[g.node_id(w, h)];
    let m10 = map.values[g.node_id(w + 1, h)];
    let m01 = map.values[g.node_id(w, h + 1)];
    let m11 = map.values[g.node_id(w + 1, h + 1)];
    Ok(Vector2::new(
        (1.0 - b0) * (m10 - m00) + b0 * (m11 - m01),
        (1.0 - a0) * (m01 - m00) + a0 * (m11 - m10),
    ))
}

/// Per-node counts of how many sample points project there; shares the map's
/// geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct HitMap {
    pub geom: GridGeometry,
    pub counts: Vec<f64>,
}

impl HitMap {
    pub fn zeros(geom: GridGeometry) -> Self {
        let n = geom.n_nodes();
        Self {
            geom,
            counts: vec![0.0; n],
        }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Hit count at a continuous coordinate.
pub fn hit_at(hitmap: &HitMap, p: Vector2<f64>) -> Result<f64, GridError> {
    let ((w, h), wt) = cell_weights(p, hitmap.geom.l_w, hitmap.geom.l_h)
        .ok_or_else(|| out_of_bounds(p, &hitmap.geom))?;
    let mut v = 0.0;
    for (k, (dw, dh)) in NODE_OFFSETS.iter().enumerate() {
        v += wt[k] * hitmap.counts[hitmap.geom.node_id(w + dw, h + dh)];
    }
    Ok(v)
}

/// Nearest-node hit count; discrete-map counterpart of [`hit_at`].
pub fn hit_nearest(hitmap: &HitMap, p: Vector2<f64>) -> Result<f64, GridError> {
    let id = nearest_node(&hitmap.geom, p).ok_or_else(|| out_of_bounds(p, &hitmap.geom))?;
    Ok(hitmap.counts[id])
}

/// Projects a sample's robot-frame position through `pose` into continuous
/// grid coordinates.
#[inline]
pub fn project_sample(x_local: Vector2<f64>, pose: &Pose2, geom: &GridGeometry) -> Vector2<f64> {
    geom.world_to_grid(pose.local_to_world(x_local))
}

/// Scatters one hit per sample point onto the nodes, each split across the
/// four adjacent nodes with bilinear weights (nearest node only in discrete
/// mode). Out-of-bounds points are skipped and counted.
pub fn scatter_hits(
    samples: &[SampledScan],
    poses: &[Pose2],
    geom: &GridGeometry,
    mode: MapMode,
) -> (HitMap, usize) {
    let mut hits = HitMap::zeros(geom.clone());
    let mut skipped = 0usize;
    for (scan, pose) in samples.iter().zip(poses) {
        for pt in &scan.points {
            let p = project_sample(pt.x_local, pose, geom);
            match mode {
                MapMode::Continuous => match cell_weights(p, geom.l_w, geom.l_h) {
                    Some(((w, h), wt)) => {
                        for (k, (dw, dh)) in NODE_OFFSETS.iter().enumerate() {
                            hits.counts[geom.node_id(w + dw, h + dh)] += wt[k];
                        }
                    }
                    None => skipped += 1,
                },
                MapMode::DiscreteNearest => match nearest_node(geom, p) {
                    Some(id) => hits.counts[id] += 1.0,
                    None => skipped += 1,
                },
            }
        }
    }
    (hits, skipped)
}

/// Builds the initial map by scattering each sample's evidence onto its
/// adjacent nodes, so that interpolated evidence divided by the hit count
/// approximates the average evidence observed near any point.
pub fn initialize_map(
    samples: &[SampledScan],
    poses: &[Pose2],
    geom: &GridGeometry,
    mode: MapMode,
) -> GridMap {
    let mut map = GridMap::zeros(geom.clone());
    for (scan, pose) in samples.iter().zip(poses) {
        for pt in &scan.points {
            let p = project_sample(pt.x_local, pose, geom);
            match mode {
                MapMode::Continuous => {
                    if let Some(((w, h), wt)) = cell_weights(p, geom.l_w, geom.l_h) {
                        for (k, (dw, dh)) in NODE_OFFSETS.iter().enumerate() {
                            map.values[geom.node_id(w + dw, h + dh)] += wt[k] * pt.z;
                        }
                    }
                }
                MapMode::DiscreteNearest => {
                    if let Some(id) = nearest_node(geom, p) {
                        map.values[id] += pt.z;
                    }
                }
            }
        }
    }
    map
}
