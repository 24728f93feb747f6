//! Converts raw scans into sets of evidence-labeled sample points by
//! equidistant sampling along each beam.

use crate::model::{ModelError, ScanRecord};
use nalgebra::Vector2;

/// Log-odds evidence of an occupied sample, `ln(0.7 / 0.3)`.
pub fn z_occupied() -> f64 {
    (0.7f64 / 0.3).ln()
}

/// Log-odds evidence of a free-space sample, `ln(0.4 / 0.6)`.
pub fn z_free() -> f64 {
    (0.4f64 / 0.6).ln()
}

/// Beams shorter than this are sensor self-hits and are dropped.
const MIN_BEAM_RANGE: f64 = 0.1;

/// One sampled beam point: position in the robot/laser frame plus its
/// evidence label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub x_local: Vector2<f64>,
    /// Log-odds evidence carried by this point.
    pub z: f64,
    pub occupied: bool,
}

/// All sample points generated from one scan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampledScan {
    pub points: Vec<SamplePoint>,
}

impl SampledScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Samples every beam of `scan` at spacing `resolution_s`.
///
/// A beam with a return of length `r` yields free samples at `s, 2s, ...`
/// strictly before `r` and one occupied sample exactly at `r` (when `r` is an
/// exact multiple of `s`, the occupied sample wins the tie). A no-return beam
/// yields free samples out to `range_max` and no occupied sample.
pub fn sample_scan(scan: &ScanRecord, resolution_s: f64) -> Result<SampledScan, ModelError> {
    let resolution_ok = resolution_s.is_finite() && resolution_s > 0.0;
    if !resolution_ok {
        return Err(ModelError::InvalidArgument(format!(
            "sampling resolution must be positive, got {resolution_s}"
        )));
    }
    let mut points = Vec::new();
    for (b, &range) in scan.ranges.iter().enumerate() {
        let alpha = scan.beam_angle(b);
        let (dir_x, dir_y) = (alpha.cos(), alpha.sin());
        let push = |points: &mut Vec<SamplePoint>, d: f64, occupied: bool| {
            points.push(SamplePoint {
                x_local: Vector2::new(d * dir_x, d * dir_y),
                z: if occupied { z_occupied() } else { z_free() },
                occupied,
            });
        };
        if scan.is_no_return(range) {
            let mut j = 1usize;
            loop {
                let d = j as f64 * resolution_s;
                if d > scan.range_max {
                    break;
                }
                push(&mut points, d, false);
                j += 1;
            }
            continue;
        }
        if range < MIN_BEAM_RANGE {
            continue;
        }
        let mut j = 1usize;
        loop {
            let d = j as f64 * resolution_s;
            if d >= range {
                break;
            }
            push(&mut points, d, false);
            j += 1;
        }
        push(&mut points, range, true);
    }
    Ok(SampledScan { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scan_with_ranges(ranges: Vec<f64>, angle_min: f64, angle_increment: f64) -> ScanRecord {
        ScanRecord {
            timestamp: 0.0,
            ranges,
            angle_min,
            angle_increment,
            range_max: 30.0,
            odom: None,
            gt_pose: None,
            init_pose: None,
        }
    }

    #[test]
    fn beam_of_two_and_a_half_meters() {
        let scan = scan_with_ranges(vec![2.5], 0.0, 0.0);
        let out = sample_scan(&scan, 1.0).unwrap();
        assert_eq!(out.len(), 3);
        assert_relative_eq!(out.points[0].x_local.x, 1.0, epsilon = 1e-15);
        assert_relative_eq!(out.points[1].x_local.x, 2.0, epsilon = 1e-15);
        assert_relative_eq!(out.points[2].x_local.x, 2.5, epsilon = 1e-15);
        assert!(!out.points[0].occupied);
        assert!(!out.points[1].occupied);
        assert!(out.points[2].occupied);
        for p in &out.points {
            assert_relative_eq!(p.x_local.y, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn short_beam_keeps_only_the_endpoint() {
        let alpha = 0.7;
        let scan = scan_with_ranges(vec![0.4], alpha, 0.0);
        let out = sample_scan(&scan, 1.0).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out.points[0].occupied);
        assert_relative_eq!(out.points[0].x_local.x, 0.4 * alpha.cos(), epsilon = 1e-15);
        assert_relative_eq!(out.points[0].x_local.y, 0.4 * alpha.sin(), epsilon = 1e-15);
    }

    #[test]
    fn exact_multiple_emits_no_free_sample_at_endpoint() {
        let scan = scan_with_ranges(vec![3.0], 0.0, 0.0);
        let out = sample_scan(&scan, 1.0).unwrap();
        // Free at 1 and 2; occupied wins the tie at 3.
        assert_eq!(out.len(), 3);
        assert!(out.points.iter().filter(|p| p.occupied).count() == 1);
        assert_relative_eq!(out.points[2].x_local.x, 3.0, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_beam_is_discarded() {
        let scan = scan_with_ranges(vec![0.05], 0.0, 0.0);
        let out = sample_scan(&scan, 0.5).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn no_return_beam_yields_free_space_only() {
        let mut scan = scan_with_ranges(vec![31.0], 0.0, 0.0);
        scan.range_max = 30.0;
        let out = sample_scan(&scan, 1.0).unwrap();
        assert_eq!(out.len(), 30);
        assert!(out.points.iter().all(|p| !p.occupied));
        assert_relative_eq!(out.points.last().unwrap().x_local.x, 30.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_positive_resolution() {
        let scan = scan_with_ranges(vec![2.0], 0.0, 0.0);
        assert!(sample_scan(&scan, 0.0).is_err());
        assert!(sample_scan(&scan, -1.0).is_err());
    }

    /// Independent per-beam walk used to cross-check sample counts.
    fn count_oracle(scan: &ScanRecord, s: f64) -> usize {
        let mut count = 0;
        for &r in &scan.ranges {
            if scan.is_no_return(r) {
                let mut j = 1usize;
                while j as f64 * s <= scan.range_max {
                    count += 1;
                    j += 1;
                }
                continue;
            }
            if r < MIN_BEAM_RANGE {
                continue;
            }
            let mut j = 1usize;
            while j as f64 * s < r {
                count += 1;
                j += 1;
            }
            count += 1; // endpoint
        }
        count
    }

    #[test]
    fn full_scan_count_matches_walking_oracle() {
        let n_beams = 1081;
        let angle_min = -135.0f64.to_radians();
        let angle_inc = 270.0f64.to_radians() / (n_beams - 1) as f64;
        // Deterministic pseudo-random ranges covering short, long and
        // no-return beams.
        let ranges: Vec<f64> = (0..n_beams)
            .map(|b| {
                let x = ((b * 2654435761usize) % 10000) as f64 / 10000.0;
                if x > 0.97 {
                    31.0
                } else {
                    0.05 + 29.0 * x
                }
            })
            .collect();
        let scan = scan_with_ranges(ranges, angle_min, angle_inc);
        let out = sample_scan(&scan, 0.25).unwrap();
        assert_eq!(out.len(), count_oracle(&scan, 0.25));
    }

    #[test]
    fn adjacent_samples_are_exactly_one_step_apart() {
        let scan = scan_with_ranges(vec![7.3], 0.4, 0.0);
        let s = 0.2;
        let out = sample_scan(&scan, s).unwrap();
        for w in out.points.windows(2) {
            if w[1].occupied {
                continue; // the endpoint is not on the s-lattice
            }
            let gap = (w[1].x_local - w[0].x_local).norm();
            assert!((gap - s).abs() < 1e-12, "gap {gap} != {s}");
        }
        // Every occupied sample sits exactly at the beam endpoint.
        let end = out.points.last().unwrap();
        assert!(end.occupied);
        assert_relative_eq!(end.x_local.norm(), 7.3, epsilon = 1e-12);
        // Free samples all lie strictly before the endpoint.
        for p in &out.points[..out.len() - 1] {
            assert!(p.x_local.norm() < 7.3);
        }
    }

    #[test]
    fn evidence_takes_only_the_two_fixed_values() {
        assert_relative_eq!(z_occupied(), 0.8473, epsilon = 5e-5);
        assert_relative_eq!(z_free(), -0.4055, epsilon = 5e-5);
        let scan = scan_with_ranges(vec![4.2, 1.1, 31.0], -0.3, 0.3);
        let out = sample_scan(&scan, 0.5).unwrap();
        for p in &out.points {
            if p.occupied {
                assert_eq!(p.z, z_occupied());
            } else {
                assert_eq!(p.z, z_free());
            }
        }
    }
}
