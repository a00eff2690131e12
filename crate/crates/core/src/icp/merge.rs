//! Adaptive outlier gating for merging an aligned frame into the model.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::Surface;
use crate::spatial::NeighborIndex;
use crate::stats::{mad, median, percentile};

type V3 = Vector3<f64>;

/// Scale factor turning a MAD into a Gaussian standard deviation.
pub const MAD_SCALE: f64 = 1.4826;

/// `median(history) + sigma · 1.4826 · MAD(history)`.
pub fn mad_threshold(history: &[f64], sigma: f64) -> Option<f64> {
    Some(median(history)? + sigma * MAD_SCALE * mad(history)?)
}

/// Per-frame residual percentiles of the merged frames and the thresholds
/// derived from them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeStats {
    pub history_d: Vec<f64>,
    pub history_c: Vec<f64>,
    pub tau_d: Option<f64>,
    pub tau_c: Option<f64>,
}

impl MergeStats {
    /// Fewer than two merged frames: no meaningful spread yet.
    pub fn bootstrapping(&self) -> bool {
        self.history_d.len() < 2
    }

    pub fn push(&mut self, g_d: f64, g_c: f64, sigma_d: f64, sigma_c: f64) {
        self.history_d.push(g_d);
        self.history_c.push(g_c);
        self.tau_d = mad_threshold(&self.history_d, sigma_d);
        self.tau_c = mad_threshold(&self.history_c, sigma_c);
    }

    /// Acceptance under the current thresholds; ties are accepted.
    pub fn accepts(&self, data: f64, color: f64) -> bool {
        self.tau_d.is_none_or(|t| data <= t) && self.tau_c.is_none_or(|t| color <= t)
    }
}

/// Per-point residuals of an aligned frame against the model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Residuals {
    /// Squared point-to-plane distance to the nearest model point.
    pub data: Vec<f64>,
    /// Squared tangent-plane color residual at the same model point.
    pub color: Vec<f64>,
    /// Nearest model point closer than `d_max` with a valid normal.
    pub inlier: Vec<bool>,
}

impl Residuals {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Residuals of `points` (world space) against `surface`, whose positions
/// `index` covers. Points whose nearest neighbor has no normal fall back to
/// the squared Euclidean distance.
pub fn frame_residuals(
    points: &[V3],
    intensities: &[f64],
    surface: &Surface,
    index: &NeighborIndex,
    d_max: f64,
) -> Residuals {
    let d2max = d_max * d_max;
    let per: Vec<(f64, f64, bool)> = points
        .par_iter()
        .zip(intensities)
        .map(|(p, ip)| {
            let nb = index.nearest(p);
            let q = nb.index;
            let diff = p - surface.positions[q];
            if !surface.normal_valid(q) {
                return (nb.dist2, 0.0, false);
            }
            let n = surface.normals[q];
            let r = diff.dot(&n);
            let d = surface.gradients[q];
            let d_tan = d - n * n.dot(&d);
            let c = surface.intensities[q] + d_tan.dot(&diff) - ip;
            (r * r, c * c, nb.dist2 < d2max)
        })
        .collect();
    Residuals {
        data: per.iter().map(|x| x.0).collect(),
        color: per.iter().map(|x| x.1).collect(),
        inlier: per.iter().map(|x| x.2).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeDecision {
    #[serde(skip)]
    pub accepted: Vec<bool>,
    pub accepted_count: usize,
    pub bootstrap: bool,
    pub g_d: Option<f64>,
    pub g_c: Option<f64>,
    /// Thresholds the frame was gated with.
    pub tau_d: Option<f64>,
    pub tau_c: Option<f64>,
}

/// Gates a frame's points and appends its residual percentiles to the
/// history. While bootstrapping every inlier is accepted; afterwards a
/// point is accepted iff both its residuals are within the thresholds of
/// the previous frames.
pub fn merge_frame(
    stats: &mut MergeStats,
    res: &Residuals,
    theta_d: f64,
    theta_c: f64,
    sigma_d: f64,
    sigma_c: f64,
) -> MergeDecision {
    let bootstrap = stats.bootstrapping();
    let (tau_d, tau_c) = (stats.tau_d, stats.tau_c);
    let accepted: Vec<bool> = (0..res.len())
        .map(|i| {
            if bootstrap {
                res.inlier[i]
            } else {
                stats.accepts(res.data[i], res.color[i])
            }
        })
        .collect();
    let inl = |v: &[f64]| -> Vec<f64> { v.iter().zip(&res.inlier).filter(|x| *x.1).map(|x| *x.0).collect() };
    let g_d = percentile(&inl(&res.data), theta_d);
    let g_c = percentile(&inl(&res.color), theta_c);
    if let (Some(d), Some(c)) = (g_d, g_c) {
        stats.push(d, c, sigma_d, sigma_c);
    }
    MergeDecision {
        accepted_count: accepted.iter().filter(|a| **a).count(),
        accepted,
        bootstrap,
        g_d,
        g_c,
        tau_d,
        tau_c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_from(h: &[f64]) -> MergeStats {
        let mut s = MergeStats::default();
        for &g in h {
            s.push(g, g, 2.5, 1.5);
        }
        s
    }

    #[test]
    fn zero_mad_threshold_accepts_ties() {
        let s = stats_from(&[1.0, 1.0, 1.0]);
        assert_eq!(s.tau_d, Some(1.0));
        assert!(s.accepts(0.5, 0.5));
        assert!(s.accepts(1.0, 1.0));
        assert!(!s.accepts(1.0 + 1e-12, 0.0));
    }

    #[test]
    fn threshold_formula() {
        // median 2, deviations [1, 0, 2] -> MAD 1
        let t = mad_threshold(&[1.0, 2.0, 4.0], 2.5).unwrap();
        assert!((t - (2.0 + 2.5 * 1.4826)).abs() < 1e-12);
        assert_eq!(mad_threshold(&[], 1.0), None);
    }

    #[test]
    fn bootstrap_accepts_inliers_only() {
        let mut s = MergeStats::default();
        let r = Residuals {
            data: vec![0.0, 5.0, 1e-4],
            color: vec![0.0, 0.0, 9.0],
            inlier: vec![true, false, true],
        };
        let d = merge_frame(&mut s, &r, 75.0, 75.0, 2.5, 1.5);
        assert!(d.bootstrap);
        assert_eq!(d.accepted, vec![true, false, true]);
        assert_eq!(s.history_d.len(), 1);
        let d = merge_frame(&mut s, &r, 75.0, 75.0, 2.5, 1.5);
        assert!(d.bootstrap);
        let d = merge_frame(&mut s, &r, 75.0, 75.0, 2.5, 1.5);
        assert!(!d.bootstrap);
        // identical histories: the gate is the shared 75th percentile
        assert!((d.tau_d.unwrap() - 0.75e-4).abs() < 1e-18);
        assert_eq!(d.accepted, vec![true, false, false]);
    }
}
