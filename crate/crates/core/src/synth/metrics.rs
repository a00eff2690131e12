//! Geometric oracle metrics against a synthetic ground truth.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::spatial::{fit_plane, NeighborIndex};
use crate::stats::{mean, median};

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChamferReport {
    /// Mean of the two directional medians.
    pub symmetric: f64,
    pub cloud_to_gt_median: f64,
    pub gt_to_cloud_median: f64,
    pub cloud_to_gt_mean: f64,
    pub gt_to_cloud_mean: f64,
}

fn strided<T: Copy>(v: &[T], max: usize) -> Vec<T> {
    if v.len() <= max || max == 0 {
        return v.to_vec();
    }
    (0..max).map(|i| v[i * v.len() / max]).collect()
}

/// Chamfer distance between `cloud` and the canonical surface. The
/// cloud-to-surface direction uses the exact surface distance; the
/// surface-to-cloud direction uses up to `samples` ground-truth samples.
pub fn metric_chamfer(cloud: &[V3], gt: &GroundTruth, samples: usize) -> Result<ChamferReport> {
    if cloud.is_empty() {
        return Err(Error::Empty("chamfer cloud"));
    }
    let to_gt: Vec<f64> = cloud.par_iter().map(|p| gt.surface_distance(p)).collect();
    let index = NeighborIndex::build(cloud)?;
    let gt_pts = strided(&gt.samples.positions, samples);
    let to_cloud: Vec<f64> = gt_pts.par_iter().map(|q| index.nearest(q).dist2.sqrt()).collect();
    let (a, b) = (median(&to_gt).unwrap(), median(&to_cloud).unwrap_or(0.0));
    Ok(ChamferReport {
        symmetric: 0.5 * (a + b),
        cloud_to_gt_median: a,
        gt_to_cloud_median: b,
        cloud_to_gt_mean: mean(&to_gt).unwrap(),
        gt_to_cloud_mean: mean(&to_cloud).unwrap_or(0.0),
    })
}

/// Mean over points of the RMS distance of each point's `k` nearest
/// neighbors (itself included) to their best-fit plane.
pub fn metric_thickness(points: &[V3], k: usize) -> Result<f64> {
    if points.len() < k.max(3) {
        return Err(Error::TooFewPoints {
            needed: k.max(3),
            got: points.len(),
        });
    }
    let index = NeighborIndex::build(points)?;
    let per: Vec<f64> = points
        .par_iter()
        .map(|p| {
            let nb = index.k_nearest(p, k);
            fit_plane(nb.iter().map(|n| &points[n.index])).map_or(0.0, |pl| pl.rms_distance())
        })
        .collect();
    Ok(mean(&per).unwrap())
}

/// Median displacement error, in canonical space, between a recovered
/// forward deformation and the inverse of the ground-truth warp, over
/// ground-truth surface samples seen by each frame.
///
/// `forward(frame, p_cam)` maps a camera-space point of `frame` to the
/// canonical space, or `None` when the frame has no recovered state.
pub fn metric_deformation_error(
    forward: impl Fn(u32, &[V3]) -> Option<Vec<V3>>,
    gt: &GroundTruth,
    samples: usize,
) -> Result<f64> {
    let s = &gt.samples;
    let idx = strided(&(0..s.len()).collect::<Vec<_>>(), samples);
    let mut errors = Vec::with_capacity(idx.len());
    for (f, cam) in gt.cameras.iter().enumerate() {
        let mine: Vec<usize> = idx.iter().copied().filter(|&i| s.frame_ids[i] == f as u32).collect();
        if mine.is_empty() {
            continue;
        }
        let inv = cam.pose.inverse();
        let cam_pts: Vec<V3> = mine.iter().map(|&i| inv.apply(&gt.warps[f].apply(&s.positions[i]))).collect();
        let Some(rec) = forward(f as u32, &cam_pts) else {
            continue;
        };
        errors.extend(mine.iter().zip(&rec).map(|(&i, r)| (r - s.positions[i]).norm()));
    }
    median(&errors).ok_or(Error::Empty("deformation error samples"))
}

/// RMS distance from each point to its nearest neighbor in another frame.
pub fn cross_frame_nn_rms(cloud: &PointCloud) -> Result<f64> {
    let index = NeighborIndex::build(&cloud.positions)?;
    let d2: Vec<f64> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| {
            let f = cloud.frame_ids[i];
            index
                .k_nearest_where(&cloud.positions[i], 1, f64::INFINITY, |j| cloud.frame_ids[j] != f)
                .first()
                .map(|n| n.dist2)
        })
        .collect();
    Ok(mean(&d2).ok_or(Error::Empty("cross-frame neighbors"))?.sqrt())
}
