//! Metric reports. Keys are sorted so reports diff cleanly, and wall
//! times live in a separate timing report so metrics stay reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icp::{deform, FrameData, FrameState};
use crate::stats::{median, percentile};
use crate::synth::metrics::{metric_chamfer, metric_deformation_error, metric_thickness};
use crate::synth::GroundTruth;

type V3 = Vector3<f64>;

/// Neighbourhood size of the thickness metric.
pub const THICKNESS_K: usize = 16;
/// Ground-truth samples used by chamfer and deformation error.
pub const METRIC_SAMPLES: usize = 20_000;
/// Distance to the true surface under which a point counts as an inlier.
pub const GT_INLIER_DIST: f64 = 0.005;

pub type StageMetrics = BTreeMap<String, f64>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageMetrics>,
}

impl MetricsReport {
    pub fn get(&self, stage: &str, metric: &str) -> Option<f64> {
        self.stages.get(stage)?.get(metric).copied()
    }

    pub fn insert(&mut self, stage: &str, metrics: StageMetrics) {
        self.stages.entry(stage.to_string()).or_default().extend(metrics);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Seconds per stage.
    pub stages: BTreeMap<String, f64>,
    pub total: f64,
    pub threads: usize,
}

impl TimingReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Size, thickness and, given ground truth, chamfer and inlier fraction
/// of a cloud.
pub fn cloud_metrics(points: &[V3], gt: Option<&GroundTruth>) -> Result<StageMetrics> {
    let mut m = StageMetrics::new();
    m.insert("points".into(), points.len() as f64);
    m.insert("thickness".into(), metric_thickness(points, THICKNESS_K)?);
    if let Some(gt) = gt {
        let c = metric_chamfer(points, gt, METRIC_SAMPLES)?;
        m.insert("chamfer".into(), c.symmetric);
        m.insert("chamfer_cloud_to_gt".into(), c.cloud_to_gt_median);
        m.insert("chamfer_gt_to_cloud".into(), c.gt_to_cloud_median);
        let inl = points.iter().filter(|p| gt.surface_distance(p) < GT_INLIER_DIST).count();
        m.insert("gt_inlier_fraction".into(), inl as f64 / points.len() as f64);
    }
    Ok(m)
}

/// Median error of the recovered forward deformations against the
/// inverse ground-truth warps.
pub fn deformation_error(frames: &[FrameData], states: &[FrameState], gt: &GroundTruth) -> Result<f64> {
    metric_deformation_error(
        |id, p| {
            let s = frames.iter().position(|f| f.frame_id == id)?;
            if states[s].unalignable {
                return None;
            }
            deform(&states[s], &frames[s].camera.pose, p, false).ok().map(|d| d.world)
        },
        gt,
        METRIC_SAMPLES,
    )
}

/// Median magnitude of the non-identity ground-truth warps over the
/// canonical surface samples.
pub fn gt_warp_magnitude(gt: &GroundTruth) -> Option<f64> {
    let s = &gt.samples;
    let step = (s.len() / 2000).max(1);
    let mags: Vec<f64> = gt
        .warps
        .iter()
        .flat_map(|w| s.positions.iter().step_by(step).map(move |p| w.displacement(p).norm()))
        .filter(|&d| d > 0.0)
        .collect();
    median(&mags)
}

/// Median and 90th percentile of a sample.
pub fn summary(prefix: &str, values: &[f64]) -> StageMetrics {
    let mut m = StageMetrics::new();
    if let (Some(med), Some(p90)) = (median(values), percentile(values, 90.0)) {
        m.insert(format!("{prefix}_median"), med);
        m.insert(format!("{prefix}_p90"), p90);
    }
    m
}
