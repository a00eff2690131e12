//! Sequential driver: the first frame seeds the model, every later frame is
//! aligned against it and merged through the outlier gate.

use std::collections::HashMap;

use log::{info, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{
    align_frame, deform, frame_residuals, merge_frame, point_rotations, CorrTerm, EnergyParts, FrameData,
    FrameState, MergeDecision, MergeStats, Surface,
};
use crate::cloud::PointCloud;
use crate::config::{Config, IcpConfig};
use crate::error::{Error, Result};
use crate::ingest::Correspondence;
use crate::spatial::{estimate_color_gradients, estimate_normals, NeighborIndex};

type V3 = Vector3<f64>;

/// The growing canonical model.
#[derive(Clone, Debug, Default)]
pub struct Model {
    /// World-space points with normals.
    pub cloud: PointCloud,
    /// Index of each point within its frame's [`FrameData`].
    pub local: Vec<u32>,
    pub intensities: Vec<f64>,
    /// Tangent-plane intensity gradients, refreshed before each alignment.
    pub gradients: Vec<V3>,
}

impl Model {
    pub fn surface(&self) -> Surface<'_> {
        Surface {
            positions: &self.cloud.positions,
            normals: self.cloud.normals.as_deref().unwrap_or(&[]),
            intensities: &self.intensities,
            gradients: &self.gradients,
        }
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn refresh_colors(&mut self, index: &NeighborIndex, radius: f64) -> Result<()> {
        let cg = estimate_color_gradients(&self.cloud, index, radius)?;
        self.gradients = cg.gradients;
        self.intensities = cg.intensities;
        Ok(())
    }

    /// Appends the accepted points of a deformed frame.
    pub fn append(&mut self, frame: &FrameData, world: &[V3], normals: &[V3], accepted: &[bool]) {
        let idx: Vec<usize> = (0..frame.len()).filter(|&i| accepted[i]).collect();
        let mut part = frame.points.select(&idx);
        part.positions = idx.iter().map(|&i| world[i]).collect();
        part.normals = Some(idx.iter().map(|&i| normals[i]).collect());
        if self.cloud.is_empty() {
            self.cloud = part;
        } else {
            self.cloud.extend(&part);
        }
        self.local.extend(idx.iter().map(|&i| i as u32));
        self.intensities.extend(idx.iter().map(|&i| frame.intensities[i]));
        self.gradients.resize(self.cloud.len(), V3::zeros());
    }
}

/// Per-frame summary of stage 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_id: u32,
    pub points: usize,
    pub iterations: usize,
    pub unalignable: bool,
    pub correspondences: usize,
    pub first: Option<EnergyParts>,
    pub last: Option<EnergyParts>,
    pub merge: Option<MergeDecision>,
}

/// Stage-1 result: one state per input frame (same order), the model and
/// the merge history.
#[derive(Clone, Debug)]
pub struct Stage1 {
    pub states: Vec<FrameState>,
    pub model: Model,
    pub stats: MergeStats,
    pub reports: Vec<FrameReport>,
}

/// World positions of a processed frame and which of them were merged.
pub struct FrameWorld {
    pub world: Vec<V3>,
    pub accepted: Vec<bool>,
}

/// Sparse correspondence terms for `frames[k]` against already merged
/// frames. Up to `max_pairs` earlier frames are used, ranked by how much
/// of frame `k` falls inside their view; at most `max_correspondences`
/// terms are returned. Pairs listed in either direction are used.
pub fn correspondence_terms(
    k: usize,
    frames: &[FrameData],
    worlds: &[Option<FrameWorld>],
    corrs: &[Correspondence],
    icp: &IcpConfig,
) -> Vec<CorrTerm> {
    let fk = &frames[k];
    let probe: Vec<V3> = fk.positions().iter().step_by(4).map(|p| fk.camera.pose.apply(p)).collect();
    if probe.is_empty() {
        return Vec::new();
    }
    let mut ranked: Vec<(f64, usize)> = (0..k)
        .filter(|&j| worlds[j].is_some())
        .map(|j| {
            let cam = &frames[j].camera;
            let inside = probe
                .iter()
                .filter(|p| cam.project_world(p).is_some_and(|(u, v, _)| cam.in_bounds(u, v)))
                .count();
            (inside as f64 / probe.len() as f64, j)
        })
        .filter(|(o, _)| *o > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.truncate(icp.max_pairs);
    let mut out = Vec::new();
    for (_, j) in ranked {
        let fj = &frames[j];
        let wj = worlds[j].as_ref().unwrap();
        for c in corrs {
            if out.len() >= icp.max_correspondences {
                return out;
            }
            let (s, t) = if c.src_frame == fj.frame_id && c.dst_frame == fk.frame_id {
                ((c.su, c.sv), (c.tu, c.tv))
            } else if c.src_frame == fk.frame_id && c.dst_frame == fj.frame_id {
                ((c.tu, c.tv), (c.su, c.sv))
            } else {
                continue;
            };
            if c.w <= 0.0 {
                continue;
            }
            let Some(src) = fj.bilinear(s.0, s.1) else { continue };
            if src.iter().any(|&(i, b)| b > 0.0 && !wj.accepted[i]) {
                continue;
            }
            let Some(dst) = fk.bilinear(t.0, t.1) else { continue };
            let target = src.iter().fold(V3::zeros(), |a, &(i, b)| a + wj.world[i] * b);
            out.push(CorrTerm {
                corners: dst,
                target,
                w: c.w,
            });
        }
    }
    out
}

fn frame_world(frame: &FrameData, state: &FrameState) -> Result<(Vec<V3>, Vec<V3>)> {
    let pose0 = &frame.camera.pose;
    let world = deform(state, pose0, frame.positions(), false)?.world;
    let rots = point_rotations(state, pose0, frame.positions())?;
    let normals = frame.normals().iter().zip(&rots).map(|(n, r)| r * n).collect();
    Ok((world, normals))
}

/// Runs stage 1 over `frames` in order. The first frame is the canonical
/// anchor and is never moved.
pub fn run_stage1(frames: &[FrameData], corrs: &[Correspondence], cfg: &Config) -> Result<Stage1> {
    let icp = &cfg.icp;
    let first = frames.first().ok_or(Error::Empty("frames"))?;
    let s_fine = cfg.fine_s_vox();
    let d_fine = cfg.fine_d_max();
    let mut states = vec![FrameState::identity(first.frame_id)];
    let (world0, normals0) = frame_world(first, &states[0])?;
    let mut model = Model::default();
    model.append(first, &world0, &normals0, &vec![true; first.len()]);
    let mut worlds = vec![Some(FrameWorld {
        world: world0,
        accepted: vec![true; first.len()],
    })];
    let mut reports = vec![FrameReport {
        frame_id: first.frame_id,
        points: first.len(),
        ..Default::default()
    }];
    let mut stats = MergeStats::default();
    let mut merges = 0usize;
    for k in 1..frames.len() {
        let frame = &frames[k];
        let index = NeighborIndex::build(&model.cloud.positions)?;
        model.refresh_colors(&index, 2.0 * s_fine)?;
        let terms = if icp.lambda_corr > 0.0 {
            correspondence_terms(k, frames, &worlds, corrs, icp)
        } else {
            Vec::new()
        };
        let (state, rep) = align_frame(
            &model.surface(),
            frame,
            &terms,
            FrameState::identity(frame.frame_id),
            icp,
            &cfg.field,
            cfg.seed,
        )?;
        let mut report = FrameReport {
            frame_id: frame.frame_id,
            points: frame.len(),
            iterations: rep.iterations,
            unalignable: rep.unalignable,
            correspondences: terms.len(),
            first: rep.trace.first().copied(),
            last: rep.trace.last().copied(),
            merge: None,
        };
        if state.unalignable {
            warn!("frame {}: no inliers, skipped", frame.frame_id);
            states.push(state);
            worlds.push(None);
            reports.push(report);
            continue;
        }
        let (world, normals) = frame_world(frame, &state)?;
        let res = frame_residuals(&world, &frame.intensities, &model.surface(), &index, d_fine);
        let dec = merge_frame(&mut stats, &res, icp.theta_d, icp.theta_c, icp.sigma_d, icp.sigma_c);
        model.append(frame, &world, &normals, &dec.accepted);
        merges += 1;
        info!(
            "frame {}: {} iterations, energy {:.3e} -> {:.3e}, {} corr, merged {}/{}",
            frame.frame_id,
            rep.iterations,
            report.first.map_or(0.0, |e| e.total),
            report.last.map_or(0.0, |e| e.total),
            terms.len(),
            dec.accepted_count,
            frame.len()
        );
        worlds.push(Some(FrameWorld {
            world,
            accepted: dec.accepted.clone(),
        }));
        report.merge = Some(dec);
        reports.push(report);
        states.push(state);
        if icp.renormal_every > 0 && merges % icp.renormal_every == 0 {
            renormalize(&mut model, frames, &states, icp.normal_k)?;
        }
    }
    Ok(Stage1 {
        states,
        model,
        stats,
        reports,
    })
}

/// Re-estimates model normals, oriented toward each point's corrected
/// camera center.
pub fn renormalize(model: &mut Model, frames: &[FrameData], states: &[FrameState], k: usize) -> Result<()> {
    let centers: HashMap<u32, V3> = frames
        .iter()
        .zip(states)
        .map(|(f, s)| (f.frame_id, s.pose(&f.camera.pose).translation))
        .collect();
    let fresh = estimate_normals(&model.cloud, k, |f| centers.get(&f).copied().unwrap_or_else(V3::zeros))?;
    model.cloud.normals = fresh.normals;
    Ok(())
}
