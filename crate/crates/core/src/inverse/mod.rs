//! The view-conditioned backward field, mapping canonical points back into
//! each frame's camera space.

use log::info;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FieldConfig, InverseConfig};
use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::icp::{deform, FrameData, FrameState};
use crate::lie::{apply_exp_with_jacobian, exp_unchecked, RigidTransform};
use crate::optim::Adam;
use crate::stats::median;

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingPair {
    /// Frame slot, also the view index of the embedding.
    pub view: u32,
    /// Index of the point within its frame.
    pub index: usize,
    pub p_cam: V3,
    pub p0: V3,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingPairSet {
    pub pairs: Vec<TrainingPair>,
}

impl TrainingPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Largest distance between a stored canonical point and a fresh
    /// forward evaluation of its camera-space point.
    pub fn verify(&self, frames: &[FrameData], states: &[FrameState]) -> Result<f64> {
        let mut worst = 0.0f64;
        for (s, (f, st)) in frames.iter().zip(states).enumerate() {
            let mine: Vec<&TrainingPair> = self.pairs.iter().filter(|p| p.view as usize == s).collect();
            if mine.is_empty() {
                continue;
            }
            let pts: Vec<V3> = mine.iter().map(|p| p.p_cam).collect();
            let w = deform(st, &f.camera.pose, &pts, false)?.world;
            for (p, y) in mine.iter().zip(&w) {
                worst = worst.max((p.p0 - y).norm());
            }
        }
        Ok(worst)
    }
}

/// Uniformly samples up to `m_per_frame` points of every alignable frame
/// and maps them to the canonical space.
pub fn sample_pairs(frames: &[FrameData], states: &[FrameState], m_per_frame: usize, seed: u64) -> Result<TrainingPairSet> {
    let all: Vec<Vec<usize>> = frames.iter().map(|f| (0..f.len()).collect()).collect();
    sample_pairs_from(frames, states, &all, m_per_frame, seed)
}

/// As [`sample_pairs`], drawing frame `s` only from `candidates[s]`.
pub fn sample_pairs_from(
    frames: &[FrameData],
    states: &[FrameState],
    candidates: &[Vec<usize>],
    m_per_frame: usize,
    seed: u64,
) -> Result<TrainingPairSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (s, (f, st)) in frames.iter().zip(states).enumerate() {
        let cand = &candidates[s];
        if st.unalignable || cand.is_empty() {
            continue;
        }
        let mut idx: Vec<usize> = if cand.len() <= m_per_frame {
            cand.clone()
        } else {
            rand::seq::index::sample(&mut rng, cand.len(), m_per_frame).into_iter().map(|k| cand[k]).collect()
        };
        idx.sort_unstable();
        let pts: Vec<V3> = idx.iter().map(|&i| f.positions()[i]).collect();
        let w = deform(st, &f.camera.pose, &pts, false)?.world;
        pairs.extend(idx.iter().zip(pts).zip(w).map(|((&index, p_cam), p0)| TrainingPair {
            view: s as u32,
            index,
            p_cam,
            p0,
        }));
    }
    Ok(TrainingPairSet { pairs })
}

/// Splits each frame's point indices into `(held_out, rest)`, holding out
/// up to `per_frame` points but never more than half a frame.
pub fn split_holdout(frames: &[FrameData], per_frame: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    frames
        .iter()
        .map(|f| {
            let n = f.len();
            let mut held = rand::seq::index::sample(&mut rng, n, per_frame.min(n / 2)).into_vec();
            held.sort_unstable();
            let mut mask = vec![false; n];
            held.iter().for_each(|&i| mask[i] = true);
            (held, (0..n).filter(|&i| !mask[i]).collect())
        })
        .unzip()
}

/// A trained backward field with the per-view rigid poses that express
/// canonical points in each camera's frame.
#[derive(Clone, Debug)]
pub struct InverseField {
    pub field: DeformationField,
    pub poses: Vec<RigidTransform>,
}

impl InverseField {
    /// `R_iᵀ (p⁰ - t_i)` for view `i`.
    pub fn local(&self, view: u32, p0: &V3) -> V3 {
        to_local(&self.poses[view as usize], p0)
    }

    /// Maps canonical points of one view back to its camera space.
    pub fn apply(&self, view: u32, p0: &[V3]) -> Result<Vec<V3>> {
        let local: Vec<V3> = p0.iter().map(|p| self.local(view, p)).collect();
        let views = vec![view; local.len()];
        let tw = self.field.eval_batch(&local, Some(&views))?;
        Ok(tw.iter().zip(&local).map(|(xi, p)| exp_unchecked(xi).apply(p)).collect())
    }
}

fn to_local(pose: &RigidTransform, p0: &V3) -> V3 {
    pose.rotation.transpose() * (p0 - pose.translation)
}

/// Effective camera pose of every frame, `exp(ξ_g) · pose₀`.
pub fn effective_poses(frames: &[FrameData], states: &[FrameState]) -> Vec<RigidTransform> {
    frames.iter().zip(states).map(|(f, s)| s.pose(&f.camera.pose)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InverseReport {
    pub iterations: usize,
    /// Mean squared reconstruction error over all pairs after training.
    pub final_loss: f64,
    pub trace: Vec<f64>,
}

/// Mean squared camera-space error `‖exp(F⁻¹(p′)) p′ - p_cam‖²` over
/// `pairs`. When `grad` is given, the parameter gradient is accumulated.
pub fn inverse_loss(inv: &InverseField, pairs: &[TrainingPair], grad: Option<&mut [f64]>) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let local: Vec<V3> = pairs.iter().map(|p| inv.local(p.view, &p.p0)).collect();
    let views: Vec<u32> = pairs.iter().map(|p| p.view).collect();
    let tape = inv.field.forward(&local, Some(&views))?;
    let inv_n = 1.0 / pairs.len() as f64;
    let per: Vec<(f64, [f64; 6])> = (0..pairs.len())
        .into_par_iter()
        .map(|j| {
            let (y, jac) = apply_exp_with_jacobian(&tape.twist(j), &local[j]);
            let r = y - pairs[j].p_cam;
            let u = jac.transpose() * r * (2.0 * inv_n);
            (r.norm_squared(), [u[0], u[1], u[2], u[3], u[4], u[5]])
        })
        .collect();
    let loss = per.iter().map(|x| x.0).sum::<f64>() * inv_n;
    if let Some(g) = grad {
        let up: Vec<[f64; 6]> = per.iter().map(|x| x.1).collect();
        inv.field.backward(&tape, &up, g)?;
    }
    Ok(loss)
}

/// Trains the backward field on `pairs` by mini-batch Adam on the mean
/// squared camera-space reconstruction error plus the TV regularizer.
pub fn train_inverse(
    pairs: &TrainingPairSet,
    poses: Vec<RigidTransform>,
    inv_cfg: &InverseConfig,
    field_cfg: &FieldConfig,
    s_vox: f64,
    seed: u64,
) -> Result<(InverseField, InverseReport)> {
    if pairs.is_empty() {
        return Err(Error::Empty("inverse training pairs"));
    }
    let local: Vec<V3> = pairs.pairs.iter().map(|p| to_local(&poses[p.view as usize], &p.p0)).collect();
    let spec = field_cfg.spec(&local, s_vox, inv_cfg.log2_table)?.with_views(poses.len(), field_cfg.embed_dim);
    let field = DeformationField::with_grid_init(spec, seed, field_cfg.grid_init)?;
    let mut inv = InverseField { field, poses };
    let mut opt = Adam::new("inverse field", inv.field.num_params(), inv_cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1D7E_25E0);
    let mut report = InverseReport::default();
    let n = pairs.len();
    for it in 0..inv_cfg.iters {
        let batch: Vec<TrainingPair> = if n <= inv_cfg.batch {
            pairs.pairs.clone()
        } else {
            rand::seq::index::sample(&mut rng, n, inv_cfg.batch).into_iter().map(|i| pairs.pairs[i]).collect()
        };
        let mut g = inv.field.zero_grad();
        let mut loss = inverse_loss(&inv, &batch, Some(&mut g))?;
        if inv_cfg.lambda_tv > 0.0 && inv_cfg.tv_samples > 0 {
            let m = inv_cfg.tv_samples.min(batch.len());
            let tv_pts: Vec<V3> = batch[..m].iter().map(|p| inv.local(p.view, &p.p0)).collect();
            let tv_views: Vec<u32> = batch[..m].iter().map(|p| p.view).collect();
            loss += inv_cfg.lambda_tv
                * inv
                    .field
                    .tv_loss(&tv_pts, Some(&tv_views), s_vox, Some((&mut g, inv_cfg.lambda_tv)))?;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("inverse field: non-finite loss at step {it}")));
        }
        report.trace.push(loss);
        opt.step(inv.field.params_mut(), &g)?;
    }
    report.iterations = inv_cfg.iters;
    report.final_loss = inverse_loss(&inv, &pairs.pairs, None)?;
    info!("inverse field: {} steps, final loss {:.3e}", report.iterations, report.final_loss);
    Ok((inv, report))
}

/// Roundtrip errors `‖F⁻¹(F(p)) - p‖` on the points `held[s]` of each
/// alignable frame `s`.
pub fn roundtrip_errors(
    inv: &InverseField,
    frames: &[FrameData],
    states: &[FrameState],
    held: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (s, (f, st)) in frames.iter().zip(states).enumerate() {
        if st.unalignable || held[s].is_empty() {
            continue;
        }
        let pts: Vec<V3> = held[s].iter().map(|&i| f.positions()[i]).collect();
        let p0 = deform(st, &f.camera.pose, &pts, false)?.world;
        let back = inv.apply(s as u32, &p0)?;
        out.extend(back.iter().zip(&pts).map(|(a, b)| (a - b).norm()));
    }
    Ok(out)
}

/// Median roundtrip error, or `None` without held-out points.
pub fn roundtrip_median(errors: &[f64]) -> Option<f64> {
    median(errors)
}
