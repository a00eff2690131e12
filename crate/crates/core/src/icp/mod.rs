//! Stage 1: sequential non-rigid frame-to-model alignment.
//!
//! Each frame's camera-space points are first moved by the frame's
//! deformation field, `p' = exp(F(p)) p`, then placed in the world by the
//! corrected camera pose `exp(ξ_g) · (R₀, t₀)`.

mod losses;
mod merge;
mod sequence;

pub use losses::{associate, loss_color, loss_corr, loss_data, CorrTerm, LossTerm, Surface};
pub use merge::{frame_residuals, mad_threshold, merge_frame, MergeDecision, MergeStats, Residuals, MAD_SCALE};
pub use sequence::{correspondence_terms, renormalize, run_stage1, FrameReport, FrameWorld, Model, Stage1};

use nalgebra::{Matrix3, Matrix3x6, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{luma, PointCloud};
use crate::config::{FieldConfig, IcpConfig};
use crate::error::{Error, Result};
use crate::field::{DeformationField, Tape};
use crate::ingest::CameraModel;
use crate::lie::{apply_exp_with_jacobian, exp_unchecked, exp_with_derivatives, RigidTransform, Twist};
use crate::optim::Adam;
use crate::spatial::{estimate_normals, NeighborIndex, VoxelGrid};

type V3 = Vector3<f64>;

/// One filtered frame in camera space.
#[derive(Clone, Debug)]
pub struct FrameData {
    pub frame_id: u32,
    pub camera: CameraModel,
    /// Camera-space points with camera-space normals and pixel coordinates.
    pub points: PointCloud,
    pub stride: usize,
    pub intensities: Vec<f64>,
    grid_w: usize,
    grid_h: usize,
    /// Local index + 1 per stride cell, 0 when empty.
    grid: Vec<u32>,
}

impl FrameData {
    /// Estimates camera-space normals (oriented toward the camera) and builds
    /// the pixel lookup.
    pub fn new(frame_id: u32, camera: CameraModel, points: PointCloud, stride: usize, normal_k: usize) -> Result<Self> {
        let stride = stride.max(1);
        let px = points.pixel_coords.as_ref().ok_or_else(|| Error::Frame {
            frame: frame_id,
            msg: "points lack pixel coordinates".into(),
        })?;
        let (grid_w, grid_h) = (camera.width.div_ceil(stride), camera.height.div_ceil(stride));
        let mut grid = vec![0u32; grid_w * grid_h];
        for (i, [u, v]) in px.iter().enumerate() {
            let (gx, gy) = (*u as usize / stride, *v as usize / stride);
            if gx >= grid_w || gy >= grid_h {
                return Err(Error::Frame {
                    frame: frame_id,
                    msg: format!("pixel ({u}, {v}) outside the image"),
                });
            }
            grid[gy * grid_w + gx] = i as u32 + 1;
        }
        let points = estimate_normals(&points, normal_k, |_| V3::zeros()).map_err(|e| Error::Frame {
            frame: frame_id,
            msg: e.to_string(),
        })?;
        let intensities = points.colors.iter().map(luma).collect();
        Ok(Self {
            frame_id,
            camera,
            points,
            stride,
            intensities,
            grid_w,
            grid_h,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> &[V3] {
        &self.points.positions
    }

    pub fn normals(&self) -> &[V3] {
        self.points.normals.as_deref().unwrap_or(&[])
    }

    fn cell(&self, gx: i64, gy: i64) -> Option<usize> {
        if gx < 0 || gy < 0 || gx as usize >= self.grid_w || gy as usize >= self.grid_h {
            return None;
        }
        match self.grid[gy as usize * self.grid_w + gx as usize] {
            0 => None,
            i => Some(i as usize - 1),
        }
    }

    /// Local index of the point at an exact pixel on the stride grid.
    pub fn pixel(&self, u: u32, v: u32) -> Option<usize> {
        if u as usize % self.stride != 0 || v as usize % self.stride != 0 {
            return None;
        }
        self.cell((u as usize / self.stride) as i64, (v as usize / self.stride) as i64)
    }

    /// Bilinear corners of a sub-pixel location on the stride grid. `None`
    /// when a corner with nonzero weight has no point.
    pub fn bilinear(&self, u: f64, v: f64) -> Option<[(usize, f64); 4]> {
        let (gx, gy) = (u / self.stride as f64, v / self.stride as f64);
        let (x0, y0) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - x0, gy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let spec = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        let mut out = [(0usize, 0.0); 4];
        let mut any = None;
        for (k, &(x, y, w)) in spec.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let i = self.cell(x, y)?;
            any = Some(i);
            out[k] = (i, w);
        }
        let anchor = any?;
        for c in &mut out {
            if c.1 == 0.0 {
                c.0 = anchor;
            }
        }
        Some(out)
    }
}

/// Per-frame unknowns: the camera correction twist and the deformation
/// field. `field == None` is the identity deformation.
#[derive(Clone, Debug)]
pub struct FrameState {
    pub frame_id: u32,
    pub camera_twist: Twist,
    pub field: Option<DeformationField>,
    pub unalignable: bool,
}

impl FrameState {
    pub fn identity(frame_id: u32) -> Self {
        Self {
            frame_id,
            camera_twist: Twist::ZERO,
            field: None,
            unalignable: false,
        }
    }

    /// Effective camera-to-world transform `exp(ξ_g) · pose0`.
    pub fn pose(&self, pose0: &RigidTransform) -> RigidTransform {
        exp_unchecked(&self.camera_twist).compose(pose0)
    }
}

/// Summary of a frame state, written next to the field blob in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub frame_id: u32,
    pub camera_twist: [f64; 6],
    pub has_field: bool,
    pub unalignable: bool,
}

impl From<&FrameState> for StateRecord {
    fn from(s: &FrameState) -> Self {
        Self {
            frame_id: s.frame_id,
            camera_twist: s.camera_twist.to_array(),
            has_field: s.field.is_some(),
            unalignable: s.unalignable,
        }
    }
}

/// Forward-deformed points with what the backward pass needs.
pub struct Deformed {
    pub world: Vec<V3>,
    /// `R_g R₀`, the rotation from deformed camera space to world.
    pub camera_rotation: Matrix3<f64>,
    /// Points after the field, mapped by `pose0` but before the correction.
    z: Vec<V3>,
    /// `∂p'/∂ξ` per point; empty without a field or without gradients.
    jac: Vec<Matrix3x6<f64>>,
    tape: Option<Tape>,
}

/// Applies the forward deformation of `state` to camera-space `points`.
pub fn deform(state: &FrameState, pose0: &RigidTransform, points: &[V3], with_grad: bool) -> Result<Deformed> {
    let corr = exp_unchecked(&state.camera_twist);
    let camera_rotation = corr.rotation * pose0.rotation;
    let (prime, jac, tape) = match &state.field {
        Some(field) => {
            let tape = field.forward(points, None)?;
            let (prime, jac): (Vec<V3>, Vec<Matrix3x6<f64>>) = if with_grad {
                points
                    .par_iter()
                    .enumerate()
                    .map(|(i, p)| apply_exp_with_jacobian(&tape.twist(i), p))
                    .unzip()
            } else {
                (
                    points.par_iter().enumerate().map(|(i, p)| exp_unchecked(&tape.twist(i)).apply(p)).collect(),
                    Vec::new(),
                )
            };
            (prime, jac, with_grad.then_some(tape))
        }
        None => (points.to_vec(), Vec::new(), None),
    };
    let z: Vec<V3> = prime.iter().map(|p| pose0.apply(p)).collect();
    let world = z.iter().map(|p| corr.apply(p)).collect();
    Ok(Deformed {
        world,
        camera_rotation,
        z,
        jac,
        tape,
    })
}

impl Deformed {
    /// Chains per-point world gradients into the camera twist gradient and,
    /// when the deformation was taped, the field parameter gradient.
    pub fn backprop(
        &self,
        state: &FrameState,
        g_world: &[V3],
        g_cam: &mut [f64; 6],
        g_field: Option<&mut [f64]>,
    ) -> Result<()> {
        let (_, dr, dt) = exp_with_derivatives(&state.camera_twist);
        for (g, z) in g_world.iter().zip(&self.z) {
            if *g == V3::zeros() {
                continue;
            }
            for k in 0..6 {
                g_cam[k] += g.dot(&(dr[k] * z + dt[k]));
            }
        }
        if let (Some(buf), Some(tape), Some(field)) = (g_field, &self.tape, &state.field) {
            let rt = self.camera_rotation.transpose();
            let up: Vec<[f64; 6]> = g_world
                .iter()
                .zip(&self.jac)
                .map(|(g, j)| {
                    let u = j.transpose() * (rt * g);
                    [u[0], u[1], u[2], u[3], u[4], u[5]]
                })
                .collect();
            field.backward(tape, &up, buf)?;
        }
        Ok(())
    }
}

/// World-space cloud of a frame under `state`; normals are rotated by the
/// full per-point rotation when present.
pub fn apply_forward(cloud_cam: &PointCloud, pose0: &RigidTransform, state: &FrameState) -> Result<PointCloud> {
    let d = deform(state, pose0, &cloud_cam.positions, false)?;
    let mut out = cloud_cam.clone();
    if let Some(n) = &cloud_cam.normals {
        let rots = point_rotations(state, pose0, &cloud_cam.positions)?;
        out.normals = Some(n.iter().zip(&rots).map(|(n, r)| r * n).collect());
    }
    out.positions = d.world;
    Ok(out)
}

/// Total rotation `R_g R₀ R_p` applied to each point's local frame.
pub fn point_rotations(state: &FrameState, pose0: &RigidTransform, points: &[V3]) -> Result<Vec<Matrix3<f64>>> {
    let base = exp_unchecked(&state.camera_twist).rotation * pose0.rotation;
    Ok(match &state.field {
        Some(f) => f.eval_batch(points, None)?.iter().map(|xi| base * exp_unchecked(xi).rotation).collect(),
        None => vec![base; points.len()],
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub color: f64,
    pub corr: f64,
    pub tv: f64,
}

impl Weights {
    pub fn from_config(c: &IcpConfig) -> Self {
        Self {
            color: c.lambda_color,
            corr: c.lambda_corr,
            tv: c.lambda_tv,
        }
    }
}

/// Loss values of one evaluation of the frame energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyParts {
    pub data: f64,
    pub color: f64,
    pub corr: f64,
    pub tv: f64,
    pub total: f64,
    pub inliers: usize,
    pub corr_count: usize,
}

/// Everything the frame energy depends on besides the state.
pub struct EnergyContext<'a> {
    /// Camera-space points and their intensities.
    pub points: &'a [V3],
    pub intensities: &'a [f64],
    pub pose0: &'a RigidTransform,
    pub surface: Surface<'a>,
    pub corr: &'a [CorrTerm],
    pub weights: Weights,
    /// Camera-space points on which the TV term is evaluated.
    pub tv_points: &'a [V3],
    pub s_vox: f64,
}

impl EnergyContext<'_> {
    /// Energy at `d` (already deformed with `state`) for fixed associations.
    /// Gradients are accumulated when buffers are given.
    pub fn evaluate(
        &self,
        state: &FrameState,
        d: &Deformed,
        assoc: &[Option<usize>],
        grads: Option<(&mut [f64; 6], Option<&mut [f64]>)>,
    ) -> Result<EnergyParts> {
        let w = self.weights;
        let data = loss_data(&d.world, assoc, &self.surface);
        let color = if w.color > 0.0 {
            loss_color(&d.world, self.intensities, assoc, &self.surface)
        } else {
            LossTerm::zero(d.world.len())
        };
        let corr = if w.corr > 0.0 {
            loss_corr(&d.world, self.corr)
        } else {
            LossTerm::zero(d.world.len())
        };
        let mut parts = EnergyParts {
            data: data.value,
            color: color.value,
            corr: corr.value,
            inliers: data.count,
            corr_count: corr.count,
            ..Default::default()
        };
        let field_on = state.field.is_some() && !self.tv_points.is_empty();
        match grads {
            Some((g_cam, g_field)) => {
                let g: Vec<V3> = (0..d.world.len())
                    .map(|i| data.grad[i] + color.grad[i] * w.color + corr.grad[i] * w.corr)
                    .collect();
                let mut g_field = g_field;
                d.backprop(state, &g, g_cam, g_field.as_deref_mut())?;
                if field_on && w.tv > 0.0 {
                    let f = state.field.as_ref().unwrap();
                    parts.tv = f.tv_loss(self.tv_points, None, self.s_vox, g_field.map(|b| (b, w.tv)))?;
                }
            }
            None => {
                if field_on && w.tv > 0.0 {
                    parts.tv = state.field.as_ref().unwrap().tv_loss(self.tv_points, None, self.s_vox, None)?;
                }
            }
        }
        parts.total = parts.data + w.color * parts.color + w.corr * parts.corr + w.tv * parts.tv;
        Ok(parts)
    }

    /// Deforms, evaluates and returns the energy for fixed associations.
    pub fn energy(
        &self,
        state: &FrameState,
        assoc: &[Option<usize>],
        grads: Option<(&mut [f64; 6], Option<&mut [f64]>)>,
    ) -> Result<EnergyParts> {
        let d = deform(state, self.pose0, self.points, grads.is_some())?;
        self.evaluate(state, &d, assoc, grads)
    }
}

/// Outcome of aligning one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub frame_id: u32,
    pub iterations: usize,
    pub unalignable: bool,
    pub trace: Vec<EnergyParts>,
}

/// Coarse-to-fine alignment of `frame` against `surface`. The field is
/// frozen on every scale but the finest, and entirely when `rigid_only`.
pub fn align_frame(
    surface: &Surface,
    frame: &FrameData,
    corr: &[CorrTerm],
    mut state: FrameState,
    icp: &IcpConfig,
    field_cfg: &FieldConfig,
    seed: u64,
) -> Result<(FrameState, AlignReport)> {
    if surface.is_empty() {
        return Err(Error::Empty("alignment model"));
    }
    let pose0 = frame.camera.pose.clone();
    let pts = frame.positions();
    let mut report = AlignReport {
        frame_id: frame.frame_id,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (frame.frame_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut cam_opt = Adam::new("camera twist", 6, icp.lr_camera);
    let scales = icp.s_vox.len();
    let mut zero_streak = 0;
    for s in 0..scales {
        let (s_vox, d_max, iters) = (icp.s_vox[s], icp.d_max[s], icp.iters[s]);
        let fine = s + 1 == scales;
        let reps = VoxelGrid::build(surface.positions, s_vox).representatives(surface.positions);
        let rep_pos: Vec<V3> = reps.iter().map(|&i| surface.positions[i]).collect();
        let index = NeighborIndex::build(&rep_pos)?;
        // frame voxelized in the world, on the same grid as the model
        let placed = deform(&state, &pose0, pts, false)?.world;
        let active = VoxelGrid::build(&placed, s_vox).representatives(&placed);
        // only active points and correspondence corners enter the energy
        let mut used = active.clone();
        used.extend(corr.iter().flat_map(|c| c.corners).filter(|c| c.1 != 0.0).map(|c| c.0));
        used.sort_unstable();
        used.dedup();
        let mut slot = vec![usize::MAX; pts.len()];
        for (k, &i) in used.iter().enumerate() {
            slot[i] = k;
        }
        let sub_pts: Vec<V3> = used.iter().map(|&i| pts[i]).collect();
        let sub_int: Vec<f64> = used.iter().map(|&i| frame.intensities[i]).collect();
        let sub_active: Vec<usize> = active.iter().map(|&i| slot[i]).collect();
        let sub_corr: Vec<CorrTerm> = corr
            .iter()
            .map(|c| CorrTerm {
                corners: c.corners.map(|(i, b)| (if b != 0.0 { slot[i] } else { 0 }, b)),
                ..*c
            })
            .collect();
        let with_field = fine && !icp.rigid_only && iters > 0;
        if with_field && state.field.is_none() {
            let spec = field_cfg.spec(pts, s_vox, field_cfg.log2_table)?;
            state.field = Some(DeformationField::with_grid_init(spec, seed ^ frame.frame_id as u64, field_cfg.grid_init)?);
        }
        let mut field_opt = state
            .field
            .as_ref()
            .filter(|_| with_field)
            .map(|f| Adam::new("field", f.num_params(), icp.lr));
        for _ in 0..iters {
            let tv_points: Vec<V3> = if field_opt.is_some() && icp.lambda_tv > 0.0 {
                sample_indices(&mut rng, pts.len(), icp.tv_samples).into_iter().map(|i| pts[i]).collect()
            } else {
                Vec::new()
            };
            let ctx = EnergyContext {
                points: &sub_pts,
                intensities: &sub_int,
                pose0: &pose0,
                surface: *surface,
                corr: &sub_corr,
                weights: Weights::from_config(icp),
                tv_points: &tv_points,
                s_vox,
            };
            let d = deform(&state, &pose0, &sub_pts, true)?;
            let assoc = associate(&d.world, &sub_active, &index, Some(&reps), surface, d_max);
            let mut g_cam = [0.0; 6];
            let mut g_field = field_opt.as_ref().map(|_| state.field.as_ref().unwrap().zero_grad());
            let parts = ctx.evaluate(&state, &d, &assoc, Some((&mut g_cam, g_field.as_deref_mut())))?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged(format!("frame {}: non-finite energy", frame.frame_id)));
            }
            report.trace.push(parts);
            report.iterations += 1;
            if parts.inliers == 0 {
                zero_streak += 1;
                if zero_streak > icp.unalignable_after {
                    state.unalignable = true;
                    report.unalignable = true;
                    return Ok((state, report));
                }
            } else {
                zero_streak = 0;
            }
            let mut xi = state.camera_twist.to_array();
            cam_opt.step(&mut xi, &g_cam)?;
            state.camera_twist = Twist::from_array(xi);
            if let (Some(opt), Some(g)) = (field_opt.as_mut(), g_field) {
                opt.step(state.field.as_mut().unwrap().params_mut(), &g)?;
            }
        }
    }
    Ok((state, report))
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    if n <= m {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, m).into_vec()
    }
}

#[cfg(test)]
mod tests;
