//! Joint refinement of every frame's camera and deformation field against
//! the other frames of the merged model, regularized toward the state at
//! entry.

use log::{info, warn};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::icp::{deform, point_rotations, FrameData, FrameState, LossTerm, Model, Surface};
use crate::lie::Twist;
use crate::optim::Adam;
use crate::spatial::NeighborIndex;

type V3 = Vector3<f64>;

/// One cross-frame pair: model point `p` and a neighbor `q` from another
/// frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub p: usize,
    pub q: usize,
}

/// Up to `k` nearest neighbors of each point among points of other frames,
/// closer than `d_max` and with a valid normal.
pub fn cross_frame_pairs(world: &[V3], frame_of: &[usize], surface: &Surface, k: usize, d_max: f64) -> Result<Vec<Pair>> {
    let index = NeighborIndex::build(world)?;
    let d2 = d_max * d_max;
    let per: Vec<Vec<Pair>> = (0..world.len())
        .into_par_iter()
        .map(|p| {
            let f = frame_of[p];
            index
                .k_nearest_where(&world[p], k, d2, |j| frame_of[j] != f && surface.normal_valid(j))
                .into_iter()
                .map(|n| Pair { p, q: n.index })
                .collect()
        })
        .collect();
    Ok(per.into_iter().flatten().collect())
}

/// Point-to-plane and color terms over cross-frame pairs, averaged over
/// pairs. Both endpoints receive gradients; normals, intensities and
/// gradients of `surface` are held fixed.
pub fn global_losses(world: &[V3], pairs: &[Pair], surface: &Surface) -> (LossTerm, LossTerm) {
    let n = world.len();
    let mut data = LossTerm::zero(n);
    let mut color = LossTerm::zero(n);
    if pairs.is_empty() {
        return (data, color);
    }
    let inv = 1.0 / pairs.len() as f64;
    for &Pair { p, q } in pairs {
        let nq = surface.normals[q];
        let diff = world[p] - world[q];
        let r = diff.dot(&nq);
        data.value += r * r;
        let g = nq * (2.0 * r * inv);
        data.grad[p] += g;
        data.grad[q] -= g;
        let d = surface.gradients[q];
        let d_tan = d - nq * nq.dot(&d);
        let c = surface.intensities[q] + d_tan.dot(&diff) - surface.intensities[p];
        color.value += c * c;
        let g = d_tan * (2.0 * c * inv);
        color.grad[p] += g;
        color.grad[q] -= g;
    }
    data.value *= inv;
    color.value *= inv;
    data.count = pairs.len();
    color.count = pairs.len();
    (data, color)
}

/// Anchor points and twists of every frame, frozen at stage entry.
#[derive(Clone, Debug)]
pub struct GlobalSnapshot {
    pub cameras: Vec<Twist>,
    /// Camera-space anchor points per frame.
    pub anchors: Vec<Vec<V3>>,
    /// Field twists at the anchors; empty for frames without a field.
    pub twists: Vec<Vec<[f64; 6]>>,
}

impl GlobalSnapshot {
    /// Draws up to `m` anchors uniformly from each frame's points.
    pub fn take(states: &[FrameState], points: &[Vec<V3>], m: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut anchors = Vec::with_capacity(states.len());
        let mut twists = Vec::with_capacity(states.len());
        for (s, pts) in states.iter().zip(points) {
            let a: Vec<V3> = if pts.len() <= m {
                pts.clone()
            } else {
                rand::seq::index::sample(&mut rng, pts.len(), m).into_iter().map(|i| pts[i]).collect()
            };
            let t = match &s.field {
                Some(f) if !a.is_empty() => f.forward(&a, None)?.outputs().to_vec(),
                _ => Vec::new(),
            };
            anchors.push(a);
            twists.push(t);
        }
        Ok(Self {
            cameras: states.iter().map(|s| s.camera_twist).collect(),
            anchors,
            twists,
        })
    }
}

/// Gradient of the global energy with respect to one frame's state.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGrad {
    pub camera: [f64; 6],
    pub field: Option<Vec<f64>>,
}

impl FrameGrad {
    pub fn zero(state: &FrameState) -> Self {
        Self {
            camera: [0.0; 6],
            field: state.field.as_ref().map(|f| f.zero_grad()),
        }
    }
}

/// Mean over the `optimized` frames of the anchor twist deviation plus the
/// camera twist deviation. Gradients are accumulated with weight `scale`.
pub fn anchor_loss(
    states: &[FrameState],
    snap: &GlobalSnapshot,
    optimized: &[bool],
    mut grads: Option<(&mut [FrameGrad], f64)>,
) -> Result<f64> {
    let count = optimized.iter().filter(|o| **o).count();
    if count == 0 {
        return Ok(0.0);
    }
    let inv_n = 1.0 / count as f64;
    let mut total = 0.0;
    for (i, s) in states.iter().enumerate() {
        if !optimized[i] {
            continue;
        }
        let dc = s.camera_twist.to_array();
        let c0 = snap.cameras[i].to_array();
        let mut cam = 0.0;
        for k in 0..6 {
            let d = dc[k] - c0[k];
            cam += d * d;
            if let Some((g, scale)) = grads.as_mut() {
                g[i].camera[k] += *scale * 2.0 * d * inv_n;
            }
        }
        let mut field_term = 0.0;
        if let (Some(f), false) = (&s.field, snap.anchors[i].is_empty() || snap.twists[i].is_empty()) {
            let tape = f.forward(&snap.anchors[i], None)?;
            let inv_m = 1.0 / snap.anchors[i].len() as f64;
            let mut up = Vec::with_capacity(tape.len());
            for (o, t0) in tape.outputs().iter().zip(&snap.twists[i]) {
                let mut u = [0.0; 6];
                for k in 0..6 {
                    let d = o[k] - t0[k];
                    field_term += d * d;
                    u[k] = 2.0 * d * inv_m * inv_n;
                }
                up.push(u);
            }
            field_term *= inv_m;
            if let Some((g, scale)) = grads.as_mut() {
                if let Some(buf) = g[i].field.as_mut() {
                    up.iter_mut().flatten().for_each(|x| *x *= *scale);
                    f.backward(&tape, &up, buf)?;
                }
            }
        }
        total += field_term + cam;
    }
    Ok(total * inv_n)
}

/// The merged model arranged per frame, with surface attributes frozen at
/// stage entry.
pub struct GlobalProblem<'a> {
    pub frames: &'a [FrameData],
    /// Model indices of each frame's points.
    pub groups: Vec<Vec<usize>>,
    /// Camera-space positions of each group.
    pub points: Vec<Vec<V3>>,
    /// Frame slot of each model point.
    pub frame_of: Vec<usize>,
    pub normals: Vec<V3>,
    pub intensities: Vec<f64>,
    pub gradients: Vec<V3>,
}

/// Loss values of one global evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalParts {
    pub data: f64,
    pub color: f64,
    pub anchor: f64,
    pub total: f64,
    pub pairs: usize,
}

impl<'a> GlobalProblem<'a> {
    pub fn new(frames: &'a [FrameData], model: &Model) -> Result<Self> {
        let slot_of = |id: u32| frames.iter().position(|f| f.frame_id == id);
        let mut groups = vec![Vec::new(); frames.len()];
        let mut points = vec![Vec::new(); frames.len()];
        let mut frame_of = Vec::with_capacity(model.len());
        for i in 0..model.len() {
            let id = model.cloud.frame_ids[i];
            let s = slot_of(id).ok_or_else(|| Error::Frame {
                frame: id,
                msg: "model point from an unknown frame".into(),
            })?;
            groups[s].push(i);
            points[s].push(frames[s].positions()[model.local[i] as usize]);
            frame_of.push(s);
        }
        Ok(Self {
            frames,
            groups,
            points,
            frame_of,
            normals: model.cloud.normals.clone().unwrap_or_else(|| vec![V3::zeros(); model.len()]),
            intensities: model.intensities.clone(),
            gradients: model.gradients.clone(),
        })
    }

    pub fn surface(&self, world: &'a [V3]) -> Surface<'_> {
        Surface {
            positions: world,
            normals: &self.normals,
            intensities: &self.intensities,
            gradients: &self.gradients,
        }
    }

    /// World positions of all model points under `states`.
    pub fn world(&self, states: &[FrameState]) -> Result<Vec<V3>> {
        let mut out = vec![V3::zeros(); self.frame_of.len()];
        for (s, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            let d = deform(&states[s], &self.frames[s].camera.pose, &self.points[s], false)?;
            for (k, &i) in g.iter().enumerate() {
                out[i] = d.world[k];
            }
        }
        Ok(out)
    }

    /// Frames whose state is optimized: every frame but the first that
    /// contributes points.
    pub fn optimized(&self, states: &[FrameState]) -> Vec<bool> {
        (0..self.groups.len())
            .map(|s| s > 0 && !states[s].unalignable && !self.groups[s].is_empty())
            .collect()
    }

    /// Global energy for fixed pairs; gradients of optimized frames are
    /// accumulated when `grads` is given.
    pub fn energy(
        &self,
        states: &[FrameState],
        snap: &GlobalSnapshot,
        pairs: &[Pair],
        lambda_color: f64,
        lambda_anchor: f64,
        grads: Option<&mut [FrameGrad]>,
    ) -> Result<GlobalParts> {
        let optimized = self.optimized(states);
        let want = grads.is_some();
        let mut taped = Vec::with_capacity(self.groups.len());
        let mut world = vec![V3::zeros(); self.frame_of.len()];
        for (s, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                taped.push(None);
                continue;
            }
            let d = deform(&states[s], &self.frames[s].camera.pose, &self.points[s], want && optimized[s])?;
            for (k, &i) in g.iter().enumerate() {
                world[i] = d.world[k];
            }
            taped.push(Some(d));
        }
        let (data, color) = global_losses(&world, pairs, &self.surface(&world));
        let mut parts = GlobalParts {
            data: data.value,
            color: color.value,
            pairs: pairs.len(),
            ..Default::default()
        };
        match grads {
            Some(gr) => {
                for (s, g) in self.groups.iter().enumerate() {
                    let (true, Some(d)) = (optimized[s], &taped[s]) else { continue };
                    let gw: Vec<V3> = g.iter().map(|&i| data.grad[i] + color.grad[i] * lambda_color).collect();
                    let fg = &mut gr[s];
                    d.backprop(&states[s], &gw, &mut fg.camera, fg.field.as_deref_mut())?;
                }
                parts.anchor = anchor_loss(states, snap, &optimized, Some((gr, lambda_anchor)))?;
            }
            None => parts.anchor = anchor_loss(states, snap, &optimized, None)?,
        }
        parts.total = parts.data + lambda_color * parts.color + lambda_anchor * parts.anchor;
        Ok(parts)
    }
}

/// Outcome of the global stage.
#[derive(Clone, Debug)]
pub struct GlobalResult {
    pub states: Vec<FrameState>,
    /// The model re-deformed with the refined states.
    pub model: Model,
    pub trace: Vec<GlobalParts>,
    /// Stopped early by the divergence guard.
    pub halted: bool,
}

/// Runs the global stage. With zero iterations the inputs are returned
/// unchanged.
pub fn run_global(frames: &[FrameData], states: &[FrameState], model: &Model, cfg: &Config) -> Result<GlobalResult> {
    let g = &cfg.global;
    let mut out = GlobalResult {
        states: states.to_vec(),
        model: model.clone(),
        trace: Vec::new(),
        halted: false,
    };
    if g.iters == 0 || model.is_empty() {
        return Ok(out);
    }
    let problem = GlobalProblem::new(frames, model)?;
    let snap = GlobalSnapshot::take(states, &problem.points, g.anchors, cfg.seed ^ 0xA11C_0000)?;
    let optimized = problem.optimized(states);
    let mut cam_opt: Vec<Adam> = (0..frames.len()).map(|_| Adam::new("camera twist", 6, g.lr_camera)).collect();
    let mut field_opt: Vec<Option<Adam>> = states
        .iter()
        .map(|s| s.field.as_ref().map(|f| Adam::new("field", f.num_params(), g.lr)))
        .collect();
    let d_max = cfg.fine_d_max();
    let mut cur = states.to_vec();
    let mut best = (f64::INFINITY, cur.clone());
    let mut rising = 0usize;
    let mut prev = f64::INFINITY;
    for it in 0..g.iters {
        let world = problem.world(&cur)?;
        let pairs = cross_frame_pairs(&world, &problem.frame_of, &problem.surface(&world), g.neighbors, d_max)?;
        let mut grads: Vec<FrameGrad> = cur.iter().map(FrameGrad::zero).collect();
        let parts = problem.energy(&cur, &snap, &pairs, g.lambda_color, g.lambda_anchor, Some(&mut grads))?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged(format!("global iteration {it}: non-finite energy")));
        }
        out.trace.push(parts);
        if parts.total < best.0 {
            best = (parts.total, cur.clone());
        }
        rising = if parts.total > prev { rising + 1 } else { 0 };
        prev = parts.total;
        if rising >= g.patience {
            warn!("global: energy rose for {rising} iterations, keeping the best state");
            cur = best.1.clone();
            out.halted = true;
            break;
        }
        for (s, st) in cur.iter_mut().enumerate() {
            if !optimized[s] {
                continue;
            }
            let mut xi = st.camera_twist.to_array();
            cam_opt[s].step(&mut xi, &grads[s].camera)?;
            st.camera_twist = Twist::from_array(xi);
            if let (Some(opt), Some(f), Some(gf)) = (field_opt[s].as_mut(), st.field.as_mut(), grads[s].field.as_ref()) {
                opt.step(f.params_mut(), gf)?;
            }
        }
    }
    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        info!(
            "global: {} iterations, energy {:.3e} -> {:.3e}, {} pairs",
            out.trace.len(),
            first.total,
            last.total,
            last.pairs
        );
    }
    out.model = redeform(&problem, model, states, &cur)?;
    out.states = cur;
    Ok(out)
}

/// Model points re-deformed from `before` to `after`; normals follow the
/// change of each point's rotation.
fn redeform(problem: &GlobalProblem, model: &Model, before: &[FrameState], after: &[FrameState]) -> Result<Model> {
    let mut m = model.clone();
    let world = problem.world(after)?;
    let mut normals = problem.normals.clone();
    for (s, g) in problem.groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let pose0 = &problem.frames[s].camera.pose;
        let r0 = point_rotations(&before[s], pose0, &problem.points[s])?;
        let r1 = point_rotations(&after[s], pose0, &problem.points[s])?;
        for (k, &i) in g.iter().enumerate() {
            if normals[i].norm_squared() > 0.5 {
                normals[i] = r1[k] * (r0[k].transpose() * normals[i]);
            }
        }
    }
    m.cloud.positions = world;
    if m.cloud.normals.is_some() {
        m.cloud.normals = Some(normals);
    }
    Ok(m)
}
