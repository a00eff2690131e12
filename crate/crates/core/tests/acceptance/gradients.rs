use std::time::Instant;

use driftalign::field::{DeformationField, FieldSpec};
use driftalign::global::{anchor_loss, cross_frame_pairs, FrameGrad, GlobalProblem, GlobalSnapshot};
use driftalign::icp::{
    associate, deform, loss_color, loss_corr, loss_data, point_rotations, CorrTerm, EnergyContext, FrameData,
    FrameState, LossTerm, Model, Weights,
};
use driftalign::inverse::{effective_poses, inverse_loss, InverseField, TrainingPair};
use driftalign::lie::Twist;
use driftalign::spatial::NeighborIndex;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenes::{frame_data, model_of, small_scene};
use crate::Outcome;

type V3 = Vector3<f64>;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Largest relative error between analytic and central-difference
/// derivatives over the checked coordinates.
#[derive(Default)]
struct Tally {
    worst: f64,
    checks: usize,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        self.worst = self.worst.max(rel);
        self.checks += 1;
    }
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(H) - f(-H)) / (2.0 * H)
}

/// Ten largest gradient entries plus ten random ones within three orders
/// of magnitude of the largest. Smaller entries sit below the resolution
/// of central differences on the full energy.
fn picks(g: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let top = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut order: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= 1e-3 * top && g[i] != 0.0).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
    let mut out: Vec<usize> = order.iter().take(10).copied().collect();
    for _ in 0..10 {
        out.push(order[rng.random_range(0..order.len())]);
    }
    out
}

fn subsample(full: &FrameData, n: usize) -> FrameData {
    let idx: Vec<usize> = (0..full.len()).step_by(full.len() / n).take(n).collect();
    FrameData::new(full.frame_id, full.camera.clone(), full.points.select(&idx), full.stride, 16).unwrap()
}

fn random_state(frame: &FrameData, cell: f64, rng: &mut ChaCha8Rng) -> FrameState {
    let spec = FieldSpec::bounding(frame.positions(), cell, cell, 12).unwrap();
    let mut field = DeformationField::new(spec, rng.random()).unwrap();
    for x in field.params_mut() {
        *x += rng.random_range(-0.05..0.05);
    }
    FrameState {
        frame_id: frame.frame_id,
        camera_twist: Twist::from_array(std::array::from_fn(|_| rng.random_range(-0.01..0.01))),
        field: Some(field),
        unalignable: false,
    }
}

/// Gradient of a per-point loss with respect to every world coordinate.
fn point_term(points: &[V3], term: &LossTerm, f: impl Fn(&[V3]) -> f64, t: &mut Tally) {
    for i in 0..points.len() {
        for a in 0..3 {
            let n = central(|h| {
                let mut p = points.to_vec();
                p[i][a] += h;
                f(&p)
            });
            t.add(term.grad[i][a], n);
        }
    }
}

fn frame_terms(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tally)> {
    let r = small_scene(2, 0.02, 0.002);
    let frame = subsample(&frame_data(&r, 1, 2), 100);
    let model = model_of(&frame_data(&r, 0, 2));
    let surface = model.surface();
    let state = random_state(&frame, 0.02, rng);
    let world = deform(&state, &frame.camera.pose, frame.positions(), false).unwrap().world;
    let index = NeighborIndex::build(&model.cloud.positions).unwrap();
    let all: Vec<usize> = (0..frame.len()).collect();
    let assoc = associate(&world, &all, &index, None, &surface, 0.1);
    assert!(assoc.iter().flatten().count() >= 50, "too few associations");
    let corr: Vec<CorrTerm> = (0..20)
        .map(|k| CorrTerm {
            corners: std::array::from_fn(|c| (rng.random_range(0..frame.len()), [0.4, 0.3, 0.2, 0.1][c])),
            target: model.cloud.positions[k * 37],
            w: rng.random_range(0.2..1.0),
        })
        .collect();
    let mut out = Vec::new();

    let mut t = Tally::default();
    point_term(&world, &loss_data(&world, &assoc, &surface), |p| loss_data(p, &assoc, &surface).value, &mut t);
    out.push(("data", t));

    let mut t = Tally::default();
    let color = loss_color(&world, &frame.intensities, &assoc, &surface);
    point_term(&world, &color, |p| loss_color(p, &frame.intensities, &assoc, &surface).value, &mut t);
    out.push(("color", t));

    let mut t = Tally::default();
    point_term(&world, &loss_corr(&world, &corr), |p| loss_corr(p, &corr).value, &mut t);
    out.push(("correspondence", t));

    let field = state.field.as_ref().unwrap();
    let tv_pts: Vec<V3> = frame.positions().to_vec();
    let mut g = field.zero_grad();
    field.tv_loss(&tv_pts, None, 0.02, Some((&mut g, 1.0))).unwrap();
    let mut t = Tally::default();
    for p in picks(&g, rng) {
        let n = central(|h| {
            let mut f = field.clone();
            f.params_mut()[p] += h;
            f.tv_loss(&tv_pts, None, 0.02, None).unwrap()
        });
        t.add(g[p], n);
    }
    out.push(("total variation", t));

    let ctx = EnergyContext {
        points: frame.positions(),
        intensities: &frame.intensities,
        pose0: &frame.camera.pose,
        surface,
        corr: &corr,
        weights: Weights {
            color: 0.5,
            corr: 1.0,
            tv: 10.0,
        },
        tv_points: &tv_pts,
        s_vox: 0.02,
    };
    let mut g_cam = [0.0; 6];
    let mut g_field = field.zero_grad();
    ctx.energy(&state, &assoc, Some((&mut g_cam, Some(&mut g_field)))).unwrap();
    let e = |s: &FrameState| ctx.energy(s, &assoc, None).unwrap().total;
    let mut t = Tally::default();
    for k in 0..6 {
        let n = central(|h| {
            let mut s = state.clone();
            let mut a = s.camera_twist.to_array();
            a[k] += h;
            s.camera_twist = Twist::from_array(a);
            e(&s)
        });
        t.add(g_cam[k], n);
    }
    for p in picks(&g_field, rng) {
        let n = central(|h| {
            let mut s = state.clone();
            s.field.as_mut().unwrap().params_mut()[p] += h;
            e(&s)
        });
        t.add(g_field[p], n);
    }
    out.push(("frame energy", t));
    out
}

fn global_model(frames: &[FrameData], states: &[FrameState]) -> Model {
    let mut m = Model::default();
    for (f, s) in frames.iter().zip(states) {
        let d = deform(s, &f.camera.pose, f.positions(), false).unwrap();
        let r = point_rotations(s, &f.camera.pose, f.positions()).unwrap();
        let normals: Vec<V3> = f.normals().iter().zip(&r).map(|(n, r)| r * n).collect();
        m.append(f, &d.world, &normals, &vec![true; f.len()]);
    }
    let index = NeighborIndex::build(&m.cloud.positions).unwrap();
    m.refresh_colors(&index, 0.3).unwrap();
    m
}

fn global_terms(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tally)> {
    let r = small_scene(3, 0.02, 0.002);
    let frames: Vec<FrameData> = (0..3).map(|i| subsample(&frame_data(&r, i, 2), 34)).collect();
    let mut states: Vec<FrameState> = frames.iter().map(|f| random_state(f, 0.05, rng)).collect();
    states[0] = FrameState::identity(frames[0].frame_id);
    let model = global_model(&frames, &states);
    let p = GlobalProblem::new(&frames, &model).unwrap();
    let snap = GlobalSnapshot::take(&states, &p.points, 20, 9).unwrap();
    let mut cur = states.clone();
    for s in cur.iter_mut().skip(1) {
        let mut a = s.camera_twist.to_array();
        a.iter_mut().for_each(|x| *x += rng.random_range(-0.003..0.003));
        s.camera_twist = Twist::from_array(a);
        for x in s.field.as_mut().unwrap().params_mut() {
            *x += rng.random_range(-0.01..0.01);
        }
    }
    let world = p.world(&cur).unwrap();
    let pairs = cross_frame_pairs(&world, &p.frame_of, &p.surface(&world), 5, 0.5).unwrap();
    assert!(!pairs.is_empty(), "no cross-frame pairs");
    let optimized = p.optimized(&cur);
    let mut out = Vec::new();

    let state_checks = |f: &dyn Fn(&[FrameState]) -> f64, g: &[FrameGrad], rng: &mut ChaCha8Rng| {
        let mut t = Tally::default();
        for s in 1..cur.len() {
            for k in 0..6 {
                let n = central(|h| {
                    let mut st = cur.clone();
                    let mut a = st[s].camera_twist.to_array();
                    a[k] += h;
                    st[s].camera_twist = Twist::from_array(a);
                    f(&st)
                });
                t.add(g[s].camera[k], n);
            }
            let gf = g[s].field.as_ref().unwrap();
            for q in picks(gf, rng) {
                let n = central(|h| {
                    let mut st = cur.clone();
                    st[s].field.as_mut().unwrap().params_mut()[q] += h;
                    f(&st)
                });
                t.add(gf[q], n);
            }
        }
        t
    };

    let mut g: Vec<FrameGrad> = cur.iter().map(FrameGrad::zero).collect();
    anchor_loss(&cur, &snap, &optimized, Some((&mut g, 1.0))).unwrap();
    let f = |st: &[FrameState]| anchor_loss(st, &snap, &optimized, None).unwrap();
    out.push(("anchor", state_checks(&f, &g, rng)));

    let mut g: Vec<FrameGrad> = cur.iter().map(FrameGrad::zero).collect();
    let e0 = p.energy(&cur, &snap, &pairs, 0.7, 3.0, Some(&mut g)).unwrap();
    assert!(e0.data > 0.0 && e0.color > 0.0 && e0.anchor > 0.0);
    let f = |st: &[FrameState]| p.energy(st, &snap, &pairs, 0.7, 3.0, None).unwrap().total;
    out.push(("global energy", state_checks(&f, &g, rng)));
    out
}

fn inverse_term(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tally)> {
    let r = small_scene(2, 0.02, 0.002);
    let frames: Vec<FrameData> = (0..2).map(|i| subsample(&frame_data(&r, i, 2), 50)).collect();
    let states: Vec<FrameState> = frames.iter().map(|f| random_state(f, 0.05, rng)).collect();
    let poses = effective_poses(&frames, &states);
    let mut pairs = Vec::new();
    for (s, (f, st)) in frames.iter().zip(&states).enumerate() {
        let w = deform(st, &f.camera.pose, f.positions(), false).unwrap().world;
        for (i, p0) in w.into_iter().enumerate() {
            pairs.push(TrainingPair {
                view: s as u32,
                index: i,
                p_cam: f.positions()[i],
                p0,
            });
        }
    }
    let local: Vec<V3> = pairs.iter().map(|p| poses[p.view as usize].rotation.transpose() * (p.p0 - poses[p.view as usize].translation)).collect();
    let spec = FieldSpec::bounding(&local, 0.05, 0.05, 12).unwrap().with_views(2, 8);
    let mut field = DeformationField::new(spec, 5).unwrap();
    for x in field.params_mut() {
        *x += rng.random_range(-0.05..0.05);
    }
    let inv = InverseField { field, poses };
    let mut g = inv.field.zero_grad();
    inverse_loss(&inv, &pairs, Some(&mut g)).unwrap();
    let mut t = Tally::default();
    for p in picks(&g, rng) {
        let n = central(|h| {
            let mut i2 = inv.clone();
            i2.field.params_mut()[p] += h;
            inverse_loss(&i2, &pairs, None).unwrap()
        });
        t.add(g[p], n);
    }
    let views: Vec<u32> = pairs.iter().map(|p| p.view).collect();
    let mut gtv = inv.field.zero_grad();
    inv.field.tv_loss(&local, Some(&views), 0.02, Some((&mut gtv, 1.0))).unwrap();
    let mut ttv = Tally::default();
    for p in picks(&gtv, rng) {
        let n = central(|h| {
            let mut f = inv.field.clone();
            f.params_mut()[p] += h;
            f.tv_loss(&local, Some(&views), 0.02, None).unwrap()
        });
        ttv.add(gtv[p], n);
    }
    vec![("inverse", t), ("view total variation", ttv)]
}

pub fn criterion() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut terms = frame_terms(&mut rng);
    terms.extend(global_terms(&mut rng));
    terms.extend(inverse_term(&mut rng));
    let secs = start.elapsed().as_secs_f64();
    let worst = terms.iter().map(|t| t.1.worst).fold(0.0, f64::max);
    let all_checked = terms.iter().all(|t| t.1.checks > 0);
    let detail = terms
        .iter()
        .map(|(n, t)| format!("{n} {:.1e} ({})", t.worst, t.checks))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(
        "2",
        "finite-difference gradients",
        worst < TOL && all_checked && secs < 30.0,
        format!("max relative error {worst:.2e} < 1e-4 [{detail}], {secs:.1} s < 30 s"),
    )
}
