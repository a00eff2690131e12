use super::*;
use crate::config::Config;
use crate::field::FieldSpec;
use crate::ingest::unproject_camera;
use crate::spatial::estimate_color_gradients;
use crate::synth::{render, Rendered, SceneSpec};
use rand::Rng;

fn small_scene(frames: usize, warp: f64, noise: f64) -> Rendered {
    let mut s = SceneSpec::default();
    s.trajectory.frames = frames;
    s.trajectory.arc_deg = 30.0;
    s.trajectory.start_deg = -15.0;
    s.trajectory.width = 80;
    s.trajectory.height_px = 60;
    s.trajectory.fx = 70.0;
    s.trajectory.fy = 70.0;
    s.trajectory.cx = 39.5;
    s.trajectory.cy = 29.5;
    s.warp.max_translation = warp;
    s.depth_noise = noise;
    render(&s).unwrap()
}

fn frame_data(r: &Rendered, i: usize, stride: usize) -> FrameData {
    let f = &r.scene.frames[i];
    FrameData::new(f.frame_id, f.camera.clone(), unproject_camera(f, stride), stride, 16).unwrap()
}

/// Model built from a frame's own world points.
fn model_of(frame: &FrameData) -> Model {
    let state = FrameState::identity(frame.frame_id);
    let world = apply_forward(&frame.points, &frame.camera.pose, &state).unwrap();
    let mut m = Model::default();
    m.append(frame, &world.positions, world.normals.as_ref().unwrap(), &vec![true; frame.len()]);
    let index = NeighborIndex::build(&m.cloud.positions).unwrap();
    m.refresh_colors(&index, 0.06).unwrap();
    m
}

#[test]
fn pixel_lookup_and_bilinear() {
    let r = small_scene(2, 0.0, 0.0);
    let f = frame_data(&r, 0, 2);
    let px = f.points.pixel_coords.as_ref().unwrap();
    for (i, [u, v]) in px.iter().enumerate().step_by(37) {
        assert_eq!(f.pixel(*u, *v), Some(i));
        assert_eq!(f.bilinear(*u as f64, *v as f64).unwrap()[0], (i, 1.0));
    }
    assert_eq!(f.pixel(1, 0), None);
    let c = f.bilinear(41.0, 31.0).unwrap();
    assert!(c.iter().all(|x| (x.1 - 0.25).abs() < 1e-15));
    assert!(f.bilinear(-3.0, 5.0).is_none());
}

#[test]
fn identity_state_is_plain_unprojection() {
    let r = small_scene(2, 0.0, 0.0);
    let f = frame_data(&r, 1, 2);
    let out = apply_forward(&f.points, &f.camera.pose, &FrameState::identity(1)).unwrap();
    let plain = crate::ingest::unproject(&r.scene.frames[1], 2);
    assert_eq!(out.positions, plain.positions);
    // zeroed field: the exact same identity
    let spec = FieldSpec::bounding(f.positions(), 0.02, 0.02, 10).unwrap();
    let mut st = FrameState::identity(1);
    st.field = Some(DeformationField::new(spec, 4).unwrap());
    let out2 = apply_forward(&f.points, &f.camera.pose, &st).unwrap();
    assert_eq!(out2.positions, plain.positions);
}

#[test]
fn constant_translation_field_shifts_by_rotated_offset() {
    let r = small_scene(2, 0.0, 0.0);
    let f = frame_data(&r, 1, 2);
    let spec = FieldSpec::bounding(f.positions(), 0.02, 0.02, 10).unwrap();
    let xi = Twist::new(V3::zeros(), V3::new(0.05, 0.0, 0.0));
    let mut st = FrameState::identity(1);
    st.field = Some(DeformationField::constant(spec, &xi).unwrap());
    let out = apply_forward(&f.points, &f.camera.pose, &st).unwrap();
    let shift = f.camera.pose.rotation * V3::new(0.05, 0.0, 0.0);
    for (p, q) in out.positions.iter().zip(&f.points.positions) {
        assert!((p - (f.camera.pose.apply(q) + shift)).norm() < 1e-12);
    }
}

/// Central differences of the full frame energy against the analytic
/// gradient, over the camera twist and the field parameters.
#[test]
fn energy_gradient_matches_finite_differences() {
    let r = small_scene(2, 0.02, 0.002);
    let full = frame_data(&r, 1, 2);
    let idx: Vec<usize> = (0..full.len()).step_by(full.len() / 100).take(100).collect();
    let cam = full.points.select(&idx);
    let frame = FrameData::new(1, full.camera.clone(), cam, 2, 16).unwrap();
    let model = model_of(&frame_data(&r, 0, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = FieldSpec::bounding(frame.positions(), 0.02, 0.02, 12).unwrap();
    let mut field = DeformationField::new(spec, 3).unwrap();
    for x in field.params_mut() {
        *x += rng.random_range(-0.05..0.05);
    }
    let state = FrameState {
        frame_id: 1,
        camera_twist: Twist::from_array(std::array::from_fn(|_| rng.random_range(-0.01..0.01))),
        field: Some(field),
        unalignable: false,
    };
    let corr: Vec<CorrTerm> = (0..10)
        .map(|k| CorrTerm {
            corners: std::array::from_fn(|c| (rng.random_range(0..frame.len()), [0.4, 0.3, 0.2, 0.1][c])),
            target: model.cloud.positions[k * 31],
            w: rng.random_range(0.2..1.0),
        })
        .collect();
    let tv_points: Vec<V3> = frame.positions().iter().step_by(5).copied().collect();
    let surface = model.surface();
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
        tv_points: &tv_points,
        s_vox: 0.02,
    };
    let d = deform(&state, &frame.camera.pose, frame.positions(), false).unwrap();
    let index = NeighborIndex::build(&model.cloud.positions).unwrap();
    let all: Vec<usize> = (0..frame.len()).collect();
    let assoc = associate(&d.world, &all, &index, None, &surface, 0.1);
    assert!(assoc.iter().flatten().count() > 50);
    let mut g_cam = [0.0; 6];
    let mut g_field = state.field.as_ref().unwrap().zero_grad();
    let e0 = ctx.energy(&state, &assoc, Some((&mut g_cam, Some(&mut g_field)))).unwrap();
    assert!(e0.data > 0.0 && e0.color > 0.0 && e0.corr > 0.0 && e0.tv > 0.0);
    let h = 1e-6;
    let check = |a: f64, n: f64, what: &str| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        assert!(rel < 1e-4, "{what}: analytic {a} numeric {n}");
    };
    for k in 0..6 {
        let mut plus = state.clone();
        let mut minus = state.clone();
        let mut a = state.camera_twist.to_array();
        a[k] += h;
        plus.camera_twist = Twist::from_array(a);
        a[k] -= 2.0 * h;
        minus.camera_twist = Twist::from_array(a);
        let n = (ctx.energy(&plus, &assoc, None).unwrap().total - ctx.energy(&minus, &assoc, None).unwrap().total)
            / (2.0 * h);
        check(g_cam[k], n, &format!("camera[{k}]"));
    }
    let mut order: Vec<usize> = (0..g_field.len()).collect();
    order.sort_by(|&a, &b| g_field[b].abs().total_cmp(&g_field[a].abs()));
    let picks: Vec<usize> = order[..10].iter().copied().chain((0..10).map(|_| order[rng.random_range(0..2000)])).collect();
    for p in picks {
        let mut plus = state.clone();
        let mut minus = state.clone();
        plus.field.as_mut().unwrap().params_mut()[p] += h;
        minus.field.as_mut().unwrap().params_mut()[p] -= h;
        let n = (ctx.energy(&plus, &assoc, None).unwrap().total - ctx.energy(&minus, &assoc, None).unwrap().total)
            / (2.0 * h);
        check(g_field[p], n, &format!("field[{p}]"));
    }
}

fn quick_icp() -> Config {
    let mut c = Config::default();
    c.icp.iters = vec![30, 40];
    c.icp.tv_samples = 256;
    c
}

#[test]
fn frame_identical_to_model_stays_at_identity() {
    let r = small_scene(2, 0.0, 0.0);
    let f = frame_data(&r, 0, 2);
    let model = model_of(&f);
    let cfg = quick_icp();
    let (st, rep) = align_frame(&model.surface(), &f, &[], FrameState::identity(0), &cfg.icp, &cfg.field, 1).unwrap();
    assert!(!rep.unalignable);
    assert!(st.camera_twist.norm_squared().sqrt() < 1e-4, "{:?}", st.camera_twist);
    let moved = apply_forward(&f.points, &f.camera.pose, &st).unwrap();
    let max = moved.positions.iter().zip(&model.cloud.positions).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    assert!(max < 1e-3, "{max}");
}

/// Classic point-to-plane ICP: no field, no color, no correspondences, no
/// TV, the model's own points under a 2 cm pose error.
#[test]
fn rigid_offset_is_recovered() {
    let r = small_scene(2, 0.0, 0.0);
    let target = frame_data(&r, 0, 1);
    let model = model_of(&target);
    let mut src = target.clone();
    let truth = src.camera.pose.clone();
    let offset = V3::new(0.012, -0.01, 0.012);
    assert!((offset.norm() - 0.02).abs() < 1e-3);
    src.camera.pose.translation += offset;
    let mut cfg = Config::default();
    cfg.icp.rigid_only = true;
    cfg.icp.lambda_color = 0.0;
    cfg.icp.lambda_corr = 0.0;
    cfg.icp.lambda_tv = 0.0;
    let (st, rep) = align_frame(&model.surface(), &src, &[], FrameState::identity(1), &cfg.icp, &cfg.field, 0).unwrap();
    assert!(rep.iterations <= 200);
    let got = st.pose(&src.camera.pose);
    let err = src
        .positions()
        .iter()
        .map(|p| (got.apply(p) - truth.apply(p)).norm())
        .fold(0.0, f64::max);
    assert!(err < 1e-3, "max point error {err}");
}

#[test]
fn far_frame_is_unalignable() {
    let r = small_scene(2, 0.0, 0.0);
    let model = model_of(&frame_data(&r, 0, 2));
    let mut src = frame_data(&r, 1, 2);
    src.camera.pose.translation += V3::new(0.0, 0.0, 3.0);
    let cfg = quick_icp();
    let (st, rep) = align_frame(&model.surface(), &src, &[], FrameState::identity(1), &cfg.icp, &cfg.field, 0).unwrap();
    assert!(st.unalignable && rep.unalignable);
    assert_eq!(rep.iterations, cfg.icp.unalignable_after + 1);
}

#[test]
fn color_gradients_feed_the_model() {
    let r = small_scene(2, 0.0, 0.0);
    let m = model_of(&frame_data(&r, 0, 2));
    let index = NeighborIndex::build(&m.cloud.positions).unwrap();
    let cg = estimate_color_gradients(&m.cloud, &index, 0.06).unwrap();
    assert_eq!(cg.gradients, m.gradients);
    assert!(m.gradients.iter().any(|g| g.norm() > 0.1));
}

#[test]
fn stage1_is_append_only_and_keeps_frame_zero() {
    let r = small_scene(3, 0.02, 0.001);
    let frames: Vec<FrameData> = (0..3).map(|i| frame_data(&r, i, 2)).collect();
    let cfg = quick_icp();
    let s1 = run_stage1(&frames, &r.scene.correspondences, &cfg).unwrap();
    assert_eq!(s1.states.len(), 3);
    assert_eq!(s1.states[0].camera_twist, Twist::ZERO);
    assert!(s1.states[0].field.is_none());
    let n0 = frames[0].len();
    let w0 = apply_forward(&frames[0].points, &frames[0].camera.pose, &s1.states[0]).unwrap();
    assert_eq!(&s1.model.cloud.positions[..n0], &w0.positions[..]);
    assert!(s1.model.len() > n0);
    assert_eq!(s1.model.local.len(), s1.model.len());
    assert!(s1.reports[1].correspondences > 0);
    assert_eq!(s1.stats.history_d.len(), 2);
}
