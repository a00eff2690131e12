use driftalign::icp::{apply_forward, FrameData, FrameState, Model};
use driftalign::ingest::unproject_camera;
use driftalign::spatial::NeighborIndex;
use driftalign::synth::{render, Rendered, SceneSpec};

/// An 80×60 version of the default scene with `frames` views.
pub fn small_scene(frames: usize, warp: f64, noise: f64) -> Rendered {
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

pub fn frame_data(r: &Rendered, i: usize, stride: usize) -> FrameData {
    let f = &r.scene.frames[i];
    FrameData::new(f.frame_id, f.camera.clone(), unproject_camera(f, stride), stride, 16).unwrap()
}

/// Model made of one frame's own world points.
pub fn model_of(frame: &FrameData) -> Model {
    let state = FrameState::identity(frame.frame_id);
    let world = apply_forward(&frame.points, &frame.camera.pose, &state).unwrap();
    let mut m = Model::default();
    m.append(frame, &world.positions, world.normals.as_ref().unwrap(), &vec![true; frame.len()]);
    let index = NeighborIndex::build(&m.cloud.positions).unwrap();
    m.refresh_colors(&index, 0.06).unwrap();
    m
}
