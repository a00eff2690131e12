use std::time::Instant;

use driftalign::config::Config;
use driftalign::icp::{align_frame, FrameState};
use nalgebra::Vector3;

use crate::scenes::{frame_data, model_of, small_scene};
use crate::Outcome;

/// Fields frozen, no color, correspondence or TV term: the frame is the
/// model's own points under a 2 cm camera offset.
pub fn criterion() -> Outcome {
    let start = Instant::now();
    let r = small_scene(2, 0.0, 0.0);
    let target = frame_data(&r, 0, 1);
    let model = model_of(&target);
    let mut src = target.clone();
    let truth = src.camera.pose.clone();
    let offset = Vector3::new(2.0, -1.0, 2.0) * (0.02 / 3.0);
    src.camera.pose.translation += offset;
    let mut cfg = Config::default();
    cfg.icp.rigid_only = true;
    cfg.icp.lambda_color = 0.0;
    cfg.icp.lambda_corr = 0.0;
    cfg.icp.lambda_tv = 0.0;
    let (st, rep) =
        align_frame(&model.surface(), &src, &[], FrameState::identity(1), &cfg.icp, &cfg.field, 0).unwrap();
    let got = st.pose(&src.camera.pose);
    let err = src
        .positions()
        .iter()
        .map(|p| (got.apply(p) - truth.apply(p)).norm())
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        "3",
        "rigid equivalence",
        err < 1e-3 && rep.iterations <= 200 && secs < 10.0,
        format!(
            "offset {:.4} m, max point error {err:.2e} m < 1e-3, {} iterations <= 200, {secs:.1} s < 10 s",
            offset.norm(),
            rep.iterations
        ),
    )
}
