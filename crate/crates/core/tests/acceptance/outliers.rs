use std::collections::HashSet;
use std::time::Instant;

use driftalign::config::Config;
use driftalign::icp::run_stage1;
use driftalign::pipeline::prepare_frames;
use driftalign::synth::{render, SceneSpec};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const OUTLIER_FRAMES: [usize; 2] = [3, 5];
const OUTLIER_FRACTION: f64 = 0.1;
const OUTLIER_OFFSET: f64 = 0.5;

/// Pushes a random tenth of the valid stride-grid pixels of two frames
/// 0.5 m deeper, then counts how many of them stage 1 merges. The
/// confidence filter is off so that only the merge gate decides.
pub fn criterion() -> Outcome {
    let start = Instant::now();
    let mut spec = SceneSpec::default();
    spec.trajectory.frames = 6;
    spec.trajectory.arc_deg = 50.0;
    spec.trajectory.start_deg = -25.0;
    let mut r = render(&spec).unwrap();
    let mut cfg = Config::default();
    cfg.filter.enabled = false;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut injected: Vec<HashSet<[u32; 2]>> = vec![HashSet::new(); spec.trajectory.frames];
    for &k in &OUTLIER_FRAMES {
        let d = &mut r.scene.frames[k].depth;
        let valid: Vec<[u32; 2]> = (0..d.height)
            .step_by(cfg.stride)
            .flat_map(|v| (0..d.width).step_by(cfg.stride).map(move |u| [u as u32, v as u32]))
            .filter(|&[u, v]| d.get(u as usize, v as usize) > 0.0)
            .collect();
        let n = (valid.len() as f64 * OUTLIER_FRACTION).round() as usize;
        for i in sample(&mut rng, valid.len(), n) {
            let [u, v] = valid[i];
            let z = d.get(u as usize, v as usize);
            d.set(u as usize, v as usize, z + OUTLIER_OFFSET as f32);
            injected[k].insert(valid[i]);
        }
    }
    let frames = prepare_frames(&r.scene, &cfg).unwrap();
    let s1 = run_stage1(&frames, &r.scene.correspondences, &cfg).unwrap();
    let (mut out_total, mut out_rejected, mut clean_total, mut clean_rejected) = (0usize, 0usize, 0usize, 0usize);
    for &k in &OUTLIER_FRAMES {
        let merge = s1.reports[k].merge.as_ref().expect("frame merged");
        assert!(!merge.bootstrap, "outlier frames must be gated");
        let px = frames[k].points.pixel_coords.as_ref().unwrap();
        for (i, p) in px.iter().enumerate() {
            let rejected = !merge.accepted[i];
            if injected[k].contains(p) {
                out_total += 1;
                out_rejected += rejected as usize;
            } else {
                clean_total += 1;
                clean_rejected += rejected as usize;
            }
        }
    }
    let out_rate = out_rejected as f64 / out_total.max(1) as f64;
    let clean_rate = clean_rejected as f64 / clean_total.max(1) as f64;
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        "6",
        "outlier gating",
        out_total > 0 && out_rate >= 0.9 && clean_rate <= 0.05,
        format!(
            "frames {OUTLIER_FRAMES:?}: rejected {out_rejected}/{out_total} outliers ({:.1}% >= 90%) and {clean_rejected}/{clean_total} clean points ({:.2}% <= 5%), sigma_d {} sigma_c {}",
            out_rate * 100.0,
            clean_rate * 100.0,
            cfg.icp.sigma_d,
            cfg.icp.sigma_c
        ) + &format!(", {secs:.0} s"),
    )
}
