use std::collections::HashSet;

use driftalign::config::Config;
use driftalign::ingest::voxel_confidence_keep;
use driftalign::pipeline::unprojected_union;
use driftalign::synth::{render, SceneSpec};

use crate::Outcome;

/// Each step's survivors must be a subset of the previous step's.
fn nested(keeps: &[Vec<usize>]) -> bool {
    keeps.windows(2).all(|w| {
        let prev: HashSet<usize> = w[0].iter().copied().collect();
        w[1].iter().all(|i| prev.contains(i))
    })
}

pub fn criterion() -> Outcome {
    let r = render(&SceneSpec::default()).unwrap();
    let cfg = Config::default();
    let union = unprojected_union(&r.scene, cfg.stride);
    let s = cfg.filter.s_vox;
    let steps: Vec<f64> = (0..20).map(|k| k as f64 * 5.0).collect();
    let by_loc: Vec<Vec<usize>> = steps.iter().map(|&t| voxel_confidence_keep(&union, s, t, cfg.filter.theta_cnt)).collect();
    let by_cnt: Vec<Vec<usize>> = steps.iter().map(|&t| voxel_confidence_keep(&union, s, cfg.filter.theta_loc, t)).collect();
    let identity = voxel_confidence_keep(&union, s, 0.0, 0.0) == (0..union.len()).collect::<Vec<_>>();
    let (mono_loc, mono_cnt) = (nested(&by_loc), nested(&by_cnt));
    let strict = by_loc.first().map(Vec::len) > by_loc.last().map(Vec::len);
    Outcome::new(
        "9",
        "filter properties",
        mono_loc && mono_cnt && identity && strict,
        format!(
            "{} points; theta_loc sweep 0..95 nested: {mono_loc} ({} -> {} kept); theta_cnt sweep nested: {mono_cnt} ({} -> {}); theta = 0 keeps all: {identity}",
            union.len(),
            by_loc[0].len(),
            by_loc[19].len(),
            by_cnt[0].len(),
            by_cnt[19].len()
        ),
    )
}
