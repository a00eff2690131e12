//! Criteria on the default synthetic scene: drift recovery, ablation
//! ordering, the inverse field and determinism.

use std::path::Path;

use driftalign::config::{Ablation, Config};
use driftalign::pipeline::{run_pipeline, PipelineRun};
use driftalign::synth::{generate, SceneSpec};

use crate::Outcome;

fn metric(run: &PipelineRun, stage: &str, name: &str) -> f64 {
    run.metrics.get(stage, name).unwrap_or(f64::NAN)
}

fn ablated(run_dir: &Path, scene: &Path, a: Ablation) -> PipelineRun {
    let mut cfg = Config::default();
    cfg.apply_ablation(a);
    // the inverse field does not touch the canonical cloud
    cfg.apply_ablation(Ablation::NoInv);
    run_pipeline(scene, &run_dir.join(a.name()), &cfg).unwrap()
}

pub fn criteria() -> Vec<Outcome> {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let spec = SceneSpec::default();
    generate(&spec, &scene).unwrap();
    let cfg = Config::default();
    let full = run_pipeline(&scene, &tmp.path().join("full"), &cfg).unwrap();
    let mut out = Vec::new();

    let unaligned = metric(&full, "unaligned", "thickness");
    let thick = metric(&full, "refine", "thickness");
    let chamfer = metric(&full, "refine", "chamfer");
    let deform = metric(&full, "refine", "deformation_error");
    let total = full.timing.total;
    let scene_desc = format!(
        "{} frames, {} primitives, warp {} m, noise {} m, {}x{} stride {}",
        spec.trajectory.frames,
        spec.primitives.len(),
        spec.warp.max_translation,
        spec.depth_noise,
        spec.trajectory.width,
        spec.trajectory.height_px,
        cfg.stride
    );
    out.push(Outcome::new(
        "4a",
        "drift recovery: chamfer",
        chamfer < 0.005 && total < 600.0,
        format!("{scene_desc}; median chamfer {:.3} mm < 5 mm, pipeline {total:.0} s < 600 s", chamfer * 1e3),
    ));
    let reduction = 1.0 - thick / unaligned;
    out.push(Outcome::new(
        "4b",
        "drift recovery: thickness",
        reduction >= 0.5,
        format!(
            "thickness {:.3} mm vs unaligned {:.3} mm, reduced {:.1}% >= 50%",
            thick * 1e3,
            unaligned * 1e3,
            reduction * 100.0
        ),
    ));
    out.push(Outcome::new(
        "4c",
        "drift recovery: deformation error",
        deform < 0.005,
        format!(
            "median deformation error {:.3} mm < 5 mm (after stage 1: {:.3} mm)",
            deform * 1e3,
            metric(&full, "align", "deformation_error") * 1e3
        ),
    ));

    // Zero global iterations leave the stage-1 states untouched, so the
    // no-global cloud is the full run's stage-1 cloud.
    let no_global = metric(&full, "align", "thickness");
    let only_rigid = metric(&ablated(tmp.path(), &scene, Ablation::OnlyRigid), "refine", "thickness");
    let no_corr = metric(&ablated(tmp.path(), &scene, Ablation::NoCorr), "refine", "thickness");
    let margin = 1.0 - thick / no_global.min(no_corr).min(only_rigid);
    let ordered = only_rigid > no_corr && no_corr >= no_global && no_global >= thick;
    out.push(Outcome::new(
        "5",
        "ablation ordering",
        ordered && margin >= 0.10,
        format!(
            "thickness only-rigid {:.3} > no-corr {:.3} >= no-global {:.3} >= full {:.3} mm: {}; full better by {:.1}% (needs >= 10%)",
            only_rigid * 1e3,
            no_corr * 1e3,
            no_global * 1e3,
            thick * 1e3,
            if ordered { "holds" } else { "violated" },
            margin * 100.0
        ),
    ));

    let inv = full.inverse.as_ref().expect("inverse field enabled");
    let rt = metric(&full, "invert", "roundtrip_median");
    let inv_secs = full.timing.stages.get("invert").copied().unwrap_or(f64::NAN);
    out.push(Outcome::new(
        "7",
        "inverse field",
        rt < 0.002 && inv.report.iterations == 2000 && inv_secs < 180.0,
        format!(
            "held-out roundtrip median {:.3} mm < 2 mm over {} points, {} steps, {inv_secs:.0} s < 180 s",
            rt * 1e3,
            inv.roundtrip.len(),
            inv.report.iterations
        ),
    ));

    let again = run_pipeline(&scene, &tmp.path().join("again"), &cfg).unwrap();
    let a = std::fs::read(tmp.path().join("full/metrics.json")).unwrap();
    let b = std::fs::read(tmp.path().join("again/metrics.json")).unwrap();
    out.push(Outcome::new(
        "10",
        "determinism",
        a == b && again.metrics == full.metrics,
        format!("two runs with seed {}: metrics.json {} ({} bytes)", cfg.seed, if a == b { "identical" } else { "differs" }, a.len()),
    ));
    out
}
