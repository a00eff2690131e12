//! Stage orchestration: ingest and filter, sequential alignment, global
//! refinement, inverse field and export, plus checkpoints and metrics.

pub mod checkpoint;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::export::{export_splats, SplatSet};
use crate::field::DeformationField;
use crate::global::run_global;
use crate::icp::{run_stage1, FrameData, FrameState, MergeStats, Model};
use crate::ingest::{load_scene, unproject, unproject_camera, voxel_confidence_keep, Scene};
use crate::inverse::{
    effective_poses, roundtrip_errors, sample_pairs_from, split_holdout, train_inverse, InverseField, InverseReport,
    TrainingPairSet,
};
use crate::lie::RigidTransform;
use crate::synth::GroundTruth;

pub use checkpoint::{load_checkpoint, require_stage, save_checkpoint, Checkpoint, Stage};
pub use report::{cloud_metrics, deformation_error, gt_warp_magnitude, MetricsReport, StageMetrics, TimingReport};

/// World-space union of every frame's unprojection, frame by frame.
pub fn unprojected_union(scene: &Scene, stride: usize) -> PointCloud {
    let parts: Vec<PointCloud> = scene.frames.par_iter().map(|f| unproject(f, stride)).collect();
    PointCloud::concat(&parts)
}

/// Indices into [`unprojected_union`] that survive the confidence filter.
pub fn filter_keep(union: &PointCloud, cfg: &Config) -> Vec<usize> {
    let f = &cfg.filter;
    if !f.enabled {
        return (0..union.len()).collect();
    }
    if !f.per_frame {
        return voxel_confidence_keep(union, f.s_vox, f.theta_loc, f.theta_cnt);
    }
    let mut frames = union.frame_ids.clone();
    frames.dedup();
    let mut keep = Vec::new();
    for id in frames {
        let idx = union.indices_of_frame(id);
        let sub = union.select(&idx);
        keep.extend(voxel_confidence_keep(&sub, f.s_vox, f.theta_loc, f.theta_cnt).into_iter().map(|k| idx[k]));
    }
    keep.sort_unstable();
    keep
}

/// Filtered world-space cloud of a scene.
pub fn filtered_cloud(scene: &Scene, cfg: &Config) -> PointCloud {
    let union = unprojected_union(scene, cfg.stride);
    union.select(&filter_keep(&union, cfg))
}

/// Per-frame camera-space data restricted to the filtered points.
pub fn prepare_frames(scene: &Scene, cfg: &Config) -> Result<Vec<FrameData>> {
    let union = unprojected_union(scene, cfg.stride);
    let keep = filter_keep(&union, cfg);
    let mut offset = 0usize;
    let mut cursor = 0usize;
    let mut selections = Vec::with_capacity(scene.frames.len());
    for f in &scene.frames {
        let n = union.frame_ids[offset..].iter().take_while(|&&id| id == f.frame_id).count();
        let start = cursor;
        while cursor < keep.len() && keep[cursor] < offset + n {
            cursor += 1;
        }
        selections.push(keep[start..cursor].iter().map(|&k| k - offset).collect::<Vec<_>>());
        offset += n;
    }
    scene
        .frames
        .par_iter()
        .zip(selections)
        .map(|(f, sel)| {
            let cam = unproject_camera(f, cfg.stride).select(&sel);
            FrameData::new(f.frame_id, f.camera.clone(), cam, cfg.stride, cfg.icp.normal_k)
        })
        .collect()
}

/// Ground truth next to a synthetic scene, if there is any.
pub fn scene_ground_truth(scene_dir: &Path) -> Result<Option<GroundTruth>> {
    if scene_dir.join("gt").join("spec.json").exists() {
        GroundTruth::load(scene_dir).map(Some)
    } else {
        Ok(None)
    }
}

/// Loads a scene and prepares its frames.
pub fn load_frames(scene_dir: &Path, cfg: &Config) -> Result<(Scene, Vec<FrameData>)> {
    let scene = load_scene(scene_dir)?;
    let frames = prepare_frames(&scene, cfg)?;
    Ok((scene, frames))
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Stage 1 on a scene directory.
pub fn align(scene_dir: &Path, cfg: &Config) -> Result<(Vec<FrameData>, Checkpoint)> {
    cfg.validate()?;
    let (scene, frames) = load_frames(scene_dir, cfg)?;
    let s1 = run_stage1(&frames, &scene.correspondences, cfg)?;
    let ck = Checkpoint {
        stage: Stage::Align,
        scene_dir: absolute(scene_dir),
        config: cfg.clone(),
        states: s1.states,
        model: s1.model,
        stats: s1.stats,
    };
    Ok((frames, ck))
}

/// Summary of a global run, for reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub iterations: usize,
    pub halted: bool,
    pub energy_first: Option<f64>,
    pub energy_last: Option<f64>,
}

/// Global refinement of an aligned checkpoint.
pub fn refine(frames: &[FrameData], ck: &Checkpoint) -> Result<(Checkpoint, RefineSummary)> {
    let g = run_global(frames, &ck.states, &ck.model, &ck.config)?;
    let summary = RefineSummary {
        iterations: g.trace.len(),
        halted: g.halted,
        energy_first: g.trace.first().map(|p| p.total),
        energy_last: g.trace.last().map(|p| p.total),
    };
    let out = Checkpoint {
        stage: Stage::Refine,
        scene_dir: ck.scene_dir.clone(),
        config: ck.config.clone(),
        states: g.states,
        model: g.model,
        stats: ck.stats.clone(),
    };
    Ok((out, summary))
}

/// Inverse field together with what it was trained on.
#[derive(Clone, Debug)]
pub struct InverseOutcome {
    pub field: InverseField,
    pub report: InverseReport,
    pub pairs: TrainingPairSet,
    /// Held-out roundtrip errors `‖F⁻¹(F(p)) - p‖`.
    pub roundtrip: Vec<f64>,
}

/// Sidecar of a saved inverse field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseSidecar {
    pub poses: Vec<RigidTransform>,
    pub report: InverseReport,
}

impl InverseOutcome {
    /// Writes the field blob to `path` and poses plus report to
    /// `path` with a `.json` extension appended.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.field.field.save(path)?;
        let side = InverseSidecar {
            poses: self.field.poses.clone(),
            report: self.report.clone(),
        };
        let p = sidecar_path(path);
        std::fs::write(&p, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn load_inverse(path: &Path) -> Result<(InverseField, InverseReport)> {
    let field = DeformationField::load(path)?;
    let p = sidecar_path(path);
    let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let side: InverseSidecar = serde_json::from_str(&s)?;
    Ok((
        InverseField {
            field,
            poses: side.poses,
        },
        side.report,
    ))
}

/// Trains the backward field on refined states, holding out
/// `inverse.holdout` points per frame for the roundtrip check.
pub fn invert(frames: &[FrameData], states: &[FrameState], cfg: &Config) -> Result<InverseOutcome> {
    let inv = &cfg.inverse;
    let (held, rest) = split_holdout(frames, inv.holdout, cfg.seed ^ 0x5A11_0003);
    let pairs = sample_pairs_from(frames, states, &rest, inv.m_per_frame, cfg.seed ^ 0x5A11_0001)?;
    let (field, report) = train_inverse(
        &pairs,
        effective_poses(frames, states),
        inv,
        &cfg.field,
        cfg.fine_s_vox(),
        cfg.seed ^ 0x5A11_0002,
    )?;
    let roundtrip = roundtrip_errors(&field, frames, states, &held)?;
    Ok(InverseOutcome {
        field,
        report,
        pairs,
        roundtrip,
    })
}

/// Splats from a canonical model.
pub fn export(model: &Model, cfg: &Config) -> Result<SplatSet> {
    let e = &cfg.export;
    export_splats(&model.cloud, e.target_count, e.k, e.opacity, cfg.seed ^ 0x5A11_0004)
}

pub fn stage_metrics(
    frames: &[FrameData],
    states: &[FrameState],
    model: &Model,
    gt: Option<&GroundTruth>,
) -> Result<StageMetrics> {
    let mut m = cloud_metrics(&model.cloud.positions, gt)?;
    if let Some(gt) = gt {
        m.insert("deformation_error".into(), deformation_error(frames, states, gt)?);
    }
    let total: usize = frames.iter().map(FrameData::len).sum();
    m.insert("merged_fraction".into(), model.len() as f64 / total.max(1) as f64);
    m.insert("unalignable_frames".into(), states.iter().filter(|s| s.unalignable).count() as f64);
    Ok(m)
}

/// Metrics of an inverse field; the consistency ratio compares the median
/// roundtrip error with the median ground-truth warp.
pub fn inverse_metrics(out: &InverseOutcome, gt: Option<&GroundTruth>) -> StageMetrics {
    let mut m = report::summary("roundtrip", &out.roundtrip);
    m.insert("final_loss".into(), out.report.final_loss);
    m.insert("pairs".into(), out.pairs.len() as f64);
    if let (Some(rt), Some(w)) = (m.get("roundtrip_median").copied(), gt.and_then(gt_warp_magnitude)) {
        m.insert("gt_warp_median".into(), w);
        m.insert("consistency_ratio".into(), rt / w);
    }
    m
}

pub fn merge_metrics(stats: &MergeStats) -> StageMetrics {
    let mut m = StageMetrics::new();
    if let Some(t) = stats.tau_d {
        m.insert("tau_d".into(), t);
    }
    if let Some(t) = stats.tau_c {
        m.insert("tau_c".into(), t);
    }
    m
}

/// Everything a full run produced.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub metrics: MetricsReport,
    pub timing: TimingReport,
    pub frames: Vec<FrameData>,
    pub aligned: Checkpoint,
    pub refined: Checkpoint,
    pub refine_summary: RefineSummary,
    pub inverse: Option<InverseOutcome>,
    pub splats: usize,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

/// Runs every stage on `scene_dir` and writes all artifacts to `out_dir`:
/// `filtered.ply`, the `align/` and `refine/` checkpoints, the inverse
/// field, `splats.ply`, `metrics.json` and `timing.json`. When the scene
/// carries ground truth the metrics include chamfer and deformation error.
pub fn run_pipeline(scene_dir: &Path, out_dir: &Path, cfg: &Config) -> Result<PipelineRun> {
    cfg.validate()?;
    let t_all = Instant::now();
    let mut timing = TimingReport {
        threads: rayon::current_num_threads(),
        ..Default::default()
    };
    let mut metrics = MetricsReport {
        config_hash: cfg.hash(),
        ..Default::default()
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let gt = scene_ground_truth(scene_dir)?;
    let gt = gt.as_ref();
    write_json(&out_dir.join("config.json"), cfg)?;

    let t = Instant::now();
    let scene = load_scene(scene_dir)?;
    let union = unprojected_union(&scene, cfg.stride);
    let filtered = union.select(&filter_keep(&union, cfg));
    filtered.write_ply(&out_dir.join("filtered.ply"))?;
    metrics.insert("unaligned", cloud_metrics(&union.positions, gt)?);
    metrics.insert("filtered", cloud_metrics(&filtered.positions, gt)?);
    let frames = prepare_frames(&scene, cfg)?;
    timing.stages.insert("ingest".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let s1 = run_stage1(&frames, &scene.correspondences, cfg)?;
    let aligned = Checkpoint {
        stage: Stage::Align,
        scene_dir: absolute(scene_dir),
        config: cfg.clone(),
        states: s1.states,
        model: s1.model,
        stats: s1.stats,
    };
    save_checkpoint(&out_dir.join("align"), &aligned)?;
    timing.stages.insert("align".into(), t.elapsed().as_secs_f64());
    metrics.insert("align", stage_metrics(&frames, &aligned.states, &aligned.model, gt)?);
    metrics.insert("align", merge_metrics(&aligned.stats));
    info!("align: {:?}", metrics.stages["align"]);

    let t = Instant::now();
    let (refined, refine_summary) = refine(&frames, &aligned)?;
    save_checkpoint(&out_dir.join("refine"), &refined)?;
    timing.stages.insert("refine".into(), t.elapsed().as_secs_f64());
    let mut rm = stage_metrics(&frames, &refined.states, &refined.model, gt)?;
    rm.insert("iterations".into(), refine_summary.iterations as f64);
    rm.insert("halted".into(), refine_summary.halted as u8 as f64);
    metrics.insert("refine", rm);
    info!("refine: {:?}", metrics.stages["refine"]);

    let inverse = if cfg.inverse.enabled {
        let t = Instant::now();
        let out = invert(&frames, &refined.states, cfg)?;
        out.save(&out_dir.join("inverse_field.bin"))?;
        timing.stages.insert("invert".into(), t.elapsed().as_secs_f64());
        metrics.insert("invert", inverse_metrics(&out, gt));
        info!("invert: {:?}", metrics.stages["invert"]);
        Some(out)
    } else {
        None
    };

    let t = Instant::now();
    let splats = export(&refined.model, cfg)?;
    splats.write_ply(&out_dir.join("splats.ply"))?;
    timing.stages.insert("export".into(), t.elapsed().as_secs_f64());
    let mut em = StageMetrics::new();
    em.insert("splats".into(), splats.len() as f64);
    if !splats.is_empty() {
        em.insert("mean_scale".into(), splats.splats.iter().map(|s| s.scale[0]).sum::<f64>() / splats.len() as f64);
    }
    metrics.insert("export", em);

    metrics.write(&out_dir.join("metrics.json"))?;
    timing.total = t_all.elapsed().as_secs_f64();
    timing.write(&out_dir.join("timing.json"))?;
    Ok(PipelineRun {
        metrics,
        timing,
        frames,
        aligned,
        refined,
        refine_summary,
        inverse,
        splats: splats.len(),
    })
}
