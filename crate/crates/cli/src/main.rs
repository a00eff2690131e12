use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use driftalign::config::{Ablation, Config};
use driftalign::icp::FrameData;
use driftalign::pipeline::{self, MetricsReport, Stage};
use driftalign::synth::{self, SceneSpec};

/// Non-rigid alignment of inconsistent multi-view depth into one canonical
/// point cloud.
#[derive(Parser, Debug)]
#[command(name = "driftalign", version)]
struct Cli {
    /// JSON config file; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Disable a pipeline component; may be repeated.
    #[arg(long, global = true, value_name = "NAME", value_parser = parse_ablation)]
    ablate: Vec<Ablation>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic drift scene.
    Synth {
        /// Scene spec JSON; the default scene when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        out_dir: PathBuf,
    },
    /// Unproject and confidence-filter a scene into one world-space cloud.
    Filter { scene_dir: PathBuf, out_ply: PathBuf },
    /// Sequential non-rigid alignment.
    Align { scene_dir: PathBuf, out_ckpt: PathBuf },
    /// Global refinement of an aligned checkpoint.
    Refine { ckpt: PathBuf, out_ckpt: PathBuf },
    /// Train the backward deformation field.
    Invert { ckpt: PathBuf, out_field: PathBuf },
    /// Export the splat initialization.
    Export { ckpt: PathBuf, out_splat_ply: PathBuf },
    /// Report metrics of a checkpoint or a point cloud against ground truth.
    Metrics {
        ckpt_or_ply: PathBuf,
        gt_dir: PathBuf,
        report_json: PathBuf,
    },
    /// Run every stage.
    Pipeline { scene_dir: PathBuf, out_dir: PathBuf },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

impl Cli {
    /// Config from `--config` or `fallback`, with seed and ablations applied.
    fn config(&self, fallback: Option<&Config>) -> Result<Config> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => Config::load(p)?,
            (None, Some(c)) => c.clone(),
            (None, None) => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        for &a in &self.ablate {
            cfg.apply_ablation(a);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { spec, out_dir } => {
            let mut s = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<SceneSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SceneSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let gt = synth::generate(&s, out_dir)?;
            print(json!({ "frames": gt.cameras.len(), "surface_samples": gt.samples.len(), "out": out_dir }));
        }
        Command::Filter { scene_dir, out_ply } => {
            let cfg = cli.config(None)?;
            let scene = driftalign::ingest::load_scene(scene_dir)?;
            let cloud = pipeline::filtered_cloud(&scene, &cfg);
            cloud.write_ply(out_ply)?;
            print(json!({ "points": cloud.len(), "out": out_ply }));
        }
        Command::Align { scene_dir, out_ckpt } => {
            let cfg = cli.config(None)?;
            let (_, ck) = pipeline::align(scene_dir, &cfg)?;
            pipeline::save_checkpoint(out_ckpt, &ck)?;
            let unalignable = ck.states.iter().filter(|s| s.unalignable).count();
            print(json!({ "stage": "align", "model_points": ck.model.len(), "unalignable": unalignable, "out": out_ckpt }));
        }
        Command::Refine { ckpt, out_ckpt } => {
            let mut ck = pipeline::require_stage(ckpt, Stage::Align, "refine")?;
            ck.config = cli.config(Some(&ck.config))?;
            let frames = frames_of(&ck.scene_dir, &ck.config)?;
            let (out, summary) = pipeline::refine(&frames, &ck)?;
            pipeline::save_checkpoint(out_ckpt, &out)?;
            print(json!({ "stage": "refine", "summary": summary, "out": out_ckpt }));
        }
        Command::Invert { ckpt, out_field } => {
            let ck = pipeline::require_stage(ckpt, Stage::Refine, "invert")?;
            let cfg = cli.config(Some(&ck.config))?;
            if !cfg.inverse.enabled {
                bail!("the inverse field is disabled by the config");
            }
            let frames = frames_of(&ck.scene_dir, &ck.config)?;
            let out = pipeline::invert(&frames, &ck.states, &cfg)?;
            out.save(out_field)?;
            print(json!({ "stage": "invert", "metrics": pipeline::inverse_metrics(&out, None), "out": out_field }));
        }
        Command::Export { ckpt, out_splat_ply } => {
            let ck = pipeline::require_stage(ckpt, Stage::Align, "export")?;
            let cfg = cli.config(Some(&ck.config))?;
            let splats = pipeline::export(&ck.model, &cfg)?;
            splats.write_ply(out_splat_ply)?;
            print(json!({ "splats": splats.len(), "out": out_splat_ply }));
        }
        Command::Metrics {
            ckpt_or_ply,
            gt_dir,
            report_json,
        } => {
            let gt = synth::GroundTruth::load(gt_dir)?;
            let report = if ckpt_or_ply.is_dir() {
                let ck = pipeline::load_checkpoint(ckpt_or_ply)?;
                let frames = frames_of(&ck.scene_dir, &ck.config)?;
                let mut m = pipeline::stage_metrics(&frames, &ck.states, &ck.model, Some(&gt))?;
                m.extend(pipeline::merge_metrics(&ck.stats));
                let mut r = MetricsReport {
                    config_hash: ck.config.hash(),
                    ..Default::default()
                };
                r.insert(ck.stage.name(), m);
                r
            } else {
                let cloud = driftalign::cloud::PointCloud::read_ply(ckpt_or_ply)?;
                let mut r = MetricsReport::default();
                r.insert("cloud", pipeline::cloud_metrics(&cloud.positions, Some(&gt))?);
                r
            };
            report.write(report_json)?;
            println!("{}", report.to_json().trim_end());
        }
        Command::Pipeline { scene_dir, out_dir } => {
            let cfg = cli.config(None)?;
            let run = pipeline::run_pipeline(scene_dir, out_dir, &cfg)?;
            info!("pipeline finished in {:.1} s", run.timing.total);
            println!("{}", run.metrics.to_json().trim_end());
        }
    }
    Ok(())
}

/// Frames of the scene a checkpoint was made from.
fn frames_of(scene_dir: &Path, cfg: &Config) -> Result<Vec<FrameData>> {
    let (_, frames) = pipeline::load_frames(scene_dir, cfg)
        .with_context(|| format!("reloading the scene at {}", scene_dir.display()))?;
    Ok(frames)
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<driftalign::error::Error>())
        .map_or("cli", |e| e.kind())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DRIFTALIGN_LOG", "info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({ "error": { "kind": "cli", "message": e.to_string() } }));
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": error_kind(&e), "message": format!("{e:#}") } }));
            ExitCode::FAILURE
        }
    }
}
