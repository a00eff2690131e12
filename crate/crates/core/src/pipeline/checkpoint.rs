//! On-disk checkpoints between stages.
//!
//! A checkpoint directory holds `manifest.json`, the canonical model as
//! `canonical.ply` (double precision, with the per-point bookkeeping the
//! later stages need), one `frame_%04d.state` field blob per frame with a
//! field, and `merge_stats.json`.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::icp::{FrameState, MergeStats, Model, StateRecord};
use crate::lie::Twist;
use crate::ply::{PlyType, VertexTable};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Align,
    Refine,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Refine => "refine",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub stage: Stage,
    pub scene_dir: PathBuf,
    pub config_hash: String,
    pub config: Config,
    pub frames: Vec<StateRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub scene_dir: PathBuf,
    pub config: Config,
    pub states: Vec<FrameState>,
    pub model: Model,
    pub stats: MergeStats,
}

fn state_file(dir: &Path, frame: u32) -> PathBuf {
    dir.join(format!("frame_{frame:04}.state"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

const XYZ: [&str; 3] = ["x", "y", "z"];
const NXYZ: [&str; 3] = ["nx", "ny", "nz"];
const RGB: [&str; 3] = ["red", "green", "blue"];
const GXYZ: [&str; 3] = ["gx", "gy", "gz"];

fn push_vec(t: &mut VertexTable, names: [&str; 3], v: &[Vector3<f64>]) {
    for (k, name) in names.iter().enumerate() {
        t.push(name, PlyType::F64, v.iter().map(|p| p[k]).collect());
    }
}

fn read_vec(t: &VertexTable, names: [&str; 3]) -> Result<Vec<Vector3<f64>>> {
    let (a, b, c) = (t.require(names[0])?, t.require(names[1])?, t.require(names[2])?);
    Ok((0..t.len).map(|i| Vector3::new(a[i], b[i], c[i])).collect())
}

/// Lossless vertex table of a model; readable as an ordinary point cloud.
pub fn model_table(m: &Model) -> VertexTable {
    let c = &m.cloud;
    let mut t = VertexTable::new(c.len());
    push_vec(&mut t, XYZ, &c.positions);
    if let Some(n) = &c.normals {
        push_vec(&mut t, NXYZ, n);
    }
    push_vec(&mut t, RGB, &c.colors);
    t.push("confidence", PlyType::F64, c.confidences.clone());
    t.push("frame_id", PlyType::U32, c.frame_ids.iter().map(|&f| f as f64).collect());
    if let Some(px) = &c.pixel_coords {
        t.push("u", PlyType::U32, px.iter().map(|p| p[0] as f64).collect());
        t.push("v", PlyType::U32, px.iter().map(|p| p[1] as f64).collect());
    }
    t.push("local", PlyType::U32, m.local.iter().map(|&l| l as f64).collect());
    t.push("intensity", PlyType::F64, m.intensities.clone());
    push_vec(&mut t, GXYZ, &m.gradients);
    t
}

pub fn model_from_table(t: &VertexTable) -> Result<Model> {
    let normals = if t.get("nx").is_some() { Some(read_vec(t, NXYZ)?) } else { None };
    let pixel_coords = match (t.get("u"), t.get("v")) {
        (Some(u), Some(v)) => Some(u.iter().zip(v).map(|(&a, &b)| [a as u32, b as u32]).collect()),
        _ => None,
    };
    let cloud = PointCloud {
        positions: read_vec(t, XYZ)?,
        colors: read_vec(t, RGB)?,
        normals,
        confidences: t.require("confidence")?.to_vec(),
        frame_ids: t.require("frame_id")?.iter().map(|&f| f as u32).collect(),
        pixel_coords,
    };
    cloud.validate()?;
    Ok(Model {
        cloud,
        local: t.require("local")?.iter().map(|&l| l as u32).collect(),
        intensities: t.require("intensity")?.to_vec(),
        gradients: read_vec(t, GXYZ)?,
    })
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &ck.states {
        if let Some(f) = &s.field {
            f.save(&state_file(dir, s.frame_id))?;
        }
    }
    model_table(&ck.model).write(&dir.join("canonical.ply"))?;
    write_json(&dir.join("merge_stats.json"), &ck.stats)?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        stage: ck.stage,
        scene_dir: ck.scene_dir.clone(),
        config_hash: ck.config.hash(),
        config: ck.config.clone(),
        frames: ck.states.iter().map(StateRecord::from).collect(),
    };
    // Written last so a partial checkpoint is never mistaken for a complete one.
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join("manifest.json");
    if !p.exists() {
        return Err(Error::Checkpoint(format!("{} has no manifest.json", dir.display())));
    }
    let m: Manifest = read_json(&p)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", m.version)));
    }
    if m.config.hash() != m.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    let states = m
        .frames
        .iter()
        .map(|r| {
            let field = if r.has_field { Some(DeformationField::load(&state_file(dir, r.frame_id))?) } else { None };
            Ok(FrameState {
                frame_id: r.frame_id,
                camera_twist: Twist::from_array(r.camera_twist),
                field,
                unalignable: r.unalignable,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = model_from_table(&VertexTable::read(&dir.join("canonical.ply"))?)?;
    Ok(Checkpoint {
        stage: m.stage,
        scene_dir: m.scene_dir,
        config: m.config,
        states,
        model,
        stats: read_json(&dir.join("merge_stats.json"))?,
    })
}

/// Loads a checkpoint and checks that it has reached at least `needed`.
pub fn require_stage(dir: &Path, needed: Stage, command: &str) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    if m.stage < needed {
        return Err(Error::StageOrder(format!(
            "{command} needs a checkpoint from `{}` or later, {} is at `{}`",
            needed.name(),
            dir.display(),
            m.stage.name()
        )));
    }
    load_checkpoint(dir)
}
