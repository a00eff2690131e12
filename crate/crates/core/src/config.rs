//! Pipeline configuration. Defaults are the published hyperparameters;
//! everything else is a documented knob.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::FieldSpec;

pub const DEFAULTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub defaults_version: u32,
    pub seed: u64,
    /// Pixel stride used when unprojecting depth maps.
    pub stride: usize,
    pub filter: FilterConfig,
    pub field: FieldConfig,
    pub icp: IcpConfig,
    pub global: GlobalConfig,
    pub inverse: InverseConfig,
    pub export: ExportConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub enabled: bool,
    pub s_vox: f64,
    pub theta_loc: f64,
    pub theta_cnt: f64,
    /// Apply the filter to each frame separately instead of to the union.
    pub per_frame: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub levels: usize,
    pub features: usize,
    pub log2_table: u32,
    pub hidden: usize,
    pub embed_dim: usize,
    pub output_scale: f64,
    /// Grid features start uniform in `±grid_init`.
    pub grid_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    pub s_vox: Vec<f64>,
    pub d_max: Vec<f64>,
    pub iters: Vec<usize>,
    pub lr: f64,
    pub lr_camera: f64,
    pub lambda_color: f64,
    pub lambda_corr: f64,
    pub lambda_tv: f64,
    pub theta_d: f64,
    pub theta_c: f64,
    pub sigma_d: f64,
    pub sigma_c: f64,
    pub max_correspondences: usize,
    pub max_pairs: usize,
    pub normal_k: usize,
    /// Points per iteration on which the TV regularizer is evaluated.
    pub tv_samples: usize,
    pub unalignable_after: usize,
    pub renormal_every: usize,
    /// Freeze every deformation field at the identity.
    pub rigid_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub iters: usize,
    pub lambda_color: f64,
    pub lambda_anchor: f64,
    pub anchors: usize,
    pub neighbors: usize,
    pub lr: f64,
    pub lr_camera: f64,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InverseConfig {
    pub enabled: bool,
    pub m_per_frame: usize,
    pub iters: usize,
    pub batch: usize,
    pub lambda_tv: f64,
    pub tv_samples: usize,
    pub lr: f64,
    pub log2_table: u32,
    pub holdout: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    pub target_count: usize,
    pub k: usize,
    pub opacity: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            defaults_version: DEFAULTS_VERSION,
            seed: 0,
            stride: 2,
            filter: FilterConfig::default(),
            field: FieldConfig::default(),
            icp: IcpConfig::default(),
            global: GlobalConfig::default(),
            inverse: InverseConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            s_vox: 0.04,
            theta_loc: 15.0,
            theta_cnt: 50.0,
            per_frame: false,
        }
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            features: 2,
            log2_table: 15,
            hidden: 64,
            embed_dim: 8,
            output_scale: 0.1,
            grid_init: 1.0,
        }
    }
}

impl FieldConfig {
    /// Field architecture over the bounding box of `points` grown by
    /// `finest_cell`.
    pub fn spec(&self, points: &[Vector3<f64>], finest_cell: f64, log2_table: u32) -> Result<FieldSpec> {
        let mut s = FieldSpec::bounding(points, finest_cell, finest_cell, log2_table)?;
        s.levels = self.levels;
        s.features = self.features;
        s.hidden = self.hidden;
        s.output_scale = self.output_scale;
        s.validate()?;
        Ok(s)
    }
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            s_vox: vec![0.04, 0.02],
            d_max: vec![0.05, 0.03],
            iters: vec![50, 150],
            lr: 1e-3,
            lr_camera: 1e-3,
            lambda_color: 0.05,
            lambda_corr: 1.0,
            lambda_tv: 10.0,
            theta_d: 75.0,
            theta_c: 75.0,
            sigma_d: 2.5,
            sigma_c: 1.5,
            max_correspondences: 5000,
            max_pairs: 20,
            normal_k: 16,
            tv_samples: 256,
            unalignable_after: 10,
            renormal_every: 5,
            rigid_only: false,
        }
    }
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            lambda_color: 0.05,
            lambda_anchor: 50.0,
            anchors: 2048,
            neighbors: 5,
            lr: 1e-3,
            lr_camera: 1e-3,
            patience: 20,
        }
    }
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            m_per_frame: 4096,
            iters: 2000,
            batch: 2048,
            lambda_tv: 10.0,
            tv_samples: 256,
            lr: 1e-3,
            log2_table: 17,
            holdout: 512,
        }
    }
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            target_count: 1_500_000,
            k: 10,
            opacity: 0.1,
        }
    }
}

/// Ablation switches, each removing one component of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    OnlyRigid,
    NoCorr,
    NoFilt,
    NoGlobal,
    NoInv,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::OnlyRigid,
        Ablation::NoCorr,
        Ablation::NoFilt,
        Ablation::NoGlobal,
        Ablation::NoInv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::OnlyRigid => "only-rigid",
            Ablation::NoCorr => "no-corr",
            Ablation::NoFilt => "no-filt",
            Ablation::NoGlobal => "no-global",
            Ablation::NoInv => "no-inv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

impl Config {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.defaults_version != DEFAULTS_VERSION {
            return bad(format!("defaults_version {} is not {DEFAULTS_VERSION}", self.defaults_version));
        }
        let i = &self.icp;
        if i.s_vox.is_empty() || i.s_vox.len() != i.d_max.len() || i.s_vox.len() != i.iters.len() {
            return bad("s_vox, d_max and iters schedules must be nonempty and of equal length".into());
        }
        let lambdas = [
            ("icp.lambda_color", i.lambda_color),
            ("icp.lambda_corr", i.lambda_corr),
            ("icp.lambda_tv", i.lambda_tv),
            ("global.lambda_color", self.global.lambda_color),
            ("global.lambda_anchor", self.global.lambda_anchor),
            ("inverse.lambda_tv", self.inverse.lambda_tv),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        let percentiles = [
            ("filter.theta_loc", self.filter.theta_loc),
            ("filter.theta_cnt", self.filter.theta_cnt),
            ("icp.theta_d", i.theta_d),
            ("icp.theta_c", i.theta_c),
        ];
        for (name, v) in percentiles {
            if !(0.0..=100.0).contains(&v) {
                return bad(format!("{name} must be a percentile in [0, 100], got {v}"));
            }
        }
        let positive = [
            ("filter.s_vox", self.filter.s_vox),
            ("icp.lr", i.lr),
            ("icp.lr_camera", i.lr_camera),
            ("icp.sigma_d", i.sigma_d),
            ("icp.sigma_c", i.sigma_c),
            ("global.lr", self.global.lr),
            ("global.lr_camera", self.global.lr_camera),
            ("inverse.lr", self.inverse.lr),
            ("field.output_scale", self.field.output_scale),
            ("export.opacity", self.export.opacity),
        ];
        for (name, v) in positive.into_iter().chain(i.s_vox.iter().map(|&v| ("icp.s_vox", v))).chain(i.d_max.iter().map(|&v| ("icp.d_max", v))) {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.stride == 0 || self.export.k == 0 || self.global.neighbors == 0 || i.normal_k < 3 {
            return bad("stride, export.k and global.neighbors must be >= 1 and icp.normal_k >= 3".into());
        }
        if self.field.levels == 0 || self.field.features == 0 || self.field.hidden == 0 {
            return bad("field capacity must be nonzero".into());
        }
        if !(4..=24).contains(&self.field.log2_table) || !(4..=24).contains(&self.inverse.log2_table) {
            return bad("hash table sizes must be 2^4 ..= 2^24".into());
        }
        if self.inverse.batch == 0 || self.inverse.m_per_frame == 0 {
            return bad("inverse.batch and inverse.m_per_frame must be >= 1".into());
        }
        Ok(())
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        match a {
            Ablation::OnlyRigid => self.icp.rigid_only = true,
            Ablation::NoCorr => self.icp.lambda_corr = 0.0,
            Ablation::NoFilt => self.filter.enabled = false,
            Ablation::NoGlobal => self.global.iters = 0,
            Ablation::NoInv => self.inverse.enabled = false,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    pub fn fine_s_vox(&self) -> f64 {
        *self.icp.s_vox.last().unwrap()
    }

    pub fn fine_d_max(&self) -> f64 {
        *self.icp.d_max.last().unwrap()
    }
}
