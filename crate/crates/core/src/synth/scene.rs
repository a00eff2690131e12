//! Analytic primitives, procedural texture, smooth drift warps and cameras.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::ingest::CameraModel;
use crate::lie::RigidTransform;
use crate::spatial::tangent_basis;

type V3 = Vector3<f64>;

fn v3(a: [f64; 3]) -> V3 {
    V3::new(a[0], a[1], a[2])
}

/// Surface primitives. A plane is a square slab whose top face is the
/// visible surface; boxes are axis-aligned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Plane {
        center: [f64; 3],
        normal: [f64; 3],
        half_extent: f64,
        color: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f64; 3],
    },
    Box {
        center: [f64; 3],
        half_size: [f64; 3],
        color: [f64; 3],
    },
}

const SLAB: f64 = 0.1;

fn box_sdf(q: V3, half: V3) -> f64 {
    let d = q.abs() - half;
    d.sup(&V3::zeros()).norm() + d.max().min(0.0)
}

impl Primitive {
    pub fn sdf(&self, p: &V3) -> f64 {
        match self {
            Primitive::Plane {
                center,
                normal,
                half_extent,
                ..
            } => {
                let n = v3(*normal).normalize();
                let (t1, t2) = tangent_basis(&n);
                let d = p - v3(*center);
                let local = V3::new(d.dot(&t1), d.dot(&t2), d.dot(&n) + SLAB / 2.0);
                box_sdf(local, V3::new(*half_extent, *half_extent, SLAB / 2.0))
            }
            Primitive::Sphere { center, radius, .. } => (p - v3(*center)).norm() - radius,
            Primitive::Box {
                center, half_size, ..
            } => box_sdf(p - v3(*center), v3(*half_size)),
        }
    }

    pub fn color(&self) -> V3 {
        match self {
            Primitive::Plane { color, .. } | Primitive::Sphere { color, .. } | Primitive::Box { color, .. } => v3(*color),
        }
    }

    pub fn validate(&self) -> bool {
        let ok_color = |c: &[f64; 3]| c.iter().all(|x| (0.0..=1.0).contains(x));
        match self {
            Primitive::Plane {
                normal,
                half_extent,
                color,
                ..
            } => v3(*normal).norm() > 0.0 && *half_extent > 0.0 && ok_color(color),
            Primitive::Sphere { radius, color, .. } => *radius > 0.0 && ok_color(color),
            Primitive::Box {
                half_size, color, ..
            } => half_size.iter().all(|h| *h > 0.0) && ok_color(color),
        }
    }
}

/// Signed distance to the union and the index of the closest primitive.
pub fn scene_sdf(prims: &[Primitive], p: &V3) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, pr) in prims.iter().enumerate() {
        let d = pr.sdf(p);
        if d < best.0 {
            best = (d, i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureSpec {
    pub period: f64,
    pub octaves: u32,
    pub contrast: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            period: 0.12,
            octaves: 2,
            contrast: 0.6,
        }
    }
}

fn lattice_value(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for x in [i, j, k] {
        h ^= x as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]`.
pub fn value_noise(seed: u64, p: &V3, period: f64, octaves: u32) -> f64 {
    let mut sum = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0 / period;
    for o in 0..octaves.max(1) {
        let q = p * freq;
        let base = q.map(f64::floor);
        let f = (q - base).map(|t| t * t * (3.0 - 2.0 * t));
        let mut v = 0.0;
        for c in 0..8 {
            let b = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let w: f64 = (0..3).map(|a| if b[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
            v += w * lattice_value(
                seed.wrapping_add(o as u64),
                base.x as i64 + b[0] as i64,
                base.y as i64 + b[1] as i64,
                base.z as i64 + b[2] as i64,
            );
        }
        sum += amp * v;
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

pub fn surface_color(prims: &[Primitive], tex: &TextureSpec, seed: u64, x: &V3) -> V3 {
    let (_, id) = scene_sdf(prims, x);
    let n = value_noise(seed, x, tex.period, tex.octaves);
    (prims[id].color() * (1.0 - tex.contrast + 2.0 * tex.contrast * n)).map(|c| c.clamp(0.0, 1.0))
}

/// Smooth displacement field `D(x) = Σ φ_j(x) v_j / (Σ φ_j(x) + c)` with
/// Gaussian kernels. `|D| ≤ max_j |v_j|` everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warp {
    pub centers: Vec<[f64; 3]>,
    pub translations: Vec<[f64; 3]>,
    pub bandwidth: f64,
    pub blend: f64,
}

impl Warp {
    pub fn identity() -> Self {
        Self {
            centers: Vec::new(),
            translations: Vec::new(),
            bandwidth: 1.0,
            blend: 1.0,
        }
    }

    pub fn displacement(&self, x: &V3) -> V3 {
        let inv = -0.5 / (self.bandwidth * self.bandwidth);
        let mut num = V3::zeros();
        let mut den = self.blend;
        for (c, v) in self.centers.iter().zip(&self.translations) {
            let phi = ((x - v3(*c)).norm_squared() * inv).exp();
            num += v3(*v) * phi;
            den += phi;
        }
        num / den
    }

    pub fn apply(&self, x: &V3) -> V3 {
        x + self.displacement(x)
    }

    /// Solves `x + D(x) = y` by fixed-point iteration from `guess`.
    pub fn inverse_from(&self, y: &V3, guess: &V3) -> V3 {
        let mut x = *guess;
        for _ in 0..100 {
            let nx = y - self.displacement(&x);
            let step = (nx - x).norm();
            x = nx;
            if step < 1e-14 {
                break;
            }
        }
        x
    }

    pub fn inverse(&self, y: &V3) -> V3 {
        self.inverse_from(y, y)
    }

    pub fn max_translation(&self) -> f64 {
        self.translations.iter().map(|v| v3(*v).norm()).fold(0.0, f64::max)
    }
}

/// Cameras on a horizontal arc around `look_at`, OpenCV convention
/// (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trajectory {
    pub frames: usize,
    pub radius: f64,
    pub height: f64,
    pub start_deg: f64,
    pub arc_deg: f64,
    pub look_at: [f64; 3],
    pub width: usize,
    pub height_px: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            frames: 12,
            radius: 1.5,
            height: 0.9,
            start_deg: -60.0,
            arc_deg: 120.0,
            look_at: [0.0, 0.0, 0.15],
            width: 160,
            height_px: 120,
            fx: 140.0,
            fy: 140.0,
            cx: 79.5,
            cy: 59.5,
        }
    }
}

pub fn look_at(eye: V3, target: V3) -> Matrix3<f64> {
    let f = (target - eye).normalize();
    let r = f.cross(&V3::z()).normalize();
    let d = f.cross(&r);
    Matrix3::from_columns(&[r, d, f])
}

impl Trajectory {
    pub fn cameras(&self) -> Vec<CameraModel> {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        (0..self.frames)
            .map(|i| {
                let s = if self.frames > 1 {
                    i as f64 / (self.frames - 1) as f64
                } else {
                    0.0
                };
                let a = (self.start_deg + s * self.arc_deg).to_radians();
                let eye = V3::new(self.radius * a.cos(), self.radius * a.sin(), self.height);
                CameraModel {
                    k,
                    pose: RigidTransform::new(look_at(eye, v3(self.look_at)), eye),
                    width: self.width,
                    height: self.height_px,
                }
            })
            .collect()
    }
}
