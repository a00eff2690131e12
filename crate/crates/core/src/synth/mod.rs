//! Synthetic drift scenes: every frame observes the same textured primitives
//! through its own smooth warp, so per-frame depth is individually plausible
//! but mutually inconsistent. Ground truth makes every stage measurable.

pub mod metrics;
pub mod scene;

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::ingest::{self, CameraModel, Correspondence, FrameBundle, Raster, RgbImage, Scene};
pub use scene::{scene_sdf, Primitive, TextureSpec, Trajectory, Warp};

type V3 = Vector3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarpSpec {
    pub kernels: usize,
    /// Upper bound on the displacement magnitude (meters).
    pub max_translation: f64,
    /// Kernel magnitudes are drawn from `[min_fraction, 1] · max_translation`.
    pub min_fraction: f64,
    pub bandwidth: f64,
    pub blend: f64,
    pub center_min: [f64; 3],
    pub center_max: [f64; 3],
}

impl Default for WarpSpec {
    fn default() -> Self {
        Self {
            kernels: 6,
            max_translation: 0.03,
            min_fraction: 0.6,
            bandwidth: 0.35,
            blend: 0.1,
            center_min: [-0.8, -0.8, 0.0],
            center_max: [0.8, 0.8, 0.6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfidenceSpec {
    pub alpha: f64,
    pub beta: f64,
    /// Pixel radius over which edge proximity decays to zero.
    pub edge_radius_px: f64,
    /// Relative depth jump between neighbors that marks an edge.
    pub edge_jump: f64,
}

impl Default for ConfidenceSpec {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.2,
            edge_radius_px: 4.0,
            edge_jump: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrespondenceSpec {
    pub per_pair: usize,
    /// Fraction of matches whose target pixel is replaced by a random one;
    /// every match carries certainty `1 - corruption`.
    pub corruption: f64,
}

impl Default for CorrespondenceSpec {
    fn default() -> Self {
        Self {
            per_pair: 300,
            corruption: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub texture: TextureSpec,
    pub trajectory: Trajectory,
    pub warp: WarpSpec,
    pub depth_noise: f64,
    pub confidence: ConfidenceSpec,
    pub correspondences: CorrespondenceSpec,
    pub max_surface_samples: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            primitives: vec![
                Primitive::Plane {
                    center: [0.0, 0.0, 0.0],
                    normal: [0.0, 0.0, 1.0],
                    half_extent: 1.2,
                    color: [0.55, 0.5, 0.42],
                },
                Primitive::Sphere {
                    center: [0.25, 0.2, 0.3],
                    radius: 0.3,
                    color: [0.8, 0.32, 0.25],
                },
                Primitive::Box {
                    center: [-0.3, -0.3, 0.2],
                    half_size: [0.18, 0.18, 0.2],
                    color: [0.25, 0.45, 0.8],
                },
            ],
            texture: TextureSpec::default(),
            trajectory: Trajectory::default(),
            warp: WarpSpec::default(),
            depth_noise: 0.002,
            confidence: ConfidenceSpec::default(),
            correspondences: CorrespondenceSpec::default(),
            max_surface_samples: 60_000,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.primitives.is_empty() {
            return bad("at least one primitive is required");
        }
        if !self.primitives.iter().all(Primitive::validate) {
            return bad("primitive with nonpositive size or color outside [0, 1]");
        }
        if self.trajectory.frames < 2 {
            return bad("at least two cameras are required");
        }
        let w = &self.warp;
        if w.max_translation < 0.0 || self.depth_noise < 0.0 || w.bandwidth <= 0.0 || w.blend <= 0.0 {
            return bad("magnitudes must be nonnegative and bandwidth, blend positive");
        }
        // the inverse warp is a fixed point iteration; keep it a contraction
        if w.max_translation / w.bandwidth > 0.3 {
            return bad("warp is too steep to be inverted (max_translation / bandwidth > 0.3)");
        }
        if !(0.0..=1.0).contains(&self.correspondences.corruption) || !(0.0..=1.0).contains(&w.min_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        Ok(())
    }

    /// Per-frame warps; frame 0 is always the identity.
    pub fn warps(&self) -> Vec<Warp> {
        let w = &self.warp;
        (0..self.trajectory.frames)
            .map(|i| {
                if i == 0 || w.max_translation == 0.0 || w.kernels == 0 {
                    return Warp::identity();
                }
                let mut rng = stream_rng(self.seed, 1, i as u64);
                let mut centers = Vec::new();
                let mut translations = Vec::new();
                for _ in 0..w.kernels {
                    centers.push(std::array::from_fn(|a| rng.random_range(w.center_min[a]..=w.center_max[a])));
                    let dir = loop {
                        let d = V3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                        let n = d.norm();
                        if n > 0.1 && n <= 1.0 {
                            break d / n;
                        }
                    };
                    let mag = w.max_translation * rng.random_range(w.min_fraction..=1.0);
                    translations.push((dir * mag).into());
                }
                Warp {
                    centers,
                    translations,
                    bandwidth: w.bandwidth,
                    blend: w.blend,
                }
            })
            .collect()
    }
}

fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose << 32 | index);
    rng
}

/// A ray hit: z-depth, warped world point, canonical point, primitive.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub depth: f64,
    pub world: V3,
    pub canonical: V3,
    pub primitive: usize,
}

/// Casts the ray through pixel `(u, v)` into the warped scene.
pub fn cast_ray(prims: &[Primitive], warp: &Warp, cam: &CameraModel, u: f64, v: f64) -> Option<Hit> {
    let o = cam.pose.translation;
    let d = cam.pose.rotation * cam.backproject(u, v, 1.0);
    let dn = d.norm();
    let g = |t: f64, guess: &V3| {
        let x = warp.inverse_from(&(o + d * t), guess);
        (scene_sdf(prims, &x).0, x)
    };
    let mut t = 0.05;
    let mut x = o + d * t;
    let (s0, _) = g(t, &x);
    if s0 <= 0.0 {
        return None;
    }
    for _ in 0..2000 {
        let (s, nx) = g(t, &x);
        x = nx;
        if s < 1e-4 {
            // bracket the crossing, then bisect
            let mut lo = t;
            let mut hi = t + 4.0 * s.max(1e-6) / dn;
            let mut xh = x;
            let mut grow = 0;
            loop {
                let (sh, xx) = g(hi, &xh);
                xh = xx;
                if sh < 0.0 {
                    break;
                }
                lo = hi;
                hi += 4.0 * sh.max(1e-6) / dn;
                grow += 1;
                if grow > 50 {
                    break;
                }
            }
            if grow > 50 {
                t = hi;
                continue;
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let (sm, xm) = g(mid, &x);
                x = xm;
                if sm > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t = 0.5 * (lo + hi);
            let world = o + d * t;
            let canonical = warp.inverse_from(&world, &x);
            return Some(Hit {
                depth: t,
                world,
                canonical,
                primitive: scene_sdf(prims, &canonical).1,
            });
        }
        t += 0.6 * s / dn;
        if t > 30.0 {
            return None;
        }
    }
    None
}

/// Per-frame ground truth kept in memory by [`render`].
#[derive(Clone, Debug)]
pub struct FrameTruth {
    pub depth: Raster,
    /// Primitive index per pixel, -1 where the ray misses.
    pub primitive: Vec<i32>,
    pub canonical: Vec<Option<V3>>,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub spec: SceneSpec,
    pub warps: Vec<Warp>,
    pub cameras: Vec<CameraModel>,
    /// Canonical surface points seen by at least one camera.
    pub samples: PointCloud,
    /// Present only for freshly rendered scenes.
    pub frames: Vec<FrameTruth>,
}

#[derive(Debug)]
pub struct Rendered {
    pub scene: Scene,
    pub truth: GroundTruth,
}

fn render_frame(spec: &SceneSpec, warp: &Warp, cam: &CameraModel, id: u32) -> Result<(FrameBundle, FrameTruth)> {
    let (w, h) = (cam.width, cam.height);
    let hits: Vec<Option<Hit>> = (0..w * h)
        .map(|k| cast_ray(&spec.primitives, warp, cam, (k % w) as f64, (k / w) as f64))
        .collect();
    if hits.iter().all(Option::is_none) {
        return Err(Error::Frame {
            frame: id,
            msg: "camera sees no geometry".into(),
        });
    }
    let mut rng = stream_rng(spec.seed, 2, id as u64);
    let noise = Normal::new(0.0, spec.depth_noise.max(0.0)).expect("valid sigma");
    let mut exact = Raster::new(w, h);
    let mut depth = Raster::new(w, h);
    let mut image = RgbImage::new(w, h);
    let mut primitive = vec![-1; w * h];
    let mut canonical = vec![None; w * h];
    for (k, hit) in hits.iter().enumerate() {
        let (u, v) = (k % w, k / w);
        if let Some(hit) = hit {
            exact.set(u, v, hit.depth as f32);
            let n = if spec.depth_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            depth.set(u, v, (hit.depth + n).max(1e-3) as f32);
            image.set(u, v, &scene::surface_color(&spec.primitives, &spec.texture, spec.seed, &hit.canonical));
            primitive[k] = hit.primitive as i32;
            canonical[k] = Some(hit.canonical);
        }
    }
    let confidence = confidence_map(&exact, &spec.confidence, &mut rng);
    Ok((
        FrameBundle {
            frame_id: id,
            depth,
            confidence,
            image,
            camera: cam.clone(),
        },
        FrameTruth {
            depth: exact,
            primitive,
            canonical,
        },
    ))
}

/// `clamp(1 - α·edge_proximity - β·noise)` with edge proximity decaying
/// linearly to zero at `edge_radius_px` from the nearest depth edge.
fn confidence_map(depth: &Raster, c: &ConfidenceSpec, rng: &mut ChaCha8Rng) -> Raster {
    let (w, h) = (depth.width, depth.height);
    let valid = |u: i64, v: i64| u >= 0 && v >= 0 && (u as usize) < w && (v as usize) < h && depth.get(u as usize, v as usize) > 0.0;
    let mut edge = vec![false; w * h];
    for v in 0..h as i64 {
        for u in 0..w as i64 {
            if !valid(u, v) {
                edge[v as usize * w + u as usize] = true;
                continue;
            }
            let d = depth.get(u as usize, v as usize);
            edge[v as usize * w + u as usize] = [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(du, dv)| {
                !valid(u + du, v + dv) || (depth.get((u + du) as usize, (v + dv) as usize) - d).abs() as f64 > c.edge_jump * d as f64
            });
        }
    }
    let r = c.edge_radius_px.ceil() as i64;
    let mut out = Raster::new(w, h);
    for v in 0..h as i64 {
        for u in 0..w as i64 {
            let noise: f64 = rng.random();
            if !valid(u, v) {
                continue;
            }
            let mut best = f64::INFINITY;
            for dv in -r..=r {
                for du in -r..=r {
                    let (uu, vv) = (u + du, v + dv);
                    let is_edge = uu < 0 || vv < 0 || uu >= w as i64 || vv >= h as i64 || edge[vv as usize * w + uu as usize];
                    if is_edge {
                        best = best.min(((du * du + dv * dv) as f64).sqrt());
                    }
                }
            }
            let prox = if c.edge_radius_px > 0.0 {
                (1.0 - best / c.edge_radius_px).max(0.0)
            } else {
                0.0
            };
            out.set(u as usize, v as usize, (1.0 - c.alpha * prox - c.beta * noise).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

fn correspondences_for_pair(
    spec: &SceneSpec,
    warps: &[Warp],
    cams: &[CameraModel],
    j: usize,
    k: usize,
) -> Vec<Correspondence> {
    let n = spec.correspondences.per_pair;
    let corrupt = spec.correspondences.corruption;
    let mut rng = stream_rng(spec.seed, 3, (j * cams.len() + k) as u64);
    let (cj, ck) = (&cams[j], &cams[k]);
    let mut out = Vec::with_capacity(n);
    for _ in 0..4 * n {
        if out.len() == n {
            break;
        }
        let su = rng.random_range(0.0..(cj.width - 1) as f64);
        let sv = rng.random_range(0.0..(cj.height - 1) as f64);
        let bad = rng.random::<f64>() < corrupt;
        let ru = rng.random_range(0.0..(ck.width - 1) as f64);
        let rv = rng.random_range(0.0..(ck.height - 1) as f64);
        let Some(hj) = cast_ray(&spec.primitives, &warps[j], cj, su, sv) else {
            continue;
        };
        let yk = warps[k].apply(&hj.canonical);
        let Some((tu, tv, z)) = ck.project_world(&yk) else {
            continue;
        };
        if !ck.in_bounds(tu, tv) {
            continue;
        }
        let Some(hk) = cast_ray(&spec.primitives, &warps[k], ck, tu, tv) else {
            continue;
        };
        if (hk.depth - z).abs() > 1e-6 {
            continue;
        }
        let (tu, tv) = if bad { (ru, rv) } else { (tu, tv) };
        out.push(Correspondence {
            src_frame: j as u32,
            dst_frame: k as u32,
            su,
            sv,
            tu,
            tv,
            w: 1.0 - corrupt,
        });
    }
    out
}

/// Renders every frame, the correspondences and the ground truth in memory.
pub fn render(spec: &SceneSpec) -> Result<Rendered> {
    spec.validate()?;
    let cams = spec.trajectory.cameras();
    let warps = spec.warps();
    let rendered = (0..cams.len())
        .into_par_iter()
        .map(|i| render_frame(spec, &warps[i], &cams[i], i as u32))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..cams.len()).flat_map(|k| (0..k).map(move |j| (j, k))).collect();
    let correspondences = pairs
        .par_iter()
        .map(|&(j, k)| correspondences_for_pair(spec, &warps, &cams, j, k))
        .collect::<Vec<_>>()
        .concat();
    let (frames, truths): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let samples = surface_samples(spec, &frames, &truths);
    Ok(Rendered {
        scene: Scene {
            frames,
            correspondences,
        },
        truth: GroundTruth {
            spec: spec.clone(),
            warps,
            cameras: cams,
            samples,
            frames: truths,
        },
    })
}

fn surface_samples(spec: &SceneSpec, frames: &[FrameBundle], truths: &[FrameTruth]) -> PointCloud {
    let mut all = PointCloud::default();
    for (f, t) in frames.iter().zip(truths) {
        for (k, c) in t.canonical.iter().enumerate() {
            if let Some(x) = c {
                all.positions.push(*x);
                all.colors.push(f.image.get(k % f.image.width, k / f.image.width));
                all.confidences.push(1.0);
                all.frame_ids.push(f.frame_id);
            }
        }
    }
    if all.len() <= spec.max_surface_samples {
        return all;
    }
    let mut rng = stream_rng(spec.seed, 4, 0);
    let mut idx = rand::seq::index::sample(&mut rng, all.len(), spec.max_surface_samples).into_vec();
    idx.sort_unstable();
    all.select(&idx)
}

/// Renders `spec` and writes the ingest layout plus `gt/` to `out_dir`.
pub fn generate(spec: &SceneSpec, out_dir: &Path) -> Result<GroundTruth> {
    let r = render(spec)?;
    write_rendered(&r, out_dir)?;
    Ok(r.truth)
}

pub fn write_rendered(r: &Rendered, out_dir: &Path) -> Result<()> {
    let gt = out_dir.join("gt");
    std::fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
    for f in &r.scene.frames {
        ingest::write_frame(out_dir, f)?;
    }
    ingest::write_correspondences(&out_dir.join("correspondences.csv"), &r.scene.correspondences)?;
    for (i, w) in r.truth.warps.iter().enumerate() {
        let p = gt.join(format!("warp_{i:04}.json"));
        std::fs::write(&p, serde_json::to_string_pretty(w)?).map_err(|e| Error::io(&p, e))?;
    }
    r.truth.samples.write_ply(&gt.join("surface_samples.ply"))?;
    let p = gt.join("spec.json");
    std::fs::write(&p, serde_json::to_string_pretty(&r.truth.spec)?).map_err(|e| Error::io(&p, e))
}

impl GroundTruth {
    /// Reads `gt/` (or the scene directory containing it).
    pub fn load(dir: &Path) -> Result<Self> {
        let gt = if dir.join("spec.json").exists() { dir.to_path_buf() } else { dir.join("gt") };
        let p = gt.join("spec.json");
        let spec: SceneSpec = serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let warps = (0..spec.trajectory.frames)
            .map(|i| {
                let p = gt.join(format!("warp_{i:04}.json"));
                let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                Ok(serde_json::from_str(&s)?)
            })
            .collect::<Result<Vec<Warp>>>()?;
        let samples = PointCloud::read_ply(&gt.join("surface_samples.ply"))?;
        Ok(Self {
            cameras: spec.trajectory.cameras(),
            spec,
            warps,
            samples,
            frames: Vec::new(),
        })
    }

    /// Exact distance from `p` to the canonical surface.
    pub fn surface_distance(&self, p: &V3) -> f64 {
        scene_sdf(&self.spec.primitives, p).0.abs()
    }
}
