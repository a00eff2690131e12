//! Scene ingestion: per-frame depth, confidence, color and camera, sparse
//! correspondences, unprojection and the voxelized confidence filter.

pub mod pfm;

use std::collections::{BTreeMap, HashMap};
use std::io::BufReader;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::lie::RigidTransform;
use crate::spatial::voxel_key;
use crate::stats::percentile_sorted;
pub use pfm::Raster;

/// Pinhole camera. `pose` maps camera coordinates to world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub k: Matrix3<f64>,
    pub pose: RigidTransform,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0 && k[(2, 2)] == 1.0;
        if !upper || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::Shape("intrinsics must be upper triangular with fx, fy > 0".into()));
        }
        if !self.pose.is_valid(1e-6) {
            return Err(Error::Shape("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// Camera-space point for pixel `(u, v)` at z-depth `d`.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        let (fx, fy, s) = (self.k[(0, 0)], self.k[(1, 1)], self.k[(0, 1)]);
        let (cx, cy) = (self.k[(0, 2)], self.k[(1, 2)]);
        let y = (v - cy) / fy;
        let x = (u - cx - s * y) / fx;
        Vector3::new(x * d, y * d, d)
    }

    /// Pixel coordinates and depth of a camera-space point.
    #[inline]
    pub fn project_camera(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        if p.z <= 1e-9 {
            return None;
        }
        let q = self.k * (p / p.z);
        Some((q.x, q.y, p.z))
    }

    pub fn project_world(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        self.project_camera(&self.pose.inverse().apply(p))
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "R")]
    r: Vec<f64>,
    t: Vec<f64>,
    convention: String,
}

pub fn write_camera_json(path: &Path, cam: &CameraModel) -> Result<()> {
    let row_major = |m: &Matrix3<f64>| (0..9).map(|i| m[(i / 3, i % 3)]).collect::<Vec<_>>();
    let json = CameraJson {
        k: row_major(&cam.k),
        r: row_major(&cam.pose.rotation),
        t: cam.pose.translation.iter().copied().collect(),
        convention: "cam2world".into(),
    };
    let s = serde_json::to_string_pretty(&json)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_camera_json(path: &Path, width: usize, height: usize) -> Result<CameraModel> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let j: CameraJson = serde_json::from_str(&s)?;
    if j.k.len() != 9 || j.r.len() != 9 || j.t.len() != 3 {
        return Err(Error::Shape(format!("{}: K, R need 9 values and t 3", path.display())));
    }
    let mat = |v: &[f64]| Matrix3::from_fn(|i, k| v[i * 3 + k]);
    let pose = match j.convention.as_str() {
        "cam2world" => RigidTransform::new(mat(&j.r), Vector3::new(j.t[0], j.t[1], j.t[2])),
        "world2cam" => RigidTransform::new(mat(&j.r), Vector3::new(j.t[0], j.t[1], j.t[2])).inverse(),
        other => return Err(Error::Shape(format!("unknown camera convention `{other}`"))),
    };
    let cam = CameraModel {
        k: mat(&j.k),
        pose,
        width,
        height,
    };
    cam.validate()?;
    Ok(cam)
}

/// RGB image with channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0; 3]; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Vector3<f64> {
        let p = self.data[v * self.width + u];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
    }

    pub fn set(&mut self, u: usize, v: usize, c: &Vector3<f64>) {
        self.data[v * self.width + u] = [0, 1, 2].map(|k| (c[k].clamp(0.0, 1.0) * 255.0).round() as u8);
    }
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(f), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    let flat: Vec<u8> = img.data.iter().flatten().copied().collect();
    w.write_image_data(&flat).map_err(|e| Error::Png(e.to_string()))
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette image".into())),
    };
    let mut img = RgbImage::new(w, h);
    for v in 0..h {
        let row = &buf[v * info.line_size..];
        for u in 0..w {
            let px = &row[u * channels..];
            img.data[v * w + u] = if channels < 3 {
                [px[0]; 3]
            } else {
                [px[0], px[1], px[2]]
            };
        }
    }
    Ok(img)
}

/// One view: depth (meters, 0 = invalid), confidence, color and camera.
#[derive(Clone, Debug)]
pub struct FrameBundle {
    pub frame_id: u32,
    pub depth: Raster,
    pub confidence: Raster,
    pub image: RgbImage,
    pub camera: CameraModel,
}

impl FrameBundle {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.depth.width, self.depth.height);
        let same = self.confidence.width == w
            && self.confidence.height == h
            && self.image.width == w
            && self.image.height == h
            && self.camera.width == w
            && self.camera.height == h;
        if !same {
            return Err(Error::Frame {
                frame: self.frame_id,
                msg: format!(
                    "raster size mismatch: depth {}x{}, confidence {}x{}, image {}x{}",
                    w, h, self.confidence.width, self.confidence.height, self.image.width, self.image.height
                ),
            });
        }
        self.camera.validate().map_err(|e| Error::Frame {
            frame: self.frame_id,
            msg: e.to_string(),
        })
    }
}

/// A sparse match between a source pixel and a pixel in the destination
/// frame. Pixel coordinates may be fractional.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src_frame: u32,
    pub dst_frame: u32,
    pub su: f64,
    pub sv: f64,
    pub tu: f64,
    pub tv: f64,
    pub w: f64,
}

pub type CorrespondenceSet = Vec<Correspondence>;

pub fn write_correspondences(path: &Path, set: &[Correspondence]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    // header is emitted even for an empty set
    w.write_record(["src_frame", "dst_frame", "su", "sv", "tu", "tv", "w"])?;
    for c in set {
        w.write_record([
            c.src_frame.to_string(),
            c.dst_frame.to_string(),
            c.su.to_string(),
            c.sv.to_string(),
            c.tu.to_string(),
            c.tv.to_string(),
            c.w.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_correspondences(path: &Path) -> Result<CorrespondenceSet> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// All frames of a scene, sorted by id, plus their correspondences.
#[derive(Clone, Debug, Default)]
pub struct Scene {
    pub frames: Vec<FrameBundle>,
    pub correspondences: CorrespondenceSet,
}

impl Scene {
    pub fn frame(&self, id: u32) -> Option<&FrameBundle> {
        self.frames
            .binary_search_by_key(&id, |f| f.frame_id)
            .ok()
            .map(|i| &self.frames[i])
    }

    pub fn cameras(&self) -> BTreeMap<u32, CameraModel> {
        self.frames.iter().map(|f| (f.frame_id, f.camera.clone())).collect()
    }
}

pub fn frame_stem(id: u32) -> String {
    format!("frame_{id:04}")
}

pub fn write_frame(dir: &Path, f: &FrameBundle) -> Result<()> {
    let stem = frame_stem(f.frame_id);
    pfm::write_pfm(&dir.join(format!("{stem}.depth.pfm")), &f.depth)?;
    pfm::write_pfm(&dir.join(format!("{stem}.conf.pfm")), &f.confidence)?;
    write_png(&dir.join(format!("{stem}.png")), &f.image)?;
    write_camera_json(&dir.join(format!("{stem}.cam.json")), &f.camera)
}

fn load_frame(dir: &Path, id: u32) -> Result<FrameBundle> {
    let stem = frame_stem(id);
    let frame_err = |e: Error| Error::Frame {
        frame: id,
        msg: e.to_string(),
    };
    let depth = pfm::read_pfm(&dir.join(format!("{stem}.depth.pfm"))).map_err(frame_err)?;
    let confidence = pfm::read_pfm(&dir.join(format!("{stem}.conf.pfm"))).map_err(frame_err)?;
    let image = read_png(&dir.join(format!("{stem}.png"))).map_err(frame_err)?;
    let camera = read_camera_json(&dir.join(format!("{stem}.cam.json")), depth.width, depth.height)
        .map_err(frame_err)?;
    let f = FrameBundle {
        frame_id: id,
        depth,
        confidence,
        image,
        camera,
    };
    f.validate()?;
    Ok(f)
}

/// Loads every `frame_%04d.*` group in `dir` plus `correspondences.csv`.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let mut ids = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(rest) = name.strip_prefix("frame_") {
            let num: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            if let Ok(id) = num.parse::<u32>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Empty("no frames found in scene directory"));
    }
    let frames = ids
        .iter()
        .map(|&id| load_frame(dir, id))
        .collect::<Result<Vec<_>>>()?;
    let corr_path = dir.join("correspondences.csv");
    let correspondences = if corr_path.exists() {
        read_correspondences(&corr_path)?
    } else {
        Vec::new()
    };
    let scene = Scene {
        frames,
        correspondences,
    };
    for c in &scene.correspondences {
        let (Some(s), Some(d)) = (scene.frame(c.src_frame), scene.frame(c.dst_frame)) else {
            return Err(Error::Shape(format!(
                "correspondence references unknown frame ({} -> {})",
                c.src_frame, c.dst_frame
            )));
        };
        if !s.camera.in_bounds(c.su, c.sv) || !d.camera.in_bounds(c.tu, c.tv) || !(0.0..=1.0).contains(&c.w) {
            return Err(Error::Shape(format!("correspondence out of bounds: {c:?}")));
        }
    }
    Ok(scene)
}

/// Camera-space unprojection of every valid pixel on the `stride` grid.
/// Positions are in camera coordinates; normals are unset.
pub fn unproject_camera(frame: &FrameBundle, stride: usize) -> PointCloud {
    let stride = stride.max(1);
    let mut out = PointCloud {
        pixel_coords: Some(Vec::new()),
        ..Default::default()
    };
    let px = out.pixel_coords.as_mut().unwrap();
    for v in (0..frame.depth.height).step_by(stride) {
        for u in (0..frame.depth.width).step_by(stride) {
            let d = frame.depth.get(u, v) as f64;
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            out.positions.push(frame.camera.backproject(u as f64, v as f64, d));
            out.colors.push(frame.image.get(u, v));
            out.confidences.push(frame.confidence.get(u, v) as f64);
            out.frame_ids.push(frame.frame_id);
            px.push([u as u32, v as u32]);
        }
    }
    out
}

/// World-space unprojection: `R K⁻¹ [u, v, 1]ᵀ d + t`.
pub fn unproject(frame: &FrameBundle, stride: usize) -> PointCloud {
    let mut c = unproject_camera(frame, stride);
    for p in &mut c.positions {
        *p = frame.camera.pose.apply(p);
    }
    c
}

/// Indices kept by the voxelized confidence filter, in input order.
///
/// A point survives iff its confidence is at least the `theta_loc`
/// percentile of confidences in its voxel and its voxel's count is at least
/// the `theta_cnt` percentile of all voxel counts.
pub fn voxel_confidence_keep(cloud: &PointCloud, s_vox: f64, theta_loc: f64, theta_cnt: f64) -> Vec<usize> {
    if cloud.is_empty() {
        return Vec::new();
    }
    let keys: Vec<_> = cloud.positions.iter().map(|p| voxel_key(p, s_vox)).collect();
    let mut members: HashMap<_, Vec<f64>> = HashMap::new();
    for (k, c) in keys.iter().zip(&cloud.confidences) {
        members.entry(*k).or_default().push(*c);
    }
    let mut counts: Vec<f64> = members.values().map(|v| v.len() as f64).collect();
    counts.sort_by(f64::total_cmp);
    let tau_cnt = percentile_sorted(&counts, theta_cnt);
    let tau_loc: HashMap<_, f64> = members
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            (k, (percentile_sorted(&v, theta_loc), v.len() as f64))
        })
        .filter(|(_, (_, n))| *n >= tau_cnt)
        .map(|(k, (t, _))| (k, t))
        .collect();
    (0..cloud.len())
        .filter(|&i| {
            tau_loc
                .get(&keys[i])
                .is_some_and(|&t| cloud.confidences[i] >= t)
        })
        .collect()
}

pub fn voxel_confidence_filter(cloud: &PointCloud, s_vox: f64, theta_loc: f64, theta_cnt: f64) -> PointCloud {
    cloud.select(&voxel_confidence_keep(cloud, s_vox, theta_loc, theta_cnt))
}

/// Applies the filter independently to each frame's points; output keeps
/// the input order.
pub fn voxel_confidence_filter_per_frame(cloud: &PointCloud, s_vox: f64, theta_loc: f64, theta_cnt: f64) -> PointCloud {
    let mut frames: Vec<u32> = cloud.frame_ids.clone();
    frames.sort_unstable();
    frames.dedup();
    let mut keep = Vec::new();
    for f in frames {
        let idx = cloud.indices_of_frame(f);
        let sub = cloud.select(&idx);
        keep.extend(voxel_confidence_keep(&sub, s_vox, theta_loc, theta_cnt).into_iter().map(|k| idx[k]));
    }
    keep.sort_unstable();
    cloud.select(&keep)
}
