use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::ply::{PlyType, VertexTable};

/// Colored point cloud with per-point provenance.
///
/// A zero normal marks a point whose normal could not be estimated; such
/// points are excluded from point-to-plane terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub confidences: Vec<f64>,
    pub frame_ids: Vec<u32>,
    /// `(u, v)` of the source pixel.
    pub pixel_coords: Option<Vec<[u32; 2]>>,
}

pub fn luma(c: &Vector3<f64>) -> f64 {
    0.299 * c.x + 0.587 * c.y + 0.114 * c.z
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let ok = self.colors.len() == n
            && self.confidences.len() == n
            && self.frame_ids.len() == n
            && self.normals.as_ref().is_none_or(|v| v.len() == n)
            && self.pixel_coords.as_ref().is_none_or(|v| v.len() == n);
        if !ok {
            return Err(Error::Shape("point cloud arrays differ in length".into()));
        }
        if let Some(normals) = &self.normals {
            for (i, nrm) in normals.iter().enumerate() {
                let l = nrm.norm();
                if l != 0.0 && (l - 1.0).abs() > 1e-6 {
                    return Err(Error::Shape(format!("normal {i} has norm {l}")));
                }
            }
        }
        Ok(())
    }

    pub fn normal_valid(&self, i: usize) -> bool {
        self.normals
            .as_ref()
            .is_some_and(|n| n[i].norm_squared() > 0.5)
    }

    pub fn intensity(&self, i: usize) -> f64 {
        luma(&self.colors[i])
    }

    /// Subset in the given index order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            colors: idx.iter().map(|&i| self.colors[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| idx.iter().map(|&i| n[i]).collect()),
            confidences: idx.iter().map(|&i| self.confidences[i]).collect(),
            frame_ids: idx.iter().map(|&i| self.frame_ids[i]).collect(),
            pixel_coords: self
                .pixel_coords
                .as_ref()
                .map(|p| idx.iter().map(|&i| p[i]).collect()),
        }
    }

    /// Append `other`. Optional arrays survive only if both sides have them.
    pub fn extend(&mut self, other: &PointCloud) {
        let was_empty = self.is_empty();
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
        self.confidences.extend_from_slice(&other.confidences);
        self.frame_ids.extend_from_slice(&other.frame_ids);
        self.normals = match (self.normals.take(), &other.normals) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if was_empty => Some(b.clone()),
            _ => None,
        };
        self.pixel_coords = match (self.pixel_coords.take(), &other.pixel_coords) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if was_empty => Some(b.clone()),
            _ => None,
        };
    }

    pub fn concat<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> PointCloud {
        let mut out = PointCloud::default();
        for c in clouds {
            out.extend(c);
        }
        out
    }

    pub fn indices_of_frame(&self, frame: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.frame_ids[i] == frame).collect()
    }

    pub fn to_table(&self) -> VertexTable {
        let n = self.len();
        let mut t = VertexTable::new(n);
        for (k, name) in ["x", "y", "z"].iter().enumerate() {
            t.push(name, PlyType::F32, self.positions.iter().map(|p| p[k]).collect());
        }
        for (k, name) in ["red", "green", "blue"].iter().enumerate() {
            t.push(
                name,
                PlyType::U8,
                self.colors
                    .iter()
                    .map(|c| (c[k].clamp(0.0, 1.0) * 255.0).round())
                    .collect(),
            );
        }
        let zeros = vec![Vector3::zeros(); n];
        let normals = self.normals.as_ref().unwrap_or(&zeros);
        for (k, name) in ["nx", "ny", "nz"].iter().enumerate() {
            t.push(name, PlyType::F32, normals.iter().map(|p| p[k]).collect());
        }
        t.push("confidence", PlyType::F32, self.confidences.clone());
        t.push(
            "frame_id",
            PlyType::I32,
            self.frame_ids.iter().map(|&f| f as f64).collect(),
        );
        if let Some(px) = &self.pixel_coords {
            t.push("u", PlyType::I32, px.iter().map(|p| p[0] as f64).collect());
            t.push("v", PlyType::I32, px.iter().map(|p| p[1] as f64).collect());
        }
        t
    }

    pub fn from_table(t: &VertexTable) -> Result<PointCloud> {
        let (x, y, z) = (t.require("x")?, t.require("y")?, t.require("z")?);
        let positions = (0..t.len)
            .map(|i| Vector3::new(x[i], y[i], z[i]))
            .collect();
        let colors = match (t.get("red"), t.get("green"), t.get("blue")) {
            (Some(r), Some(g), Some(b)) => {
                let scale = match t.property_type("red") {
                    Some(PlyType::F32) | Some(PlyType::F64) => 1.0,
                    _ => 1.0 / 255.0,
                };
                (0..t.len)
                    .map(|i| Vector3::new(r[i], g[i], b[i]) * scale)
                    .collect()
            }
            _ => vec![Vector3::repeat(0.5); t.len],
        };
        let normals = match (t.get("nx"), t.get("ny"), t.get("nz")) {
            (Some(a), Some(b), Some(c)) => Some(
                (0..t.len)
                    .map(|i| {
                        let n = Vector3::new(a[i], b[i], c[i]);
                        // f32 storage; restore unit length
                        let l = n.norm();
                        if l > 0.5 {
                            n / l
                        } else {
                            Vector3::zeros()
                        }
                    })
                    .collect(),
            ),
            _ => None,
        };
        let confidences = t
            .get("confidence")
            .map(|c| c.to_vec())
            .unwrap_or_else(|| vec![1.0; t.len]);
        let frame_ids = t
            .get("frame_id")
            .map(|c| c.iter().map(|&f| f as u32).collect())
            .unwrap_or_else(|| vec![0; t.len]);
        let pixel_coords = match (t.get("u"), t.get("v")) {
            (Some(u), Some(v)) => Some(
                (0..t.len)
                    .map(|i| [u[i] as u32, v[i] as u32])
                    .collect(),
            ),
            _ => None,
        };
        let cloud = PointCloud {
            positions,
            colors,
            normals,
            confidences,
            frame_ids,
            pixel_coords,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn read_ply(path: &Path) -> Result<PointCloud> {
        PointCloud::from_table(&VertexTable::read(path)?)
    }
}
