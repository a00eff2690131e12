//! Splat initialization from the canonical cloud.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::ply::{PlyType, VertexTable};
use crate::spatial::{tangent_basis, NeighborIndex};

type V3 = Vector3<f64>;

/// Degree-0 real spherical harmonic, `1 / (2√π)`.
pub const SH_C0: f64 = 0.282_094_791_773_878_1;

pub fn rgb_to_sh0(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

pub fn sh0_to_rgb(f: f64) -> f64 {
    f * SH_C0 + 0.5
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    pub position: V3,
    pub normal: V3,
    /// Columns are the two disk axes and the normal.
    pub frame: Matrix3<f64>,
    pub scale: [f64; 2],
    pub opacity: f64,
    pub sh0: [f64; 3],
}

impl Splat {
    /// Unit quaternion of the tangent frame, `(w, x, y, z)`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.frame));
        [q.w, q.i, q.j, q.k]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatSet {
    pub splats: Vec<Splat>,
}

impl SplatSet {
    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn to_table(&self) -> VertexTable {
        let mut t = VertexTable::new(self.len());
        let col = |f: &dyn Fn(&Splat) -> f64| self.splats.iter().map(f).collect::<Vec<f64>>();
        for (a, name) in ["x", "y", "z"].iter().enumerate() {
            t.push(name, PlyType::F32, col(&|s| s.position[a]));
        }
        for (a, name) in ["nx", "ny", "nz"].iter().enumerate() {
            t.push(name, PlyType::F32, col(&|s| s.normal[a]));
        }
        t.push("scale_0", PlyType::F32, col(&|s| s.scale[0]));
        t.push("scale_1", PlyType::F32, col(&|s| s.scale[1]));
        let quats: Vec<[f64; 4]> = self.splats.iter().map(Splat::quaternion).collect();
        for a in 0..4 {
            t.push(&format!("rot_{a}"), PlyType::F32, quats.iter().map(|q| q[a]).collect());
        }
        t.push("opacity", PlyType::F32, col(&|s| s.opacity));
        for a in 0..3 {
            t.push(&format!("f_dc_{a}"), PlyType::F32, col(&|s| s.sh0[a]));
        }
        t
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }
}

/// Uniformly subsamples to `target_count` points and turns each into a
/// surface-aligned disk whose two scales are the mean distance to its `k`
/// nearest neighbours within the subsample.
pub fn export_splats(cloud: &PointCloud, target_count: usize, k: usize, opacity: f64, seed: u64) -> Result<SplatSet> {
    let normals = cloud.normals.as_ref().ok_or(Error::Empty("normals for splat export"))?;
    if cloud.len() < k + 1 {
        return Err(Error::TooFewPoints { needed: k + 1, got: cloud.len() });
    }
    let mut idx: Vec<usize> = if target_count >= cloud.len() {
        (0..cloud.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, cloud.len(), target_count).into_vec()
    };
    idx.sort_unstable();
    if idx.len() < k + 1 {
        return Err(Error::TooFewPoints { needed: k + 1, got: idx.len() });
    }
    let pts: Vec<V3> = idx.iter().map(|&i| cloud.positions[i]).collect();
    let index = NeighborIndex::build(&pts)?;
    let splats = idx
        .par_iter()
        .zip(&pts)
        .map(|(&i, p)| {
            let n = normals[i];
            if n.norm_squared() == 0.0 {
                return Err(Error::Frame { frame: cloud.frame_ids[i], msg: format!("point {i} has no normal") });
            }
            let nn = index.k_nearest(p, k + 1);
            let scale = nn.iter().skip(1).map(|h| h.dist2.sqrt()).sum::<f64>() / k as f64;
            let (t1, t2) = tangent_basis(&n);
            let c = cloud.colors[i];
            Ok(Splat {
                position: *p,
                normal: n,
                frame: Matrix3::from_columns(&[t1, t2, n]),
                scale: [scale; 2],
                opacity,
                sh0: [rgb_to_sh0(c.x), rgb_to_sh0(c.y), rgb_to_sh0(c.z)],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplatSet { splats })
}
