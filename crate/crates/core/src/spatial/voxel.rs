use std::collections::HashMap;

use nalgebra::Vector3;

pub type VoxelKey = [i64; 3];

/// Points bucketed by `floor(p / size)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub size: f64,
    pub cells: HashMap<VoxelKey, Vec<usize>>,
}

#[inline]
pub fn voxel_key(p: &Vector3<f64>, size: f64) -> VoxelKey {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

impl VoxelGrid {
    pub fn build(positions: &[Vector3<f64>], size: f64) -> Self {
        let mut cells: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            cells.entry(voxel_key(p, size)).or_default().push(i);
        }
        Self { size, cells }
    }

    pub fn key(&self, p: &Vector3<f64>) -> VoxelKey {
        voxel_key(p, self.size)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// One point per voxel, the one closest to the voxel centroid (lowest
    /// index on ties), returned in ascending index order.
    pub fn representatives(&self, positions: &[Vector3<f64>]) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .cells
            .values()
            .map(|idx| {
                let c = idx.iter().fold(Vector3::zeros(), |a, &i| a + positions[i]) / idx.len() as f64;
                *idx.iter()
                    .min_by(|&&a, &&b| {
                        (positions[a] - c)
                            .norm_squared()
                            .total_cmp(&(positions[b] - c).norm_squared())
                            .then(a.cmp(&b))
                    })
                    .unwrap()
            })
            .collect();
        out.sort_unstable();
        out
    }
}
