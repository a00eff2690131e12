//! Neighbor search, voxel hashing and local surface estimation.

mod kdtree;
mod voxel;

pub use kdtree::{Neighbor, NeighborIndex};
pub use voxel::{voxel_key, VoxelGrid, VoxelKey};

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;

use crate::cloud::{luma, PointCloud};
use crate::error::{Error, Result};

/// Default neighborhood size for normal estimation.
pub const NORMAL_K: usize = 16;

/// Least-squares plane through a point set.
#[derive(Clone, Copy, Debug)]
pub struct LocalPlane {
    pub centroid: Vector3<f64>,
    /// Unit normal (eigenvector of the smallest eigenvalue), unoriented.
    pub normal: Vector3<f64>,
    /// Covariance eigenvalues, ascending. Covariance is normalized by the count.
    pub eigenvalues: [f64; 3],
}

impl LocalPlane {
    /// Neighborhood has rank < 2.
    pub fn is_degenerate(&self) -> bool {
        self.eigenvalues[1] <= 1e-12 * self.eigenvalues[2].max(1e-300)
    }

    /// RMS distance of the fitted points to the plane.
    pub fn rms_distance(&self) -> f64 {
        self.eigenvalues[0].max(0.0).sqrt()
    }
}

pub fn fit_plane<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<LocalPlane> {
    let pts: Vec<&Vector3<f64>> = points.into_iter().collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + *p) / n;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = *p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let normal = eig.eigenvectors.column(order[0]).into_owned();
    Some(LocalPlane {
        centroid,
        normal: normal.normalize(),
        eigenvalues: order.map(|i| eig.eigenvalues[i]),
    })
}

/// PCA normals from the `k` nearest neighbors (plus the point itself),
/// oriented toward the camera center of each point's frame.
///
/// Degenerate neighborhoods get a zero normal.
pub fn estimate_normals(
    cloud: &PointCloud,
    k: usize,
    camera_center: impl Fn(u32) -> Vector3<f64> + Sync,
) -> Result<PointCloud> {
    if cloud.len() < k + 1 {
        return Err(Error::TooFewPoints {
            needed: k + 1,
            got: cloud.len(),
        });
    }
    let index = NeighborIndex::build(&cloud.positions)?;
    let normals = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let p = cloud.positions[i];
            let nb = index.k_nearest(&p, k + 1);
            let plane = fit_plane(nb.iter().map(|n| &cloud.positions[n.index])).unwrap();
            if plane.is_degenerate() {
                return Vector3::zeros();
            }
            let to_cam = camera_center(cloud.frame_ids[i]) - p;
            if plane.normal.dot(&to_cam) < 0.0 {
                -plane.normal
            } else {
                plane.normal
            }
        })
        .collect();
    let mut out = cloud.clone();
    out.normals = Some(normals);
    Ok(out)
}

/// Per-point tangent-plane intensity gradients for the colored ICP term.
#[derive(Clone, Debug, Default)]
pub struct ColorGradient {
    pub gradients: Vec<Vector3<f64>>,
    pub intensities: Vec<f64>,
}

/// Fits `I(p) ≈ I(q) + dᵀ(proj_q(p) - q)` over the neighbors of each `q`
/// within `radius`, with `d` constrained to the tangent plane of `q`.
///
/// `index` must be built over `cloud.positions`. Points with fewer than three
/// neighbors, or without a valid normal, get a zero gradient.
pub fn estimate_color_gradients(
    cloud: &PointCloud,
    index: &NeighborIndex,
    radius: f64,
) -> Result<ColorGradient> {
    let normals = cloud
        .normals
        .as_ref()
        .ok_or(Error::Empty("normals required for color gradients"))?;
    let intensities: Vec<f64> = cloud.colors.iter().map(luma).collect();
    let gradients = (0..cloud.len())
        .into_par_iter()
        .map(|qi| {
            let n = normals[qi];
            if n.norm_squared() < 0.5 {
                return Vector3::zeros();
            }
            let q = cloud.positions[qi];
            let (t1, t2) = tangent_basis(&n);
            let mut ata = Matrix2::zeros();
            let mut atb = Vector2::zeros();
            let mut count = 0;
            for nb in index.within_radius(&q, radius) {
                if nb.index == qi {
                    continue;
                }
                let d = cloud.positions[nb.index] - q;
                let proj = d - n * d.dot(&n);
                let a = Vector2::new(proj.dot(&t1), proj.dot(&t2));
                ata += a * a.transpose();
                atb += a * (intensities[nb.index] - intensities[qi]);
                count += 1;
            }
            if count < 3 {
                return Vector3::zeros();
            }
            match ata.try_inverse() {
                Some(inv) if ata.determinant().abs() > 1e-18 => {
                    let c = inv * atb;
                    t1 * c.x + t2 * c.y
                }
                _ => Vector3::zeros(),
            }
        })
        .collect();
    Ok(ColorGradient {
        gradients,
        intensities,
    })
}

/// Orthonormal pair spanning the plane orthogonal to unit `n`.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = (helper - n * n.dot(&helper)).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_from(points: Vec<Vector3<f64>>, colors: Vec<Vector3<f64>>) -> PointCloud {
        let n = points.len();
        PointCloud {
            positions: points,
            colors,
            normals: None,
            confidences: vec![1.0; n],
            frame_ids: vec![0; n],
            pixel_coords: None,
        }
    }

    fn plane_grid(n: usize, h: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Vector3::new(i as f64 * h, j as f64 * h, 0.0));
            }
        }
        pts
    }

    #[test]
    fn planar_normals_point_to_camera() {
        let pts = plane_grid(20, 0.01);
        let c = cloud_from(pts.clone(), vec![Vector3::repeat(0.5); pts.len()]);
        let out = estimate_normals(&c, NORMAL_K, |_| Vector3::new(0.1, 0.1, 1.0)).unwrap();
        for n in out.normals.unwrap() {
            assert!((n - Vector3::z()).norm() < 1e-3);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        // Fibonacci lattice: near-uniform sampling of the unit sphere
        let n = 4000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vector3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect();
        let c = cloud_from(pts.clone(), vec![Vector3::repeat(0.5); pts.len()]);
        // the camera for every point sits outside along its radial direction
        let lookup: Vec<Vector3<f64>> = pts.iter().map(|p| p * 3.0).collect();
        let mut c2 = c.clone();
        c2.frame_ids = (0..pts.len() as u32).collect();
        let out = estimate_normals(&c2, NORMAL_K, |f| lookup[f as usize]).unwrap();
        let max_angle = out
            .normals
            .unwrap()
            .iter()
            .zip(&pts)
            .map(|(n, p)| n.dot(p).clamp(-1.0, 1.0).acos().to_degrees())
            .fold(0.0, f64::max);
        assert!(max_angle < 2.0, "max angle {max_angle}");
    }

    #[test]
    fn too_few_points_for_k() {
        let pts = plane_grid(3, 0.1);
        let c = cloud_from(pts.clone(), vec![Vector3::zeros(); pts.len()]);
        assert!(matches!(
            estimate_normals(&c, 16, |_| Vector3::z()),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn collinear_points_get_invalid_normals() {
        let pts: Vec<Vector3<f64>> = (0..30).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let c = cloud_from(pts.clone(), vec![Vector3::zeros(); pts.len()]);
        let out = estimate_normals(&c, 8, |_| Vector3::z()).unwrap();
        assert!((0..out.len()).all(|i| !out.normal_valid(i)));
    }

    #[test]
    fn normals_rotate_with_the_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vector3<f64>> = (0..600)
            .map(|_| {
                let x: f64 = rng.random_range(-0.5..0.5);
                let y: f64 = rng.random_range(-0.5..0.5);
                Vector3::new(x, y, 0.3 * x * x - 0.2 * y * y + 0.1 * x * y)
            })
            .collect();
        let cam = Vector3::new(0.0, 0.0, 2.0);
        let c = cloud_from(pts.clone(), vec![Vector3::zeros(); pts.len()]);
        let a = estimate_normals(&c, NORMAL_K, |_| cam).unwrap();
        let t = crate::lie::exp_unchecked(&crate::lie::Twist::from_array([0.3, -0.7, 1.1, 0.5, 0.2, -1.0]));
        let moved = cloud_from(pts.iter().map(|p| t.apply(p)).collect(), vec![Vector3::zeros(); pts.len()]);
        let b = estimate_normals(&moved, NORMAL_K, |_| t.apply(&cam)).unwrap();
        for (na, nb) in a.normals.unwrap().iter().zip(b.normals.unwrap()) {
            assert!((t.rotation * na - nb).norm() < 1e-6);
        }
    }

    fn plane_with_intensity(f: impl Fn(f64, f64) -> f64) -> PointCloud {
        let pts = plane_grid(15, 0.01);
        let colors = pts
            .iter()
            .map(|p| {
                // gray, so luma equals the channel value
                Vector3::repeat(f(p.x, p.y))
            })
            .collect();
        let mut c = cloud_from(pts, colors);
        c.normals = Some(vec![Vector3::z(); c.len()]);
        c
    }

    #[test]
    fn uniform_color_gives_zero_gradient() {
        let c = plane_with_intensity(|_, _| 0.4);
        let idx = NeighborIndex::build(&c.positions).unwrap();
        let g = estimate_color_gradients(&c, &idx, 0.025).unwrap();
        assert!(g.gradients.iter().all(|d| d.norm() < 1e-12));
    }

    #[test]
    fn linear_intensity_recovered() {
        let c = plane_with_intensity(|x, _| x);
        let idx = NeighborIndex::build(&c.positions).unwrap();
        let g = estimate_color_gradients(&c, &idx, 0.025).unwrap();
        for d in &g.gradients {
            assert!((d - Vector3::x()).norm() < 1e-6, "{d}");
        }
    }

    #[test]
    fn random_linear_field_on_tilted_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = Vector3::new(0.2, -0.4, 1.0).normalize();
        let (t1, t2) = tangent_basis(&n);
        let grad: Vector3<f64> = t1 * rng.random_range(-2.0..2.0) + t2 * rng.random_range(-2.0..2.0);
        let mut pts = Vec::new();
        for i in 0..12 {
            for j in 0..12 {
                pts.push(t1 * (i as f64 * 0.01) + t2 * (j as f64 * 0.012) + Vector3::new(0.1, 0.2, 0.3));
            }
        }
        let colors = pts
            .iter()
            .map(|p| Vector3::repeat(0.5 + grad.dot(p)))
            .collect();
        let mut c = cloud_from(pts, colors);
        c.normals = Some(vec![n; c.len()]);
        let idx = NeighborIndex::build(&c.positions).unwrap();
        let g = estimate_color_gradients(&c, &idx, 0.03).unwrap();
        for d in &g.gradients {
            assert!((d - grad).norm() < 1e-6);
            assert!(d.dot(&n).abs() < 1e-8);
        }
    }
}
