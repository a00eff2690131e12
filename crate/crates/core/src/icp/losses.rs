//! Loss terms of frame-to-model alignment. Each term reports its value and
//! the gradient with respect to every deformed world point.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::spatial::NeighborIndex;

type V3 = Vector3<f64>;

/// Target surface: positions, unit normals, intensities and tangent-plane
/// intensity gradients, all indexed alike.
#[derive(Clone, Copy, Debug)]
pub struct Surface<'a> {
    pub positions: &'a [V3],
    pub normals: &'a [V3],
    pub intensities: &'a [f64],
    pub gradients: &'a [V3],
}

impl Surface<'_> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn normal_valid(&self, i: usize) -> bool {
        self.normals[i].norm_squared() > 0.5
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<V3>,
    /// Number of contributing points or pairs. Zero flags an empty term.
    pub count: usize,
}

impl LossTerm {
    pub fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![V3::zeros(); n],
            count: 0,
        }
    }
}

/// Nearest surface point of each point listed in `active`. A match is kept
/// when closer than `d_max` and its normal is valid. `ids` maps index
/// entries to surface indices when the index covers a subset.
pub fn associate(
    points: &[V3],
    active: &[usize],
    index: &NeighborIndex,
    ids: Option<&[usize]>,
    surface: &Surface,
    d_max: f64,
) -> Vec<Option<usize>> {
    let d2 = d_max * d_max;
    let found: Vec<(usize, Option<usize>)> = active
        .par_iter()
        .map(|&i| {
            let nb = index.nearest(&points[i]);
            let q = ids.map_or(nb.index, |m| m[nb.index]);
            (i, (nb.dist2 < d2 && surface.normal_valid(q)).then_some(q))
        })
        .collect();
    let mut out = vec![None; points.len()];
    for (i, q) in found {
        out[i] = q;
    }
    out
}

/// Mean squared point-to-plane distance over matched points.
pub fn loss_data(points: &[V3], assoc: &[Option<usize>], surface: &Surface) -> LossTerm {
    let mut t = LossTerm::zero(points.len());
    for (i, q) in assoc.iter().enumerate() {
        if let Some(q) = *q {
            let n = surface.normals[q];
            let r = (points[i] - surface.positions[q]).dot(&n);
            t.value += r * r;
            t.grad[i] = n * (2.0 * r);
            t.count += 1;
        }
    }
    normalize(t)
}

/// Mean squared tangent-plane color residual
/// `I(q) + dᵀ(proj_q(p) - q) - I(p)` over matched points.
pub fn loss_color(points: &[V3], intensities: &[f64], assoc: &[Option<usize>], surface: &Surface) -> LossTerm {
    let mut t = LossTerm::zero(points.len());
    for (i, q) in assoc.iter().enumerate() {
        if let Some(q) = *q {
            let n = surface.normals[q];
            let d = surface.gradients[q];
            let d_tan = d - n * n.dot(&d);
            let c = surface.intensities[q] + d_tan.dot(&(points[i] - surface.positions[q])) - intensities[i];
            t.value += c * c;
            t.grad[i] = d_tan * (2.0 * c);
            t.count += 1;
        }
    }
    normalize(t)
}

fn normalize(mut t: LossTerm) -> LossTerm {
    if t.count > 0 {
        let s = 1.0 / t.count as f64;
        t.value *= s;
        t.grad.iter_mut().for_each(|g| *g *= s);
    }
    t
}

/// One sparse correspondence: the destination is a bilinear blend of up to
/// four deformed points, the source a fixed world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrTerm {
    pub corners: [(usize, f64); 4],
    pub target: V3,
    pub w: f64,
}

impl CorrTerm {
    pub fn exact(index: usize, target: V3, w: f64) -> Self {
        Self {
            corners: [(index, 1.0), (index, 0.0), (index, 0.0), (index, 0.0)],
            target,
            w,
        }
    }

    pub fn blend(&self, points: &[V3]) -> V3 {
        self.corners.iter().fold(V3::zeros(), |a, &(i, b)| a + points[i] * b)
    }
}

/// `Σ w ‖y(t) - target‖² / Σ w`.
pub fn loss_corr(points: &[V3], terms: &[CorrTerm]) -> LossTerm {
    let mut t = LossTerm::zero(points.len());
    let wsum: f64 = terms.iter().map(|c| c.w).sum();
    if terms.is_empty() || wsum <= 0.0 {
        return t;
    }
    for c in terms {
        let r = c.blend(points) - c.target;
        t.value += c.w * r.norm_squared();
        for &(i, b) in &c.corners {
            if b != 0.0 {
                t.grad[i] += r * (2.0 * c.w * b);
            }
        }
    }
    t.count = terms.len();
    t.value /= wsum;
    t.grad.iter_mut().for_each(|g| *g /= wsum);
    t
}
