//! Static KD-tree over 3-D points with exact k-NN and radius queries.

use nalgebra::Vector3;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { dim: u8, value: f64, left: u32, right: u32 },
}

/// Exact nearest-neighbor index over a fixed position array.
///
/// Results are ordered by `(squared distance, index)`, so ties resolve
/// deterministically toward the lower index.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    points: Vec<Vector3<f64>>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

/// A query hit: original point index and squared distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

#[inline]
fn closer(a: &Neighbor, b: &Neighbor) -> bool {
    a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index)
}

/// Sorted bounded candidate list; `k` is small so insertion is cheap.
struct Knn {
    k: usize,
    max_d2: f64,
    items: Vec<Neighbor>,
}

impl Knn {
    #[inline]
    fn bound(&self) -> f64 {
        if self.items.len() < self.k {
            self.max_d2
        } else {
            self.items[self.k - 1].dist2
        }
    }

    #[inline]
    fn offer(&mut self, n: Neighbor) {
        if n.dist2 > self.max_d2 {
            return;
        }
        if self.items.len() == self.k {
            if !closer(&n, &self.items[self.k - 1]) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|x| closer(x, &n));
        self.items.insert(pos, n);
    }
}

impl NeighborIndex {
    pub fn build(positions: &[Vector3<f64>]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Empty("neighbor index positions"));
        }
        let mut ids: Vec<u32> = (0..positions.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * positions.len() / LEAF_SIZE + 1);
        build_rec(positions, &mut ids, 0, &mut nodes);
        let points = ids.iter().map(|&i| positions[i as usize]).collect();
        Ok(Self { points, ids, nodes })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, p: &Vector3<f64>) -> Neighbor {
        self.k_nearest(p, 1)[0]
    }

    /// Up to `k` nearest neighbors, nearest first.
    pub fn k_nearest(&self, p: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        self.k_nearest_where(p, k, f64::INFINITY, |_| true)
    }

    /// Up to `k` nearest neighbors within squared distance `max_d2` that
    /// satisfy `keep`.
    pub fn k_nearest_where(
        &self,
        p: &Vector3<f64>,
        k: usize,
        max_d2: f64,
        keep: impl Fn(usize) -> bool,
    ) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut knn = Knn {
            k,
            max_d2,
            items: Vec::with_capacity(k + 1),
        };
        self.knn_rec(0, p, &mut knn, &keep);
        knn.items
    }

    /// All points within distance `r`, nearest first.
    pub fn within_radius(&self, p: &Vector3<f64>, r: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        self.radius_rec(0, p, r * r, &mut out);
        out.sort_by(|a, b| {
            a.dist2
                .total_cmp(&b.dist2)
                .then(a.index.cmp(&b.index))
        });
        out
    }

    fn knn_rec(&self, node: usize, p: &Vector3<f64>, knn: &mut Knn, keep: &impl Fn(usize) -> bool) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for j in start as usize..end as usize {
                    let d2 = (self.points[j] - p).norm_squared();
                    if d2 <= knn.bound() {
                        let index = self.ids[j] as usize;
                        if keep(index) {
                            knn.offer(Neighbor { index, dist2: d2 });
                        }
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = p[dim as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near as usize, p, knn, keep);
                if diff * diff <= knn.bound() {
                    self.knn_rec(far as usize, p, knn, keep);
                }
            }
        }
    }

    fn radius_rec(&self, node: usize, p: &Vector3<f64>, r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for j in start as usize..end as usize {
                    let d2 = (self.points[j] - p).norm_squared();
                    if d2 <= r2 {
                        out.push(Neighbor {
                            index: self.ids[j] as usize,
                            dist2: d2,
                        });
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = p[dim as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.radius_rec(near as usize, p, r2, out);
                if diff * diff <= r2 {
                    self.radius_rec(far as usize, p, r2, out);
                }
            }
        }
    }
}

fn build_rec(pos: &[Vector3<f64>], ids: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let me = nodes.len() as u32;
    if ids.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + ids.len()) as u32,
        });
        return me;
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in ids.iter() {
        lo = lo.inf(&pos[i as usize]);
        hi = hi.sup(&pos[i as usize]);
    }
    let dim = (hi - lo).imax();
    if hi[dim] - lo[dim] <= 0.0 {
        // all points identical
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + ids.len()) as u32,
        });
        return me;
    }
    let mid = ids.len() / 2;
    ids.select_nth_unstable_by(mid, |&a, &b| {
        pos[a as usize][dim]
            .total_cmp(&pos[b as usize][dim])
            .then(a.cmp(&b))
    });
    let value = pos[ids[mid] as usize][dim];
    nodes.push(Node::Split {
        dim: dim as u8,
        value,
        left: 0,
        right: 0,
    });
    let (l, r) = ids.split_at_mut(mid);
    let left = build_rec(pos, l, offset, nodes);
    let right = build_rec(pos, r, offset + mid, nodes);
    nodes[me as usize] = Node::Split {
        dim: dim as u8,
        value,
        left,
        right,
    };
    me
}
