//! Learnable deformation field `ℝ³ (× view) → se(3)`: a multiresolution hash
//! grid of feature vectors, trilinearly interpolated, followed by a small
//! softplus MLP. Gradients with respect to every parameter are hand-derived.

mod blob;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, Matrix6x3, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::Twist;

pub use blob::{read_blob, write_blob};

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];
const OUT: usize = 6;

/// Architecture and domain of a field. Everything needed to rebuild the
/// parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub levels: usize,
    pub features: usize,
    pub log2_table: u32,
    pub hidden: usize,
    /// View embedding width; 0 for a field without view conditioning.
    pub embed_dim: usize,
    pub views: usize,
    pub output_scale: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub coarsest_cell: f64,
    pub finest_cell: f64,
}

impl FieldSpec {
    /// Default capacity over `bbox`: 8 levels from diagonal/8 down to
    /// `finest_cell`, 2 features per level, 64-wide hidden layers.
    pub fn new(bbox_min: Vector3<f64>, bbox_max: Vector3<f64>, finest_cell: f64, log2_table: u32) -> Self {
        let diag = (bbox_max - bbox_min).norm();
        Self {
            levels: 8,
            features: 2,
            log2_table,
            hidden: 64,
            embed_dim: 0,
            views: 0,
            output_scale: 0.1,
            bbox_min: bbox_min.into(),
            bbox_max: bbox_max.into(),
            coarsest_cell: (diag / 8.0).max(finest_cell),
            finest_cell,
        }
    }

    /// Bounding box of `points` grown by `margin` on every side.
    pub fn bounding(points: &[Vector3<f64>], margin: f64, finest_cell: f64, log2_table: u32) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("field domain"));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let m = Vector3::repeat(margin);
        Ok(Self::new(lo - m, hi + m, finest_cell, log2_table))
    }

    pub fn with_views(mut self, views: usize, embed_dim: usize) -> Self {
        self.views = views;
        self.embed_dim = embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.levels > 0
            && self.features > 0
            && self.hidden > 0
            && (4..=24).contains(&self.log2_table)
            && self.finest_cell > 0.0
            && self.coarsest_cell >= self.finest_cell
            && self.output_scale.is_finite()
            && (0..3).all(|a| self.bbox_max[a] > self.bbox_min[a])
            && (self.embed_dim == 0) == (self.views == 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Field(format!("invalid field spec {self:?}")))
        }
    }

    fn table_size(&self) -> usize {
        1 << self.log2_table
    }

    fn input_dim(&self) -> usize {
        self.levels * self.features + self.embed_dim
    }
}

#[derive(Clone, Debug)]
struct Level {
    cell: f64,
    /// Cells per axis; vertices per axis is one more.
    cells: [usize; 3],
    dense: bool,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    grid: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    embed: usize,
    total: usize,
}

/// A deformation field with a flat parameter vector.
#[derive(Clone, Debug)]
pub struct DeformationField {
    spec: FieldSpec,
    levels: Vec<Level>,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations of a batch forward pass, kept for the backward pass.
pub struct Tape {
    n: usize,
    corner_idx: Vec<u32>,
    corner_w: Vec<f64>,
    views: Option<Vec<u32>>,
    x: DMatrix<f64>,
    z1: DMatrix<f64>,
    a1: DMatrix<f64>,
    z2: DMatrix<f64>,
    a2: DMatrix<f64>,
    out: Vec<[f64; 6]>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn outputs(&self) -> &[[f64; 6]] {
        &self.out
    }

    pub fn twist(&self, i: usize) -> Twist {
        Twist::from_array(self.out[i])
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl DeformationField {
    /// Builds a field with seeded initialization: grid features uniform in
    /// ±1e-4, hidden layers fan-in uniform, output head zero.
    pub fn new(spec: FieldSpec, seed: u64) -> Result<Self> {
        Self::with_grid_init(spec, seed, 1e-4)
    }

    /// As [`new`](Self::new) with grid features uniform in `±grid_init`.
    pub fn with_grid_init(spec: FieldSpec, seed: u64, grid_init: f64) -> Result<Self> {
        let mut f = Self::zeroed(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = f.layout;
        if grid_init > 0.0 {
            for x in &mut f.params[l.grid..l.w1] {
                *x = rng.random_range(-grid_init..grid_init);
            }
        }
        let h = f.spec.hidden;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let (k1, k2) = (fan(f.spec.input_dim()), fan(h));
        for x in &mut f.params[l.w1..l.w2] {
            *x = rng.random_range(-k1..k1);
        }
        for x in &mut f.params[l.w2..l.w3] {
            *x = rng.random_range(-k2..k2);
        }
        for x in &mut f.params[l.embed..l.total] {
            *x = rng.random_range(-0.1..0.1);
        }
        Ok(f)
    }

    /// All parameters zero. Used when restoring from a blob.
    pub fn zeroed(spec: FieldSpec) -> Result<Self> {
        spec.validate()?;
        let t = spec.table_size();
        let mut levels = Vec::with_capacity(spec.levels);
        for li in 0..spec.levels {
            let frac = if spec.levels == 1 {
                1.0
            } else {
                li as f64 / (spec.levels - 1) as f64
            };
            let cell = spec.coarsest_cell * (spec.finest_cell / spec.coarsest_cell).powf(frac);
            let cells: [usize; 3] =
                std::array::from_fn(|a| (((spec.bbox_max[a] - spec.bbox_min[a]) / cell).ceil() as usize).max(1));
            let verts = cells.iter().map(|c| (c + 1) as u128).product::<u128>();
            levels.push(Level {
                cell,
                cells,
                dense: verts <= t as u128,
            });
        }
        let (h, inp) = (spec.hidden, spec.input_dim());
        let grid = 0;
        let w1 = grid + spec.levels * t * spec.features;
        let b1 = w1 + h * inp;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + OUT * h;
        let embed = b3 + OUT;
        let total = embed + spec.views * spec.embed_dim;
        let layout = Layout {
            grid,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            embed,
            total,
        };
        Ok(Self {
            spec,
            levels,
            layout,
            params: vec![0.0; total],
        })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.layout.total]
    }

    /// True when the output head is exactly zero, so every query returns
    /// the zero twist.
    pub fn is_identity(&self) -> bool {
        self.params[self.layout.w3..self.layout.embed].iter().all(|&x| x == 0.0)
    }

    /// Resets the output head to zero, restoring the identity deformation.
    pub fn reset_head(&mut self) {
        let l = self.layout;
        self.params[l.w3..l.embed].iter_mut().for_each(|x| *x = 0.0);
    }

    /// A field returning `twist` everywhere: zero head weights and the bias
    /// set to the unscaled twist.
    pub fn constant(spec: FieldSpec, twist: &Twist) -> Result<Self> {
        let mut f = Self::zeroed(spec)?;
        let (b3, scale) = (f.layout.b3, f.spec.output_scale);
        for (k, x) in twist.to_array().iter().enumerate() {
            f.params[b3 + k] = x / scale;
        }
        Ok(f)
    }

    fn check_view(&self, view: Option<u32>) -> Result<()> {
        match (view, self.spec.views) {
            (None, 0) => Ok(()),
            (Some(v), n) if n > 0 && (v as usize) < n => Ok(()),
            (Some(v), 0) => Err(Error::Field(format!("view {v} given to a field without embeddings"))),
            (Some(v), n) => Err(Error::Field(format!("view {v} out of range for {n} embeddings"))),
            (None, _) => Err(Error::Field("view-conditioned field needs a view index".into())),
        }
    }

    /// Vertex index of integer lattice coordinate `c` at level `li`.
    #[inline]
    fn vertex(&self, li: usize, c: [usize; 3]) -> usize {
        let lv = &self.levels[li];
        let t = self.spec.table_size();
        let local = if lv.dense {
            c[0] + (lv.cells[0] + 1) * (c[1] + (lv.cells[1] + 1) * c[2])
        } else {
            let h = (c[0] as u64).wrapping_mul(PRIMES[0])
                ^ (c[1] as u64).wrapping_mul(PRIMES[1])
                ^ (c[2] as u64).wrapping_mul(PRIMES[2]);
            (h as usize) & (t - 1)
        };
        li * t + local
    }

    /// Corner vertex indices and trilinear weights at every level. When
    /// `dw` is given it receives `∂w/∂p` per corner (zero along clamped axes).
    fn interp(&self, p: &Vector3<f64>, idx: &mut [u32], w: &mut [f64], mut dw: Option<&mut [[f64; 3]]>) {
        for (li, lv) in self.levels.iter().enumerate() {
            let mut base = [0usize; 3];
            let mut fr = [0.0; 3];
            let mut inside = [true; 3];
            for a in 0..3 {
                let raw = (p[a] - self.spec.bbox_min[a]) / lv.cell;
                let hi = lv.cells[a] as f64;
                inside[a] = raw > 0.0 && raw < hi;
                let q = raw.clamp(0.0, hi);
                let b = (q.floor() as usize).min(lv.cells[a] - 1);
                base[a] = b;
                fr[a] = q - b as f64;
            }
            for c in 0..8 {
                let bit = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                let f1 = |a: usize| if bit[a] == 1 { fr[a] } else { 1.0 - fr[a] };
                let (wx, wy, wz) = (f1(0), f1(1), f1(2));
                let k = li * 8 + c;
                idx[k] = self.vertex(li, [base[0] + bit[0], base[1] + bit[1], base[2] + bit[2]]) as u32;
                w[k] = wx * wy * wz;
                if let Some(dw) = dw.as_deref_mut() {
                    let s = |a: usize| {
                        if !inside[a] {
                            0.0
                        } else if bit[a] == 1 {
                            1.0 / lv.cell
                        } else {
                            -1.0 / lv.cell
                        }
                    };
                    dw[k] = [s(0) * wy * wz, wx * s(1) * wz, wx * wy * s(2)];
                }
            }
        }
    }

    fn mat(&self, off: usize, r: usize, c: usize) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.params[off..off + r * c], r, c)
    }

    /// Batch forward pass. `views` must be given iff the field has embeddings.
    pub fn forward(&self, points: &[Vector3<f64>], views: Option<&[u32]>) -> Result<Tape> {
        let n = points.len();
        match views {
            Some(v) if v.len() != n => return Err(Error::Shape("one view per point".into())),
            Some(v) => v.iter().try_for_each(|&x| self.check_view(Some(x)))?,
            None => self.check_view(None)?,
        }
        if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("field query point"));
        }
        let (nl, nf, e, h) = (self.spec.levels, self.spec.features, self.spec.embed_dim, self.spec.hidden);
        let inp = self.spec.input_dim();
        let lay = self.layout;
        let mut corner_idx = vec![0u32; n * nl * 8];
        let mut corner_w = vec![0.0; n * nl * 8];
        let mut x = DMatrix::zeros(inp, n);
        for (j, p) in points.iter().enumerate() {
            let ci = &mut corner_idx[j * nl * 8..(j + 1) * nl * 8];
            let cw = &mut corner_w[j * nl * 8..(j + 1) * nl * 8];
            self.interp(p, ci, cw, None);
            let mut col = x.column_mut(j);
            for k in 0..nl * 8 {
                let li = k / 8;
                let src = lay.grid + ci[k] as usize * nf;
                for f in 0..nf {
                    col[li * nf + f] += cw[k] * self.params[src + f];
                }
            }
            if let Some(v) = views {
                let src = lay.embed + v[j] as usize * e;
                for q in 0..e {
                    col[nl * nf + q] = self.params[src + q];
                }
            }
        }
        let bias = |off: usize, m: &mut DMatrix<f64>| {
            let b = &self.params[off..off + m.nrows()];
            for mut c in m.column_iter_mut() {
                for (ci, bi) in c.iter_mut().zip(b) {
                    *ci += bi;
                }
            }
        };
        let mut z1 = DMatrix::zeros(h, n);
        z1.gemm(1.0, &self.mat(lay.w1, h, inp), &x, 0.0);
        bias(lay.b1, &mut z1);
        let a1 = z1.map(softplus);
        let mut z2 = DMatrix::zeros(h, n);
        z2.gemm(1.0, &self.mat(lay.w2, h, h), &a1, 0.0);
        bias(lay.b2, &mut z2);
        let a2 = z2.map(softplus);
        let mut o = DMatrix::zeros(OUT, n);
        o.gemm(1.0, &self.mat(lay.w3, OUT, h), &a2, 0.0);
        bias(lay.b3, &mut o);
        let s = self.spec.output_scale;
        let out = (0..n).map(|j| std::array::from_fn(|k| s * o[(k, j)])).collect();
        Ok(Tape {
            n,
            corner_idx,
            corner_w,
            views: views.map(<[u32]>::to_vec),
            x,
            z1,
            a1,
            z2,
            a2,
            out,
        })
    }

    /// Accumulates `Σ_j upstream_jᵀ ∂ξ_j/∂θ` into `grad`.
    pub fn backward(&self, tape: &Tape, upstream: &[[f64; 6]], grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.layout.total {
            return Err(Error::Shape(format!(
                "gradient buffer has {} entries, field has {}",
                grad.len(),
                self.layout.total
            )));
        }
        if upstream.len() != tape.n {
            return Err(Error::Shape("one cotangent per taped point".into()));
        }
        let n = tape.n;
        let (nl, nf, e, h) = (self.spec.levels, self.spec.features, self.spec.embed_dim, self.spec.hidden);
        let inp = self.spec.input_dim();
        let lay = self.layout;
        let s = self.spec.output_scale;
        let g_o = DMatrix::from_fn(OUT, n, |k, j| s * upstream[j][k]);
        let rowsum = |m: &DMatrix<f64>, dst: &mut [f64]| {
            for c in m.column_iter() {
                for (d, x) in dst.iter_mut().zip(c.iter()) {
                    *d += x;
                }
            }
        };
        {
            let mut gw3 = DMatrixViewMut::from_slice(&mut grad[lay.w3..lay.b3], OUT, h);
            gw3.gemm(1.0, &g_o, &tape.a2.transpose(), 1.0);
        }
        rowsum(&g_o, &mut grad[lay.b3..lay.embed]);
        let mut g_z2 = DMatrix::zeros(h, n);
        g_z2.gemm_tr(1.0, &self.mat(lay.w3, OUT, h), &g_o, 0.0);
        g_z2.zip_apply(&tape.z2, |g, z| *g *= sigmoid(z));
        {
            let mut gw2 = DMatrixViewMut::from_slice(&mut grad[lay.w2..lay.b2], h, h);
            gw2.gemm(1.0, &g_z2, &tape.a1.transpose(), 1.0);
        }
        rowsum(&g_z2, &mut grad[lay.b2..lay.w3]);
        let mut g_z1 = DMatrix::zeros(h, n);
        g_z1.gemm_tr(1.0, &self.mat(lay.w2, h, h), &g_z2, 0.0);
        g_z1.zip_apply(&tape.z1, |g, z| *g *= sigmoid(z));
        {
            let mut gw1 = DMatrixViewMut::from_slice(&mut grad[lay.w1..lay.b1], h, inp);
            gw1.gemm(1.0, &g_z1, &tape.x.transpose(), 1.0);
        }
        rowsum(&g_z1, &mut grad[lay.b1..lay.w2]);
        let mut g_x = DMatrix::zeros(inp, n);
        g_x.gemm_tr(1.0, &self.mat(lay.w1, h, inp), &g_z1, 0.0);
        for j in 0..n {
            let col = g_x.column(j);
            for k in 0..nl * 8 {
                let li = k / 8;
                let w = tape.corner_w[j * nl * 8 + k];
                if w == 0.0 {
                    continue;
                }
                let dst = lay.grid + tape.corner_idx[j * nl * 8 + k] as usize * nf;
                for f in 0..nf {
                    grad[dst + f] += w * col[li * nf + f];
                }
            }
            if let Some(v) = &tape.views {
                let dst = lay.embed + v[j] as usize * e;
                for q in 0..e {
                    grad[dst + q] += col[nl * nf + q];
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, p: &Vector3<f64>, view: Option<u32>) -> Result<Twist> {
        let views = view.map(|v| [v]);
        Ok(self.forward(std::slice::from_ref(p), views.as_ref().map(|v| &v[..]))?.twist(0))
    }

    pub fn eval_batch(&self, points: &[Vector3<f64>], views: Option<&[u32]>) -> Result<Vec<Twist>> {
        let tape = self.forward(points, views)?;
        Ok(tape.out.iter().map(|a| Twist::from_array(*a)).collect())
    }

    /// Evaluates at `p`, accumulates `upstreamᵀ ∂ξ/∂θ` into `grad`, and
    /// optionally returns the 6x3 Jacobian `∂ξ/∂p`.
    pub fn eval_with_grad(
        &self,
        p: &Vector3<f64>,
        view: Option<u32>,
        upstream: &[f64; 6],
        grad: &mut [f64],
        want_dp: bool,
    ) -> Result<(Twist, Option<Matrix6x3<f64>>)> {
        let views = view.map(|v| [v]);
        let tape = self.forward(std::slice::from_ref(p), views.as_ref().map(|v| &v[..]))?;
        self.backward(&tape, &[*upstream], grad)?;
        let dp = want_dp.then(|| self.input_jacobian(p, &tape));
        Ok((tape.twist(0), dp))
    }

    fn input_jacobian(&self, p: &Vector3<f64>, tape: &Tape) -> Matrix6x3<f64> {
        let (nl, nf, h) = (self.spec.levels, self.spec.features, self.spec.hidden);
        let inp = self.spec.input_dim();
        let lay = self.layout;
        let mut idx = vec![0u32; nl * 8];
        let mut w = vec![0.0; nl * 8];
        let mut dw = vec![[0.0; 3]; nl * 8];
        self.interp(p, &mut idx, &mut w, Some(&mut dw));
        let mut dx = DMatrix::<f64>::zeros(inp, 3);
        for k in 0..nl * 8 {
            let li = k / 8;
            let src = lay.grid + idx[k] as usize * nf;
            for f in 0..nf {
                for a in 0..3 {
                    dx[(li * nf + f, a)] += dw[k][a] * self.params[src + f];
                }
            }
        }
        let d1 = tape.z1.column(0).map(sigmoid);
        let d2 = tape.z2.column(0).map(sigmoid);
        let mut m = self.mat(lay.w1, h, inp) * dx;
        for (r, d) in d1.iter().enumerate() {
            m.row_mut(r).scale_mut(*d);
        }
        let mut m2 = self.mat(lay.w2, h, h) * m;
        for (r, d) in d2.iter().enumerate() {
            m2.row_mut(r).scale_mut(*d);
        }
        let out = self.mat(lay.w3, OUT, h) * m2 * self.spec.output_scale;
        SMatrix::from_fn(|i, j| out[(i, j)])
    }

    /// Total-variation regularizer: mean over points of the squared twist
    /// differences to the six axis neighbours at distance `s_vox`. When
    /// `grad` is given, `scale · ∂L/∂θ` is accumulated into it.
    pub fn tv_loss(
        &self,
        points: &[Vector3<f64>],
        views: Option<&[u32]>,
        s_vox: f64,
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<f64> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Empty("tv points"));
        }
        let mut q = Vec::with_capacity(7 * n);
        q.extend_from_slice(points);
        for a in 0..3 {
            for sgn in [1.0, -1.0] {
                let mut off = Vector3::zeros();
                off[a] = sgn * s_vox;
                q.extend(points.iter().map(|p| p + off));
            }
        }
        let qv: Option<Vec<u32>> = views.map(|v| v.iter().copied().cycle().take(7 * n).collect());
        let tape = self.forward(&q, qv.as_deref())?;
        let out = &tape.out;
        let mut loss = 0.0;
        let mut up = vec![[0.0; 6]; 7 * n];
        let inv_n = 1.0 / n as f64;
        for k in 1..7 {
            for j in 0..n {
                let (a, b) = (out[j], out[k * n + j]);
                for c in 0..6 {
                    let d = a[c] - b[c];
                    loss += d * d;
                    up[j][c] += 2.0 * d * inv_n;
                    up[k * n + j][c] -= 2.0 * d * inv_n;
                }
            }
        }
        if let Some((g, scale)) = grad {
            if scale != 0.0 {
                up.iter_mut().flatten().for_each(|x| *x *= scale);
                self.backward(&tape, &up, g)?;
            }
        }
        Ok(loss * inv_n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_field(seed: u64) -> DeformationField {
        let spec = FieldSpec::new(Vector3::repeat(-1.0), Vector3::repeat(1.0), 0.1, 10);
        DeformationField::new(spec, seed).unwrap()
    }

    fn randomize_head(f: &mut DeformationField, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = f.layout;
        for x in &mut f.params[l.w3..l.embed] {
            *x = rng.random_range(-0.5..0.5);
        }
        for x in &mut f.params[l.grid..l.w1] {
            *x = rng.random_range(-0.3..0.3);
        }
    }

    #[test]
    fn fresh_field_is_zero_everywhere() {
        let f = unit_field(3);
        assert!(f.is_identity());
        for p in [Vector3::zeros(), Vector3::new(0.3, -0.7, 0.9), Vector3::repeat(5.0)] {
            assert_eq!(f.eval(&p, None).unwrap(), Twist::ZERO);
        }
    }

    #[test]
    fn evaluation_is_bitwise_deterministic() {
        let mut f = unit_field(1);
        randomize_head(&mut f, 2);
        let p = Vector3::new(0.1234, -0.4321, 0.777);
        let a = f.eval(&p, None).unwrap().to_array();
        let b = f.eval(&p, None).unwrap().to_array();
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        let batch = f.eval_batch(&[Vector3::zeros(), p], None).unwrap();
        assert_eq!(batch[1].to_array().map(f64::to_bits), a.map(f64::to_bits));
    }

    #[test]
    fn coarse_levels_are_dense_and_fine_levels_hash() {
        let f = unit_field(0);
        assert!(f.levels[0].dense);
        assert!(!f.levels.last().unwrap().dense);
        assert!((f.levels[0].cell - (12f64).sqrt() / 8.0).abs() < 1e-12);
        assert!((f.levels.last().unwrap().cell - 0.1).abs() < 1e-12);
    }

    #[test]
    fn view_misuse_is_rejected() {
        let f = unit_field(0);
        assert!(f.eval(&Vector3::zeros(), Some(0)).is_err());
        let spec = FieldSpec::new(Vector3::repeat(-1.0), Vector3::repeat(1.0), 0.1, 10).with_views(3, 8);
        let g = DeformationField::new(spec, 0).unwrap();
        assert!(g.eval(&Vector3::zeros(), None).is_err());
        assert!(g.eval(&Vector3::zeros(), Some(3)).is_err());
        assert!(g.eval(&Vector3::zeros(), Some(2)).is_ok());
    }

    #[test]
    fn wrong_gradient_buffer_is_rejected() {
        let f = unit_field(0);
        let mut g = vec![0.0; 3];
        assert!(f.eval_with_grad(&Vector3::zeros(), None, &[1.0; 6], &mut g, false).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut f = unit_field(5);
        randomize_head(&mut f, 6);
        let mut g = f.zero_grad();
        f.eval_with_grad(&Vector3::new(0.2, 0.1, -0.3), None, &[0.0; 6], &mut g, false).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_point_gradients() {
        let mut f = unit_field(7);
        randomize_head(&mut f, 8);
        let pts = [Vector3::new(0.1, 0.2, 0.3), Vector3::new(-0.5, 0.4, 0.0), Vector3::new(0.9, -0.9, 0.2)];
        let ups = [[1.0, 0.0, -2.0, 0.5, 0.3, 0.1], [0.2; 6], [-1.0, 1.0, 0.0, 0.0, 2.0, 0.4]];
        let mut gsum = f.zero_grad();
        for (p, u) in pts.iter().zip(&ups) {
            f.eval_with_grad(p, None, u, &mut gsum, false).unwrap();
        }
        let mut gb = f.zero_grad();
        let tape = f.forward(&pts, None).unwrap();
        f.backward(&tape, &ups, &mut gb).unwrap();
        let err = gsum.iter().zip(&gb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let mut f = unit_field(9);
        randomize_head(&mut f, 10);
        let p = Vector3::new(0.123, -0.217, 0.345);
        let mut g = f.zero_grad();
        let (_, j) = f.eval_with_grad(&p, None, &[0.0; 6], &mut g, true).unwrap();
        let j = j.unwrap();
        let h = 1e-6;
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = h;
            let fp = f.eval(&(p + e), None).unwrap().to_array();
            let fm = f.eval(&(p - e), None).unwrap().to_array();
            for k in 0..6 {
                let fd = (fp[k] - fm[k]) / (2.0 * h);
                assert!((fd - j[(k, a)]).abs() < 1e-6 * (1.0 + fd.abs()), "{k},{a}: {fd} vs {}", j[(k, a)]);
            }
        }
    }

    #[test]
    fn tv_of_constant_field_is_zero() {
        let f = unit_field(11);
        let pts = vec![Vector3::new(0.1, 0.2, 0.3); 4];
        assert_eq!(f.tv_loss(&pts, None, 0.05, None).unwrap(), 0.0);
    }
}
