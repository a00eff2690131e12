//! SE(3) / se(3) arithmetic.
//!
//! Twists are stored as `(omega, v)`: rotation part first, translation part
//! second. Rotations are kept as 3x3 matrices throughout.

pub mod dual;

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use dual::{Dual, Real};

/// Below this rotation angle the exp/log maps switch to series expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Largest rotation angle accepted by [`twist_log`].
pub const LOG_MAX_ANGLE: f64 = PI - 1e-6;

/// Exponential coordinates of a rigid motion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub const ZERO: Twist = Twist {
        omega: Vector3::new(0.0, 0.0, 0.0),
        v: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            omega: Vector3::new(a[0], a[1], a[2]),
            v: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::from_array([s[0], s[1], s[2], s[3], s[4], s[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn norm_squared(&self) -> f64 {
        self.omega.norm_squared() + self.v.norm_squared()
    }
}

/// An element of SE(3): `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Frobenius norm of `RᵀR - I` and `|det R - 1|`.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let r = &self.rotation;
        (
            (r.transpose() * r - Matrix3::identity()).norm(),
            (r.determinant() - 1.0).abs(),
        )
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let (o, d) = self.orthonormality_error();
        o <= tol && d <= tol && self.translation.iter().all(|x| x.is_finite())
    }
}

/// `R p + t`.
#[inline]
pub fn apply_transform(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.apply(p)
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

type Mat3<S> = [[S; 3]; 3];

/// Generic closed-form exponential, returning `(R, t)` as plain arrays.
fn exp_generic<S: Real>(w: [S; 3], v: [S; 3]) -> (Mat3<S>, [S; 3]) {
    let th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let th2_re = th2.re();
    let (a, b, c) = if th2_re < SMALL_ANGLE * SMALL_ANGLE {
        let th4 = th2 * th2;
        (
            S::cst(1.0) - th2.scale(1.0 / 6.0) + th4.scale(1.0 / 120.0),
            S::cst(0.5) - th2.scale(1.0 / 24.0) + th4.scale(1.0 / 720.0),
            S::cst(1.0 / 6.0) - th2.scale(1.0 / 120.0) + th4.scale(1.0 / 5040.0),
        )
    } else {
        let th = th2.sqrt();
        let s = th.sin();
        let h = th.scale(0.5).sin();
        (s / th, (h * h).scale(2.0) / th2, (th - s) / (th2 * th))
    };
    let zero = S::cst(0.0);
    let k = [[zero, -w[2], w[1]], [w[2], zero, -w[0]], [-w[1], w[0], zero]];
    let mut k2 = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k2[i][j] = k[i][0] * k[0][j] + k[i][1] * k[1][j] + k[i][2] * k[2][j];
        }
    }
    let mut r = [[zero; 3]; 3];
    let mut vm = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { S::cst(1.0) } else { zero };
            r[i][j] = id + a * k[i][j] + b * k2[i][j];
            vm[i][j] = id + b * k[i][j] + c * k2[i][j];
        }
    }
    let mut t = [zero; 3];
    for i in 0..3 {
        t[i] = vm[i][0] * v[0] + vm[i][1] * v[1] + vm[i][2] * v[2];
    }
    (r, t)
}

/// SE(3) exponential map.
pub fn twist_exp(xi: &Twist) -> Result<RigidTransform> {
    if !xi.is_finite() {
        return Err(Error::NonFinite("twist"));
    }
    Ok(exp_unchecked(xi))
}

/// Exponential without the finiteness check, for hot loops.
pub fn exp_unchecked(xi: &Twist) -> RigidTransform {
    let (r, t) = exp_generic(
        [xi.omega.x, xi.omega.y, xi.omega.z],
        [xi.v.x, xi.v.y, xi.v.z],
    );
    RigidTransform {
        rotation: Matrix3::from_fn(|i, j| r[i][j]),
        translation: Vector3::new(t[0], t[1], t[2]),
    }
}

/// Exponential together with `∂R/∂ξ_i` and `∂t/∂ξ_i` for the six coordinates.
pub fn exp_with_derivatives(xi: &Twist) -> (RigidTransform, [Matrix3<f64>; 6], [Vector3<f64>; 6]) {
    let a = xi.to_array();
    let d: [Dual<6>; 6] = std::array::from_fn(|i| Dual::var(a[i], i));
    let (r, t) = exp_generic([d[0], d[1], d[2]], [d[3], d[4], d[5]]);
    let rot = Matrix3::from_fn(|i, j| r[i][j].re);
    let tr = Vector3::new(t[0].re, t[1].re, t[2].re);
    let dr = std::array::from_fn(|k| Matrix3::from_fn(|i, j| r[i][j].eps[k]));
    let dt = std::array::from_fn(|k| Vector3::new(t[0].eps[k], t[1].eps[k], t[2].eps[k]));
    (RigidTransform::new(rot, tr), dr, dt)
}

/// `exp(ξ) p` and its 3x6 Jacobian with respect to `ξ`.
pub fn apply_exp_with_jacobian(xi: &Twist, p: &Vector3<f64>) -> (Vector3<f64>, Matrix3x6<f64>) {
    let (t, dr, dt) = exp_with_derivatives(xi);
    let mut jac = Matrix3x6::zeros();
    for k in 0..6 {
        jac.set_column(k, &(dr[k] * p + dt[k]));
    }
    (t.apply(p), jac)
}

/// SE(3) logarithm. Fails for rotation angles at or beyond `π - 1e-6`.
pub fn twist_log(t: &RigidTransform) -> Result<Twist> {
    let r = &t.rotation;
    if !r.iter().chain(t.translation.iter()).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("rigid transform"));
    }
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sw = vee(&(r - r.transpose())) * 0.5;
    let sin = sw.norm();
    let th = sin.atan2(cos);
    if th >= LOG_MAX_ANGLE {
        return Err(Error::LogNearPi(th));
    }
    let th2 = th * th;
    let omega = if th < SMALL_ANGLE {
        sw * (1.0 + th2 / 6.0)
    } else {
        sw * (th / sin)
    };
    // V⁻¹ = I - K/2 + e K²
    let e = if th < 1e-3 {
        1.0 / 12.0 + th2 / 720.0 + th2 * th2 / 30240.0
    } else {
        let a = th.sin() / th;
        let h = (0.5 * th).sin();
        let b = 2.0 * h * h / th2;
        (1.0 - a / (2.0 * b)) / th2
    };
    let k = hat(&omega);
    let vinv = Matrix3::identity() - k * 0.5 + k * k * e;
    Ok(Twist::new(omega, vinv * t.translation))
}
