//! Scalar abstraction and small fixed-size linear algebra used throughout the
//! pipeline.
//!
//! All differentiable code is generic over [`Real`] so the same kernels run in
//! f32 for production and in f64 for gradient verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar type for the differentiable pipeline. Implemented for `f32`/`f64`.
pub trait Real:
    Float + Sum + Debug + Display + Send + Sync + num_traits::NumAssign + 'static
{
    /// Lossy conversion from f64 (exact for f64, rounded for f32).
    fn of(x: f64) -> Self;
    /// Widening conversion to f64.
    fn to_f64(self) -> f64;
    /// Error function; evaluated in f64 for accuracy in both modes.
    fn erf(self) -> Self;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// 3-vector helpers over `[T; 3]`.
pub mod vec {
    use super::Real;

    pub type Vec3<T> = [T; 3];

    #[inline]
    pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    #[inline]
    pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    #[inline]
    pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    #[inline]
    pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    #[inline]
    pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    #[inline]
    pub fn norm<T: Real>(a: Vec3<T>) -> T {
        dot(a, a).sqrt()
    }

    #[inline]
    pub fn normalize<T: Real>(a: Vec3<T>) -> Vec3<T> {
        let n = norm(a);
        scale(a, T::one() / n)
    }

    #[inline]
    pub fn dist<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
        norm(sub(a, b))
    }

    #[inline]
    pub fn to_f64<T: Real>(a: Vec3<T>) -> [f64; 3] {
        [a[0].to_f64(), a[1].to_f64(), a[2].to_f64()]
    }

    #[inline]
    pub fn of_f64<T: Real>(a: [f64; 3]) -> Vec3<T> {
        [T::of(a[0]), T::of(a[1]), T::of(a[2])]
    }
}

/// Unit-norm-by-convention quaternion, scalar part first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quat<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn from_axis_angle(axis: vec::Vec3<T>, angle: T) -> Self {
        let half = angle * T::of(0.5);
        let a = vec::normalize(axis);
        let s = half.sin();
        Self::new(half.cos(), a[0] * s, a[1] * s, a[2] * s)
    }

    #[inline]
    pub fn norm(self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    #[inline]
    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    #[inline]
    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, r: Self) -> Self {
        Self::new(
            self.w * r.w - self.x * r.x - self.y * r.y - self.z * r.z,
            self.w * r.x + self.x * r.w + self.y * r.z - self.z * r.y,
            self.w * r.y - self.x * r.z + self.y * r.w + self.z * r.x,
            self.w * r.z + self.x * r.y - self.y * r.x + self.z * r.w,
        )
    }

    #[inline]
    pub fn dot(self, r: Self) -> T {
        self.w * r.w + self.x * r.x + self.y * r.y + self.z * r.z
    }

    /// Rotate a vector; the quaternion is normalized internally, so callers
    /// may pass a slightly drifted parameter vector.
    pub fn rotate(self, v: vec::Vec3<T>) -> vec::Vec3<T> {
        let q = self.normalized();
        let u = [q.x, q.y, q.z];
        let t = vec::scale(vec::cross(u, v), T::of(2.0));
        vec::add(v, vec::add(vec::scale(t, q.w), vec::cross(u, t)))
    }

    /// Rotation matrix of the normalized quaternion, row-major.
    pub fn to_matrix(self) -> [[T; 3]; 3] {
        let q = self.normalized();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        let two = T::of(2.0);
        [
            [
                T::one() - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                T::one() - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                T::one() - two * (x * x + y * y),
            ],
        ]
    }

    /// Rotates `v` by the normalized quaternion and returns the Jacobian of
    /// the rotated vector with respect to the four raw components (w, x, y, z),
    /// including the normalization chain. Layout: `jac[c]` is d(out)/d(component c).
    pub fn rotate_with_jacobian(self, v: vec::Vec3<T>) -> (vec::Vec3<T>, [[T; 3]; 4]) {
        let n = self.norm();
        let q = Quat::new(self.w / n, self.x / n, self.y / n, self.z / n);
        let u = [q.x, q.y, q.z];
        let two = T::of(2.0);

        let uxv = vec::cross(u, v);
        let out = vec::add(
            v,
            vec::add(vec::scale(uxv, two * q.w), vec::scale(vec::cross(u, uxv), two)),
        );

        // d(out)/d(unit quaternion): dw column, then the 3x3 block over u.
        // R(q)v = v + 2w (u x v) + 2 u x (u x v)
        //       = v + 2w (u x v) + 2 (u (u.v) - v (u.u))
        let dw = vec::scale(uxv, two);
        let udotv = vec::dot(u, v);
        let mut du = [[T::zero(); 3]; 3]; // du[r][c] = d(out_r)/d(u_c)
        for r in 0..3 {
            for c in 0..3 {
                let mut g = u[r] * v[c] - two * v[r] * u[c];
                if r == c {
                    g += udotv;
                }
                du[r][c] = g * two;
            }
        }
        // -2w [v]_x contribution from d(u x v)/du = -[v]_x
        let wvx = [
            [T::zero(), v[2], -v[1]],
            [-v[2], T::zero(), v[0]],
            [v[1], -v[0], T::zero()],
        ];
        for r in 0..3 {
            for c in 0..3 {
                du[r][c] += two * q.w * wvx[r][c];
            }
        }

        // Chain through normalization: d(q_hat)/d(q_raw) = (I - q_hat q_hat^T)/n.
        let qh = [q.w, q.x, q.y, q.z];
        let jh = [
            [dw[0], du[0][0], du[0][1], du[0][2]],
            [dw[1], du[1][0], du[1][1], du[1][2]],
            [dw[2], du[2][0], du[2][1], du[2][2]],
        ];
        let mut jac = [[T::zero(); 3]; 4];
        for raw in 0..4 {
            for r in 0..3 {
                let mut acc = T::zero();
                for k in 0..4 {
                    let proj = if k == raw { T::one() } else { T::zero() };
                    acc += jh[r][k] * ((proj - qh[k] * qh[raw]) / n);
                }
                jac[raw][r] = acc;
            }
        }
        (out, jac)
    }

    /// Quaternion of a rotation matrix (row-major, orthonormal).
    pub fn from_matrix(m: &[[T; 3]; 3]) -> Self {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > T::zero() {
            let s = (tr + T::one()).sqrt() * T::of(2.0);
            Quat::new(
                s * T::of(0.25),
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (T::one() + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::of(2.0);
            Quat::new(
                (m[2][1] - m[1][2]) / s,
                s * T::of(0.25),
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (T::one() + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::of(2.0);
            Quat::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                s * T::of(0.25),
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (T::one() + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::of(2.0);
            Quat::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                s * T::of(0.25),
            )
        };
        q.normalized()
    }

    /// Geodesic angle to another rotation, in radians.
    pub fn angle_to(self, other: Self) -> T {
        let d = self.normalized().dot(other.normalized()).abs();
        let d = if d > T::one() { T::one() } else { d };
        T::of(2.0) * d.acos()
    }

    pub fn to_f64(self) -> Quat<f64> {
        Quat::new(self.w.to_f64(), self.x.to_f64(), self.y.to_f64(), self.z.to_f64())
    }

    pub fn of_f64(q: Quat<f64>) -> Self {
        Quat::new(T::of(q.w), T::of(q.x), T::of(q.y), T::of(q.z))
    }
}

pub fn degrees<T: Real>(rad: T) -> T {
    rad * T::of(180.0 / std::f64::consts::PI)
}

pub fn radians<T: Real>(deg: T) -> T {
    deg * T::of(std::f64::consts::PI / 180.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_rotate_jacobian(q: Quat<f64>, v: [f64; 3]) -> [[f64; 3]; 4] {
        let h = 1e-6;
        let mut jac = [[0.0; 3]; 4];
        for c in 0..4 {
            let mut qp = q;
            let mut qm = q;
            match c {
                0 => {
                    qp.w += h;
                    qm.w -= h;
                }
                1 => {
                    qp.x += h;
                    qm.x -= h;
                }
                2 => {
                    qp.y += h;
                    qm.y -= h;
                }
                _ => {
                    qp.z += h;
                    qm.z -= h;
                }
            }
            let rp = qp.rotate(v);
            let rm = qm.rotate(v);
            for r in 0..3 {
                jac[c][r] = (rp[r] - rm[r]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn rotate_matches_matrix() {
        let q = Quat::from_axis_angle([0.3, -1.0, 0.5], 1.1f64);
        let v = [0.2, -0.7, 1.4];
        let m = q.to_matrix();
        let rv = q.rotate(v);
        for r in 0..3 {
            let mv = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2];
            assert!((mv - rv[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let cases = [
            (Quat::new(1.0, 0.0, 0.0, 0.0), [1.0, 2.0, 3.0]),
            (Quat::from_axis_angle([0.0, 0.0, 1.0], 0.5), [1.0, 0.0, 0.0]),
            (Quat::new(0.9, -0.2, 0.35, 0.1), [-0.3, 0.8, 0.55]),
            // deliberately non-unit
            (Quat::new(1.4, 0.3, -0.9, 0.2), [0.05, -1.2, 0.7]),
        ];
        for (q, v) in cases {
            let (_, jac) = q.rotate_with_jacobian(v);
            let fd = fd_rotate_jacobian(q, v);
            for c in 0..4 {
                for r in 0..3 {
                    let denom = fd[c][r].abs().max(1e-8);
                    assert!(
                        (jac[c][r] - fd[c][r]).abs() / denom < 1e-6,
                        "component ({c},{r}): analytic {} vs fd {}",
                        jac[c][r],
                        fd[c][r]
                    );
                }
            }
        }
    }

    #[test]
    fn ninety_degrees_about_z() {
        let q = Quat::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let r = q.rotate([1.0, 0.0, 0.0]);
        assert!((r[0]).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12 && r[2].abs() < 1e-12);
    }

    #[test]
    fn angle_between_rotations() {
        let a = Quat::from_axis_angle([0.0, 1.0, 0.0], 0.0f64);
        let b = Quat::from_axis_angle([0.0, 1.0, 0.0], 0.25);
        assert!((a.angle_to(b) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn matrix_quaternion_roundtrip() {
        let cases = [
            Quat::identity(),
            Quat::from_axis_angle([1.0, 0.0, 0.0], 3.0f64),
            Quat::from_axis_angle([0.0, 1.0, 0.0], -2.9),
            Quat::from_axis_angle([0.3, -0.7, 0.64], 1.8),
            Quat::from_axis_angle([-0.5, 0.5, 0.5], 3.1),
        ];
        for q in cases {
            let back = Quat::from_matrix(&q.to_matrix());
            assert!(q.angle_to(back) < 1e-9, "{q:?} vs {back:?}");
        }
    }
}
