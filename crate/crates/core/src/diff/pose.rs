//! Optimizable rigid camera pose (world-from-camera).

use crate::error::{Result, SlamError};
use crate::math::{vec, Quat, Real};

/// World-from-camera rigid transform as quaternion + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParam<T> {
    pub rotation: Quat<T>,
    pub translation: [T; 3],
}

impl<T: Real> PoseParam<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Quat::identity(),
            translation: [T::zero(); 3],
        }
    }

    pub fn new(rotation: Quat<T>, translation: [T; 3]) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Packs as (qw, qx, qy, qz, tx, ty, tz) — the parameter-group layout.
    pub fn to_array(self) -> [T; 7] {
        [
            self.rotation.w,
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    pub fn from_array(a: [T; 7]) -> Self {
        Self {
            rotation: Quat::new(a[0], a[1], a[2], a[3]),
            translation: [a[4], a[5], a[6]],
        }
    }

    pub fn from_slice(s: &[T]) -> Self {
        debug_assert!(s.len() >= 7);
        Self::from_array([s[0], s[1], s[2], s[3], s[4], s[5], s[6]])
    }

    /// Camera center in world coordinates.
    pub fn center(self) -> [T; 3] {
        self.translation
    }

    /// World-space optical axis (camera +z).
    pub fn optical_axis(self) -> [T; 3] {
        self.rotation.rotate([T::zero(), T::zero(), T::one()])
    }

    /// Maps a camera-frame point to world.
    pub fn apply_point(self, p: [T; 3]) -> [T; 3] {
        vec::add(self.rotation.rotate(p), self.translation)
    }

    /// Rotates a camera-frame direction into world (no translation).
    pub fn apply_dir(self, d: [T; 3]) -> [T; 3] {
        self.rotation.rotate(d)
    }

    pub fn inverse(self) -> Self {
        let qi = self.rotation.normalized().conjugate();
        Self {
            rotation: qi,
            translation: vec::scale(qi.rotate(self.translation), -T::one()),
        }
    }

    /// Composition `self * rhs` (apply `rhs` first).
    pub fn compose(self, rhs: Self) -> Self {
        Self {
            rotation: self.rotation.normalized().mul(rhs.rotation.normalized()),
            translation: vec::add(
                self.rotation.rotate(rhs.translation),
                self.translation,
            ),
        }
    }

    pub fn to_f64(self) -> PoseParam<f64> {
        PoseParam {
            rotation: self.rotation.to_f64(),
            translation: vec::to_f64(self.translation),
        }
    }

    pub fn of_f64(p: PoseParam<f64>) -> Self {
        PoseParam {
            rotation: Quat::of_f64(p.rotation),
            translation: vec::of_f64(p.translation),
        }
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// 4x4 homogeneous rigid transform of the pose.
pub fn pose_to_matrix<T: Real>(p: &PoseParam<T>) -> Result<[[T; 4]; 4]> {
    let n = p.rotation.norm();
    if n <= T::of(1e-12) || !n.is_finite() {
        return Err(SlamError::invalid("pose quaternion has zero norm"));
    }
    let r = p.rotation.to_matrix();
    let mut m = [[T::zero(); 4]; 4];
    for row in 0..3 {
        for col in 0..3 {
            m[row][col] = r[row][col];
        }
        m[row][3] = p.translation[row];
    }
    m[3][3] = T::one();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseParam<f64> {
        let axis = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let q = Quat::from_axis_angle(axis, rng.random_range(-2.5..2.5));
        let t = [
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        ];
        PoseParam::new(q, t)
    }

    #[test]
    fn identity_pose_matrix() {
        let m = pose_to_matrix(&PoseParam::<f64>::identity()).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert_eq!(m[r][c], expect);
            }
        }
    }

    #[test]
    fn ninety_about_z_maps_x_to_y() {
        let p = PoseParam::new(
            Quat::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2),
            [0.0; 3],
        );
        let v = p.apply_dir([1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6 && v[2].abs() < 1e-6);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let m = pose_to_matrix(&p).unwrap();
            let mi = pose_to_matrix(&p.inverse()).unwrap();
            // m * mi should be identity within 1e-5.
            for r in 0..4 {
                for c in 0..4 {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += m[r][k] * mi[k][c];
                    }
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!((acc - expect).abs() < 1e-5, "entry ({r},{c}) = {acc}");
                }
            }
        }
    }

    #[test]
    fn rotation_block_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let m = pose_to_matrix(&p).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += m[k][i] * m[k][j];
                    }
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((acc - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_quaternion_rejected() {
        let p = PoseParam::new(Quat::new(0.0, 0.0, 0.0, 0.0), [1.0, 2.0, 3.0]);
        assert!(pose_to_matrix(&p).is_err());
    }

    #[test]
    fn roundtrip_array_layout() {
        let p = PoseParam::new(Quat::new(0.9, 0.1, -0.2, 0.3), [4.0, 5.0, 6.0]);
        assert_eq!(PoseParam::from_array(p.to_array()), p);
    }
}
