//! Rigid transforms and small linear-algebra helpers shared across the pipeline.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// World-to-camera rigid transform. The camera looks along +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds the pose of a camera centred at `center` whose world-to-camera rotation is `rotation`.
    pub fn from_center(rotation: Rotation3<f64>, center: &Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// Camera that sits at `eye` and looks towards `target`, with `up` roughly mapping to -y.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::from_center(Rotation3::from_matrix_unchecked(r), eye)
    }

    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Direction of the optical axis in world coordinates.
    pub fn view_direction(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::z()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix(),
            translation,
        }
    }

    /// Left-multiplicative update: `R ← exp(ω)·R`, `t ← t + δt`.
    pub fn perturbed(&self, omega: &Vector3<f64>, dt: &Vector3<f64>) -> Self {
        let mut rotation = Rotation3::new(*omega) * self.rotation;
        rotation.renormalize();
        Self {
            rotation,
            translation: self.translation + dt,
        }
    }

    /// Checks orthonormality and handedness of the rotation.
    pub fn is_valid(&self, tol: f64) -> bool {
        let m = self.rotation.matrix();
        let gram = m.transpose() * m - Matrix3::identity();
        gram.abs().max() < tol && (m.determinant() - 1.0).abs() < tol && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Serialized pose: quaternion `[w, x, y, z]` plus translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&RigidPose> for PoseRecord {
    fn from(p: &RigidPose) -> Self {
        let q = p.quaternion();
        Self {
            quaternion: [q.w, q.i, q.j, q.k],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Option<RigidPose> {
        let [w, x, y, z] = self.quaternion;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 || !self.translation.iter().all(|v| v.is_finite()) {
            return None;
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Some(RigidPose::from_quaternion(&uq, Vector3::from(self.translation)))
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Geodesic distance between two rotations in radians.
pub fn rotation_angle(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    let q = UnitQuaternion::from_rotation_matrix(&(a.transpose() * b));
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Angle between two vectors in radians, stable near 0 and π.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Median of a slice (upper median for even lengths); `None` when empty.
pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Some(*m)
}

/// Unit eigenvector of the smallest eigenvalue of a symmetric matrix.
pub(crate) fn smallest_eigenvector<const N: usize>(m: &nalgebra::SMatrix<f64, N, N>) -> nalgebra::SVector<f64, N> {
    let dynamic = nalgebra::DMatrix::from_column_slice(N, N, m.as_slice());
    let eig = nalgebra::SymmetricEigen::new(dynamic);
    let mut best = 0;
    for i in 1..N {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    nalgebra::SVector::<f64, N>::from_column_slice(eig.eigenvectors.column(best).normalize().as_slice())
}

/// Nearest rotation to `m` in the Frobenius sense.
pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Rotation3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    Rotation3::from_matrix_unchecked(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vector3::new(0.1, -0.2, 0.3);
        let target = Vector3::new(1.0, 0.5, -0.2);
        let pose = RigidPose::look_at(&eye, &target, &Vector3::z());
        let p = pose.transform(&target);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert!((pose.center() - eye).norm() < 1e-12);
        assert!(pose.is_valid(1e-9));
    }

    #[test]
    fn quaternion_record_round_trip() {
        let pose = RigidPose::new(
            Rotation3::new(Vector3::new(0.3, -0.2, 1.1)),
            Vector3::new(1.0, 2.0, -3.0),
        );
        let rec = PoseRecord::from(&pose);
        let back = rec.to_pose().unwrap();
        assert!(rotation_angle(&pose.rotation, &back.rotation) < 1e-12);
        assert!((pose.translation - back.translation).norm() < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let pose = RigidPose::new(
            Rotation3::new(Vector3::new(-0.4, 0.2, 0.7)),
            Vector3::new(0.5, -1.0, 2.0),
        );
        let id = pose.compose(&pose.inverse());
        assert!(id.rotation.angle() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }
}
