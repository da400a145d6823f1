//! Equidistant-polynomial fisheye camera: projection, unprojection, calibration and
//! undistortion.
//!
//! A camera-frame point at incidence angle `θ` (from the +z optical axis) and azimuth `φ`
//! lands at radius `r(θ) = θ·(1 + k1θ² + k2θ⁴ + k3θ⁶ + k4θ⁸)` in normalized units, which the
//! focal lengths and principal point then map to pixels.
//!
//! Pixel coordinates put the centre of pixel `(i, j)` at `(i, j)`.

mod calibrate;
mod files;
mod undistort;

pub use calibrate::{calibrate, Calibration, CalibrationView};
pub use files::{load_calibration_dir, parse_correspondences, read_intrinsics, write_intrinsics};
pub(crate) use undistort::sample_bilinear;
pub use undistort::undistort;

use nalgebra::{Matrix2x3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest incidence angle the model accepts (115°).
pub const THETA_MAX: f64 = 115.0 * std::f64::consts::PI / 180.0;

/// Number of intrinsic parameters optimized during calibration.
pub const NUM_INTRINSIC_PARAMS: usize = 8;

/// Fisheye intrinsics. Serialized with exactly the field names below.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, principal: (f64, f64), k: [f64; 4], width: u32, height: u32) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: principal.0,
            cy: principal.1,
            k1: k[0],
            k2: k[1],
            k3: k[2],
            k4: k[3],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.params().iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidInput("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn distortion(&self) -> [f64; 4] {
        [self.k1, self.k2, self.k3, self.k4]
    }

    /// `[fx, fy, cx, cy, k1, k2, k3, k4]`
    pub fn params(&self) -> [f64; NUM_INTRINSIC_PARAMS] {
        [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.k3, self.k4]
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        Self {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            k1: p[4],
            k2: p[5],
            k3: p[6],
            k4: p[7],
            ..*self
        }
    }

    /// Radial mapping `r(θ)` and its derivative.
    pub fn radial(&self, theta: f64) -> (f64, f64) {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.distortion();
        let poly = 1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4)));
        let dpoly = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)));
        (theta * poly, dpoly)
    }

    fn check_domain(p: &Vector3<f64>) -> Result<f64> {
        let n = p.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidInput("cannot project a zero or non-finite point".into()));
        }
        let theta = p.xy().norm().atan2(p.z);
        if theta >= THETA_MAX {
            return Err(Error::OutOfModel { theta });
        }
        Ok(theta)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        let theta = Self::check_domain(p)?;
        let rho = p.xy().norm();
        let (r, _) = self.radial(theta);
        if rho == 0.0 {
            return Ok(Vector2::new(self.cx, self.cy));
        }
        Ok(Vector2::new(
            self.cx + self.fx * r * p.x / rho,
            self.cy + self.fy * r * p.y / rho,
        ))
    }

    /// Projection plus its Jacobian with respect to the camera-frame point.
    pub fn project_with_jacobian(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
        let theta = Self::check_domain(p)?;
        let (x, y, z) = (p.x, p.y, p.z);
        let rho = p.xy().norm();
        let norm = p.norm();
        let (d, dd) = self.radial(theta);

        if rho < 1e-5 * norm {
            // Near the axis the model is a pinhole to second order in θ.
            let pixel = if rho == 0.0 {
                Vector2::new(self.cx, self.cy)
            } else {
                Vector2::new(self.cx + self.fx * d * x / rho, self.cy + self.fy * d * y / rho)
            };
            let j = Matrix2x3::new(
                self.fx / z,
                0.0,
                -self.fx * x / (z * z),
                0.0,
                self.fy / z,
                -self.fy * y / (z * z),
            );
            return Ok((pixel, j));
        }

        let r2 = norm * norm;
        let g = d / rho;
        let dtheta = Vector3::new(x * z / (rho * r2), y * z / (rho * r2), -rho / r2);
        let drho = Vector3::new(x / rho, y / rho, 0.0);
        let dg = dtheta * (dd / rho) - drho * (d / (rho * rho));

        let pixel = Vector2::new(self.cx + self.fx * g * x, self.cy + self.fy * g * y);
        let j = Matrix2x3::new(
            self.fx * (g + x * dg.x),
            self.fx * x * dg.y,
            self.fx * x * dg.z,
            self.fy * y * dg.x,
            self.fy * (g + y * dg.y),
            self.fy * y * dg.z,
        );
        Ok((pixel, j))
    }

    /// Jacobian of the projection with respect to `[fx, fy, cx, cy, k1, k2, k3, k4]`.
    pub fn intrinsics_jacobian(&self, p: &Vector3<f64>) -> Result<SMatrix<f64, 2, 8>> {
        let theta = Self::check_domain(p)?;
        let rho = p.xy().norm();
        let (d, _) = self.radial(theta);
        let (cphi, sphi) = if rho > 0.0 { (p.x / rho, p.y / rho) } else { (0.0, 0.0) };
        let mut j = SMatrix::<f64, 2, 8>::zeros();
        j[(0, 0)] = d * cphi;
        j[(1, 1)] = d * sphi;
        j[(0, 2)] = 1.0;
        j[(1, 3)] = 1.0;
        let mut tpow = theta * theta * theta;
        for i in 0..4 {
            j[(0, 4 + i)] = self.fx * cphi * tpow;
            j[(1, 4 + i)] = self.fy * sphi * tpow;
            tpow *= theta * theta;
        }
        Ok(j)
    }

    /// Unit bearing vector of a pixel; inverts the radial polynomial by Newton's method.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>> {
        if !pixel.x.is_finite() || !pixel.y.is_finite() {
            return Err(Error::InvalidInput("non-finite pixel".into()));
        }
        let mx = (pixel.x - self.cx) / self.fx;
        let my = (pixel.y - self.cy) / self.fy;
        let r_obs = (mx * mx + my * my).sqrt();
        if r_obs == 0.0 {
            return Ok(Vector3::z());
        }
        let theta = self.invert_radial(r_obs)?;
        let (s, c) = theta.sin_cos();
        Ok(Vector3::new(s * mx / r_obs, s * my / r_obs, c))
    }

    fn invert_radial(&self, r_obs: f64) -> Result<f64> {
        let mut theta = r_obs;
        for _ in 0..50 {
            let (r, dr) = self.radial(theta);
            if !(dr > 0.0) || !r.is_finite() {
                return Err(Error::Numerical(format!(
                    "radial model not invertible near θ = {theta}"
                )));
            }
            let step = (r - r_obs) / dr;
            theta -= step;
            if step.abs() <= 1e-15 * theta.abs().max(1.0) {
                return Ok(theta);
            }
        }
        Err(Error::Numerical(format!(
            "unprojection did not converge for radius {r_obs}"
        )))
    }

    /// Whether a pixel lies inside the image bounds.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= (self.width - 1) as f64 && pixel.y <= (self.height - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo(k1: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, (960.0, 540.0), [k1, 0.0, 0.0, 0.0], 1920, 1080)
    }

    #[test]
    fn optical_axis_maps_to_principal_point() {
        let px = demo(0.0).project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(960.0, 540.0));
    }

    #[test]
    fn zero_distortion_is_equidistant() {
        let p = Vector3::new(0.5f64.sin(), 0.0, 0.5f64.cos());
        let px = demo(0.0).project(&p).unwrap();
        assert!((px.x - 1260.0).abs() < 1e-9 && (px.y - 540.0).abs() < 1e-12);
    }

    #[test]
    fn radial_polynomial_with_k1() {
        // r = 0.5·(1 + 0.1·0.25) = 0.5125
        let expected: f64 = 960.0 + 600.0 * (0.5 * (1.0 + 0.1 * 0.5 * 0.5));
        assert!((expected - 1267.5).abs() < 1e-12);
        let p = Vector3::new(0.5f64.sin(), 0.0, 0.5f64.cos());
        let px = demo(0.1).project(&p).unwrap();
        assert!((px.x - 1267.5).abs() < 1e-9, "{}", px.x);
    }

    #[test]
    fn unproject_principal_point_is_axis() {
        let b = demo(0.1).unproject(&Vector2::new(960.0, 540.0)).unwrap();
        assert_eq!(b, Vector3::z());
    }

    #[test]
    fn unproject_inverts_equidistant_analytically() {
        let b = demo(0.0).unproject(&Vector2::new(1260.0, 540.0)).unwrap();
        let expected = Vector3::new(0.5f64.sin(), 0.0, 0.5f64.cos());
        assert!((b - expected).norm() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let cam = demo(0.0);
        assert!(matches!(cam.project(&Vector3::zeros()), Err(Error::InvalidInput(_))));
        let behind = Vector3::new(0.1, 0.0, -1.0);
        assert!(matches!(cam.project(&behind), Err(Error::OutOfModel { .. })));
        // 110° is still inside the model.
        let t = 110f64.to_radians();
        assert!(cam.project(&Vector3::new(t.sin(), 0.0, t.cos())).is_ok());
    }

    #[test]
    fn validation_rejects_bad_intrinsics() {
        let mut cam = demo(0.0);
        cam.fx = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = demo(0.0);
        cam.cx = 1920.0;
        assert!(cam.validate().is_err());
        assert!(demo(0.0).validate().is_ok());
    }

    fn fd_point_jacobian(cam: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let mut j = Matrix2x3::zeros();
        for k in 0..3 {
            let h = 1e-6 * p.norm();
            let mut a = *p;
            let mut b = *p;
            a[k] += h;
            b[k] -= h;
            let d = (cam.project(&a).unwrap() - cam.project(&b).unwrap()) / (2.0 * h);
            j.set_column(k, &d);
        }
        j
    }

    fn sample_point(theta: f64, phi: f64, dist: f64) -> Vector3<f64> {
        Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()) * dist
    }

    fn cam_with(k: [f64; 4]) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 610.0,
            fy: 590.0,
            cx: 955.0,
            cy: 545.0,
            k1: k[0],
            k2: k[1],
            k3: k[2],
            k4: k[3],
            width: 1920,
            height: 1080,
        }
    }

    proptest! {
        #[test]
        fn round_trip_angle(theta in 0.0..(THETA_MAX - 1e-3), phi in -std::f64::consts::PI..std::f64::consts::PI, dist in 0.1..10.0f64,
                            k1 in -0.02..0.05f64, k2 in -0.005..0.005f64) {
            // Coefficient ranges keep r(θ) monotone up to θ_max.
            let cam = cam_with([k1, k2, 0.0005, -0.0001]);
            let p = sample_point(theta, phi, dist);
            let b = cam.unproject(&cam.project(&p).unwrap()).unwrap();
            prop_assert!(crate::geometry::angle_between(&b, &p) < 1e-7);
            prop_assert!(b.dot(&(p / p.norm())) > 1.0 - 1e-9);
            let back = cam.project(&b).unwrap();
            prop_assert!((back - cam.project(&p).unwrap()).norm() < 1e-6);
        }

        #[test]
        fn projection_is_continuous(theta in 0.0..2.0f64, phi in -std::f64::consts::PI..std::f64::consts::PI, dist in 0.5..10.0f64) {
            let cam = cam_with([0.05, -0.01, 0.002, 0.0]);
            let p = sample_point(theta, phi, dist);
            let q = p + Vector3::new(1e-8, -1e-8, 1e-8);
            let d = (cam.project(&p).unwrap() - cam.project(&q).unwrap()).norm();
            prop_assert!(d < 1e-4);
        }

        #[test]
        fn point_jacobian_matches_finite_differences(theta in 0.01..1.9f64, phi in -3.1..3.1f64, dist in 0.2..5.0f64) {
            let cam = cam_with([0.05, -0.01, 0.002, 0.0005]);
            let p = sample_point(theta, phi, dist);
            let (_, j) = cam.project_with_jacobian(&p).unwrap();
            let fd = fd_point_jacobian(&cam, &p);
            let scale = fd.abs().max().max(1.0);
            prop_assert!((j - fd).abs().max() / scale < 1e-4);
        }

        #[test]
        fn intrinsics_jacobian_matches_finite_differences(theta in 0.01..1.9f64, phi in -3.1..3.1f64) {
            let cam = cam_with([0.05, -0.01, 0.002, 0.0005]);
            let p = sample_point(theta, phi, 1.3);
            let j = cam.intrinsics_jacobian(&p).unwrap();
            let base = cam.params();
            for k in 0..NUM_INTRINSIC_PARAMS {
                // The projection is affine in every intrinsic parameter, so a large step is exact.
                let h = 1e-3 * base[k].abs().max(1.0);
                let mut a = base;
                let mut b = base;
                a[k] += h;
                b[k] -= h;
                let d = (cam.with_params(&a).project(&p).unwrap() - cam.with_params(&b).project(&p).unwrap()) / (2.0 * h);
                let col = j.column(k);
                let scale = d.abs().max().max(1.0);
                prop_assert!((col - d).abs().max() / scale < 1e-4, "param {}", k);
            }
        }
    }
}
