//! Absolute pose from 2D–3D correspondences.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::seq::index::sample;
use rand::Rng;

use super::bundle::observation_jacobian;
use super::twoview::RansacSettings;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, RigidPose};
use crate::lm::{minimize, LeastSquares, LmSettings};

/// Polynomial coefficients, lowest degree first.
type Poly = Vec<f64>;

fn poly_mul(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_sub(a: &[f64], b: &[f64]) -> Poly {
    (0..a.len().max(b.len()))
        .map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn poly_scale(a: &[f64], s: f64) -> Poly {
    a.iter().map(|v| v * s).collect()
}

fn poly_eval(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Real roots of a polynomial of degree ≤ 4, via companion-matrix eigenvalues and Newton polishing.
fn real_roots(p: &[f64]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = p.len() - 1;
    while deg > 0 && p[deg].abs() <= 1e-12 * scale {
        deg -= 1;
    }
    let coeffs: Vec<f64> = p[..=deg].iter().map(|c| c / p[deg]).collect();
    let candidates: Vec<f64> = match deg {
        0 => Vec::new(),
        1 => vec![-coeffs[0]],
        _ => {
            let mut m = DMatrix::zeros(deg, deg);
            for i in 1..deg {
                m[(i, i - 1)] = 1.0;
            }
            for i in 0..deg {
                m[(i, deg - 1)] = -coeffs[i];
            }
            m.complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    };
    let deriv: Vec<f64> = (1..coeffs.len()).map(|i| i as f64 * coeffs[i]).collect();
    candidates
        .into_iter()
        .map(|mut x| {
            for _ in 0..5 {
                let d = poly_eval(&deriv, x);
                if d == 0.0 {
                    break;
                }
                x -= poly_eval(&coeffs, x) / d;
            }
            x
        })
        .filter(|x| x.is_finite())
        .collect()
}

/// Rigid transform `q ≈ R p + t` from point pairs (Kabsch).
pub fn absolute_orientation(world: &[Vector3<f64>], camera: &[Vector3<f64>]) -> Option<RigidPose> {
    let n = world.len() as f64;
    if world.len() < 3 || world.len() != camera.len() {
        return None;
    }
    let pc = world.iter().sum::<Vector3<f64>>() / n;
    let qc = camera.iter().sum::<Vector3<f64>>() / n;
    let mut m = nalgebra::Matrix3::zeros();
    for (p, q) in world.iter().zip(camera) {
        m += (q - qc) * (p - pc).transpose();
    }
    let r = nearest_rotation(&m);
    let pose = RigidPose::new(r, qc - r * pc);
    pose.is_valid(1e-6).then_some(pose)
}

/// Minimal three-point pose. `bearings` are unit rays in the camera frame.
/// Solves the law-of-cosines system by eliminating one distance ratio, which leaves a quartic.
pub fn p3p(bearings: &[Vector3<f64>; 3], points: &[Vector3<f64>; 3]) -> Vec<RigidPose> {
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let ca = bearings[1].dot(&bearings[2]);
    let cb = bearings[0].dot(&bearings[2]);
    let cg = bearings[0].dot(&bearings[1]);

    // With s2 = u·s1 and s3 = v·s1:
    //   b²(1 + u² − 2u cγ) = c²(1 + v² − 2v cβ)
    //   b²(u² + v² − 2uv cα) = a²(1 + v² − 2v cβ)
    // both quadratic in u with coefficients polynomial in v.
    let base = vec![1.0, -2.0 * cb, 1.0];
    let p2 = vec![b2];
    let p1 = vec![-2.0 * b2 * cg];
    let p0 = poly_sub(&[b2], &poly_scale(&base, c2));
    let q2 = vec![b2];
    let q1 = vec![0.0, -2.0 * b2 * ca];
    let q0 = poly_sub(&[0.0, 0.0, b2], &poly_scale(&base, a2));

    let d20 = poly_sub(&poly_mul(&p2, &q0), &poly_mul(&p0, &q2));
    let d21 = poly_sub(&poly_mul(&p2, &q1), &poly_mul(&p1, &q2));
    let d10 = poly_sub(&poly_mul(&p1, &q0), &poly_mul(&p0, &q1));
    let resultant = poly_sub(&poly_mul(&d20, &d20), &poly_mul(&d21, &d10));

    let mut out = Vec::new();
    for v in real_roots(&resultant) {
        // q2·p − p2·q is linear in u: d21·u + d20 = 0 (sign-flipped form).
        let den = poly_eval(&d21, v);
        if den.abs() < 1e-14 {
            continue;
        }
        let u = -poly_eval(&d20, v) / den;
        let k = 1.0 + v * v - 2.0 * v * cb;
        if u <= 0.0 || v <= 0.0 || k <= 0.0 {
            continue;
        }
        let s1 = (b2 / k).sqrt();
        let cam = [bearings[0] * s1, bearings[1] * (u * s1), bearings[2] * (v * s1)];
        if let Some(pose) = absolute_orientation(points, &cam) {
            out.push(pose);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnpSettings {
    pub max_reproj: f64,
    pub min_correspondences: usize,
    pub min_inlier_ratio: f64,
    pub ransac: RansacSettings,
}

impl Default for PnpSettings {
    fn default() -> Self {
        Self {
            max_reproj: 4.0,
            min_correspondences: 15,
            min_inlier_ratio: 0.25,
            ransac: RansacSettings::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PnpResult {
    pub pose: RigidPose,
    pub inliers: Vec<usize>,
}

fn reprojection_error(intr: &CameraIntrinsics, pose: &RigidPose, p: &Vector3<f64>, px: &Vector2<f64>) -> f64 {
    intr.project(&pose.transform(p))
        .map_or(f64::INFINITY, |q| (q - px).norm())
}

fn inliers_of(
    intr: &CameraIntrinsics,
    pose: &RigidPose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    max_reproj: f64,
) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| reprojection_error(intr, pose, &points[i], &pixels[i]) < max_reproj)
        .collect()
}

struct PoseProblem<'a> {
    intr: &'a CameraIntrinsics,
    points: Vec<Vector3<f64>>,
    pixels: Vec<Vector2<f64>>,
}

impl LeastSquares for PoseProblem<'_> {
    type State = RigidPose;

    fn num_increments(&self) -> usize {
        6
    }

    fn residuals(&self, pose: &RigidPose) -> Option<DVector<f64>> {
        let mut r = DVector::zeros(2 * self.points.len());
        for (i, (p, px)) in self.points.iter().zip(&self.pixels).enumerate() {
            let q = self.intr.project(&pose.transform(p)).ok()?;
            r[2 * i] = q.x - px.x;
            r[2 * i + 1] = q.y - px.y;
        }
        Some(r)
    }

    fn jacobian(&self, pose: &RigidPose) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(2 * self.points.len(), 6);
        for (i, (p, px)) in self.points.iter().zip(&self.pixels).enumerate() {
            let (_, jp, _) = observation_jacobian(self.intr, pose, p, px).ok()?;
            j.fixed_view_mut::<2, 6>(2 * i, 0).copy_from(&jp);
        }
        Some(j)
    }

    fn retract(&self, pose: &RigidPose, delta: &DVector<f64>) -> RigidPose {
        pose.perturbed(
            &Vector3::new(delta[0], delta[1], delta[2]),
            &Vector3::new(delta[3], delta[4], delta[5]),
        )
    }
}

/// Minimizes pixel reprojection error over the pose on the given correspondences.
pub fn refine_pose(
    intr: &CameraIntrinsics,
    pose: &RigidPose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
) -> RigidPose {
    let problem = PoseProblem {
        intr,
        points: points.to_vec(),
        pixels: pixels.to_vec(),
    };
    let settings = LmSettings {
        max_iterations: 50,
        ..LmSettings::default()
    };
    minimize(&problem, *pose, &settings).map_or(*pose, |o| o.state)
}

/// RANSAC over minimal three-point samples, then nonlinear refinement on the consensus set.
pub fn solve_pnp<R: Rng>(
    image: usize,
    intr: &CameraIntrinsics,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    settings: &PnpSettings,
    rng: &mut R,
) -> Result<PnpResult> {
    let n = points.len();
    let fail = |reason: String| Error::RegistrationFailure { image, reason };
    if n < settings.min_correspondences.max(3) {
        return Err(fail(format!(
            "{n} correspondences, at least {} required",
            settings.min_correspondences
        )));
    }
    let bearings: Vec<Option<Vector3<f64>>> = pixels.iter().map(|px| intr.unproject(px).ok()).collect();

    let mut best: Option<PnpResult> = None;
    let mut needed = settings.ransac.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = sample(rng, n, 3);
        let (i, j, k) = (idx.index(0), idx.index(1), idx.index(2));
        let (Some(bi), Some(bj), Some(bk)) = (bearings[i], bearings[j], bearings[k]) else {
            continue;
        };
        for pose in p3p(&[bi, bj, bk], &[points[i], points[j], points[k]]) {
            let inliers = inliers_of(intr, &pose, points, pixels, settings.max_reproj);
            if best.as_ref().is_none_or(|b| inliers.len() > b.inliers.len()) {
                needed = needed.min(settings.ransac.required_iterations(inliers.len() as f64 / n as f64, 3));
                best = Some(PnpResult { pose, inliers });
            }
        }
    }
    let Some(mut best) = best else {
        return Err(fail("no pose hypothesis".into()));
    };
    for _ in 0..2 {
        if best.inliers.len() < 3 {
            break;
        }
        let p: Vec<_> = best.inliers.iter().map(|&i| points[i]).collect();
        let q: Vec<_> = best.inliers.iter().map(|&i| pixels[i]).collect();
        let pose = refine_pose(intr, &best.pose, &p, &q);
        let inliers = inliers_of(intr, &pose, points, pixels, settings.max_reproj);
        if inliers.len() < best.inliers.len() {
            break;
        }
        best = PnpResult { pose, inliers };
    }
    let ratio = best.inliers.len() as f64 / n as f64;
    if best.inliers.len() < settings.min_correspondences || ratio < settings.min_inlier_ratio {
        return Err(fail(format!(
            "{} of {n} correspondences are inliers",
            best.inliers.len()
        )));
    }
    Ok(best)
}
