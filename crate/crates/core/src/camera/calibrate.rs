use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};

use super::{CameraIntrinsics, NUM_INTRINSIC_PARAMS};
use crate::error::{Error, Result};
use crate::geometry::{median, nearest_rotation, skew, smallest_eigenvector, RigidPose};
use crate::lm::{self, LeastSquares, LmSettings};

/// Board-to-image correspondences observed in one calibration image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationView {
    /// `(board point with z = 0, image point in pixels)`
    pub correspondences: Vec<(Vector3<f64>, Vector2<f64>)>,
}

impl CalibrationView {
    pub fn validate(&self) -> Result<()> {
        if self.correspondences.len() < 6 {
            return Err(Error::InvalidInput(format!(
                "calibration view has {} correspondences, at least 6 required",
                self.correspondences.len()
            )));
        }
        if self
            .correspondences
            .iter()
            .any(|(b, i)| b.z != 0.0 || !b.iter().chain(i.iter()).all(|v| v.is_finite()))
        {
            return Err(Error::InvalidInput(
                "board points must be finite and lie on z = 0".into(),
            ));
        }
        let pts: Vec<Vector2<f64>> = self.correspondences.iter().map(|(b, _)| b.xy()).collect();
        let mean = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
        let mut cov = nalgebra::Matrix2::zeros();
        for p in &pts {
            let d = p - mean;
            cov += d * d.transpose();
        }
        let eig = cov.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo <= 1e-10 * hi {
            return Err(Error::InvalidInput("board points are collinear".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    /// Board-to-camera pose of each view.
    pub poses: Vec<RigidPose>,
    /// Root-mean-square reprojection error (norm per point) in pixels.
    pub rms: f64,
    pub iterations: usize,
}

/// Jointly estimates intrinsics and per-view board poses.
pub fn calibrate(views: &[CalibrationView], width: u32, height: u32) -> Result<Calibration> {
    if views.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least 3 views, got {}",
            views.len()
        )));
    }
    for v in views {
        v.validate()?;
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("image size must be positive".into()));
    }

    let (intrinsics, poses) = initialize(views, width, height)?;
    let problem = CalibrationProblem { views };
    let settings = LmSettings {
        cost_floor: 1e-28,
        ..LmSettings::default()
    };
    let outcome = lm::minimize(&problem, (intrinsics, poses), &settings)
        .ok_or_else(|| Error::Numerical("initial calibration estimate is not projectable".into()))?;
    let n_points: usize = views.iter().map(|v| v.correspondences.len()).sum();
    let rms = (2.0 * outcome.cost / n_points as f64).sqrt();
    if !outcome.converged || !rms.is_finite() {
        return Err(Error::NonConvergence {
            iterations: outcome.iterations,
            cost: outcome.cost,
        });
    }
    let (intrinsics, poses) = outcome.state;
    Ok(Calibration {
        intrinsics,
        poses,
        rms,
        iterations: outcome.iterations,
    })
}

struct CalibrationProblem<'a> {
    views: &'a [CalibrationView],
}

type CalibState = (CameraIntrinsics, Vec<RigidPose>);

impl LeastSquares for CalibrationProblem<'_> {
    type State = CalibState;

    fn num_increments(&self) -> usize {
        NUM_INTRINSIC_PARAMS + 6 * self.views.len()
    }

    fn residuals(&self, (intr, poses): &CalibState) -> Option<DVector<f64>> {
        let n: usize = self.views.iter().map(|v| v.correspondences.len()).sum();
        let mut r = DVector::zeros(2 * n);
        let mut row = 0;
        for (view, pose) in self.views.iter().zip(poses) {
            for (board, pixel) in &view.correspondences {
                let px = intr.project(&pose.transform(board)).ok()?;
                r[row] = px.x - pixel.x;
                r[row + 1] = px.y - pixel.y;
                row += 2;
            }
        }
        Some(r)
    }

    fn jacobian(&self, (intr, poses): &CalibState) -> Option<DMatrix<f64>> {
        let n: usize = self.views.iter().map(|v| v.correspondences.len()).sum();
        let mut j = DMatrix::zeros(2 * n, self.num_increments());
        let mut row = 0;
        for (vi, (view, pose)) in self.views.iter().zip(poses).enumerate() {
            let col = NUM_INTRINSIC_PARAMS + 6 * vi;
            for (board, _) in &view.correspondences {
                let rotated = pose.rotation * board;
                let p = rotated + pose.translation;
                let (_, jp) = intr.project_with_jacobian(&p).ok()?;
                let ji = intr.intrinsics_jacobian(&p).ok()?;
                j.view_mut((row, 0), (2, NUM_INTRINSIC_PARAMS)).copy_from(&ji);
                let jrot: SMatrix<f64, 2, 3> = jp * (-skew(&rotated));
                j.view_mut((row, col), (2, 3)).copy_from(&jrot);
                j.view_mut((row, col + 3), (2, 3)).copy_from(&jp);
                row += 2;
            }
        }
        Some(j)
    }

    fn retract(&self, (intr, poses): &CalibState, delta: &DVector<f64>) -> CalibState {
        let mut params = intr.params();
        for (k, p) in params.iter_mut().enumerate() {
            *p += delta[k];
        }
        let poses = poses
            .iter()
            .enumerate()
            .map(|(vi, pose)| {
                let o = NUM_INTRINSIC_PARAMS + 6 * vi;
                pose.perturbed(
                    &Vector3::new(delta[o], delta[o + 1], delta[o + 2]),
                    &Vector3::new(delta[o + 3], delta[o + 4], delta[o + 5]),
                )
            })
            .collect();
        (intr.with_params(&params), poses)
    }
}

/// Homography mapping `src` to `dst` (DLT with Hartley normalization).
pub(crate) fn homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let ts = normalizer(src)?;
    let td = normalizer(dst)?;
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let s = ts * s.push(1.0);
        let d = td * d.push(1.0);
        let rows = [
            [-s.x, -s.y, -1.0, 0.0, 0.0, 0.0, d.x * s.x, d.x * s.y, d.x],
            [0.0, 0.0, 0.0, -s.x, -s.y, -1.0, d.y * s.x, d.y * s.y, d.y],
        ];
        for r in rows {
            let v = SMatrix::<f64, 9, 1>::from_row_slice(&r);
            ata += v * v.transpose();
        }
    }
    let h = smallest_eigenvector(&ata);
    let hn = Matrix3::from_row_slice(h.as_slice());
    let h = td.try_inverse()? * hn * ts;
    let s = h[(2, 2)];
    Some(if s.abs() > 1e-300 { h / s } else { h })
}

fn normalizer(pts: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let mean = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
    let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / pts.len() as f64;
    if !(spread > 0.0) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / spread;
    Some(Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0))
}

/// Pose of a planar target from a homography onto normalized (z = 1) coordinates.
pub(crate) fn pose_from_normalized_homography(h: &Matrix3<f64>) -> RigidPose {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let mut lambda = 2.0 / (h1.norm() + h2.norm());
    if h3.z * lambda < 0.0 {
        lambda = -lambda;
    }
    let r1 = h1 * lambda;
    let r2 = h2 * lambda;
    let r3 = r1.cross(&r2);
    let rotation = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r3]));
    RigidPose::new(rotation, h3 * lambda)
}

fn initialize(views: &[CalibrationView], width: u32, height: u32) -> Result<CalibState> {
    let center = Vector2::new(width as f64 / 2.0, height as f64 / 2.0);

    // Focal from the pinhole-like central part of each board.
    let (mut num, mut den) = (0.0, 0.0);
    for view in views {
        let board_pts: Vec<Vector2<f64>> = view.correspondences.iter().map(|(b, _)| b.xy()).collect();
        let centroid = board_pts.iter().sum::<Vector2<f64>>() / board_pts.len() as f64;
        let mut order: Vec<usize> = (0..board_pts.len()).collect();
        order.sort_by(|&a, &b| {
            (board_pts[a] - centroid)
                .norm()
                .total_cmp(&(board_pts[b] - centroid).norm())
        });
        let take = ((board_pts.len() as f64 * 0.2).ceil() as usize)
            .max(6)
            .min(board_pts.len());
        let src: Vec<Vector2<f64>> = order[..take].iter().map(|&i| board_pts[i]).collect();
        let dst: Vec<Vector2<f64>> = order[..take]
            .iter()
            .map(|&i| view.correspondences[i].1 - center)
            .collect();
        let Some(h) = homography(&src, &dst) else {
            continue;
        };
        // ω = diag(1/f², 1/f², 1):  a·(1/f²) + b = 0 for two constraints.
        let eqs = [
            (h[(0, 0)] * h[(0, 1)] + h[(1, 0)] * h[(1, 1)], h[(2, 0)] * h[(2, 1)]),
            (
                h[(0, 0)].powi(2) + h[(1, 0)].powi(2) - h[(0, 1)].powi(2) - h[(1, 1)].powi(2),
                h[(2, 0)].powi(2) - h[(2, 1)].powi(2),
            ),
        ];
        for (a, b) in eqs {
            num += a * b;
            den += a * a;
        }
    }
    let inv_f2 = if den > 0.0 { -num / den } else { -1.0 };
    let fallback = width.max(height) as f64 / 2.0;
    let mut focal = if inv_f2 > 0.0 { 1.0 / inv_f2.sqrt() } else { fallback };
    if !focal.is_finite() || focal <= 0.0 {
        focal = fallback;
    }

    let base = |f: f64| CameraIntrinsics::new(f, (center.x, center.y), [0.0; 4], width, height);
    let mut poses = board_poses(views, &base(focal))?;

    let mut ratios: Vec<f64> = Vec::new();
    for (view, pose) in views.iter().zip(&poses) {
        for (board, pixel) in &view.correspondences {
            let p = pose.transform(board);
            let theta = p.xy().norm().atan2(p.z);
            if theta > 1e-3 {
                ratios.push((pixel - center).norm() / theta);
            }
        }
    }
    if let Some(f) = median(&mut ratios) {
        if f.is_finite() && f > 0.0 {
            focal = f;
            poses = board_poses(views, &base(focal))?;
        }
    }
    Ok((base(focal), poses))
}

fn board_poses(views: &[CalibrationView], intr: &CameraIntrinsics) -> Result<Vec<RigidPose>> {
    views
        .iter()
        .map(|view| {
            let mut src = Vec::new();
            let mut dst = Vec::new();
            for (board, pixel) in &view.correspondences {
                let b = intr.unproject(pixel)?;
                if b.z > 0.1 {
                    src.push(board.xy());
                    dst.push(b.xy() / b.z);
                }
            }
            let h = homography(&src, &dst)
                .ok_or_else(|| Error::Degenerate("cannot fit a board homography for a calibration view".into()))?;
            Ok(pose_from_normalized_homography(&h))
        })
        .collect()
}
