//! Relative pose from bearing correspondences.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};
use rand::seq::index::sample;
use rand::Rng;

use super::triangulate::{midpoint, Ray};
use crate::geometry::{smallest_eigenvector, RigidPose};

/// Robust-estimation limits shared by the RANSAC loops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacSettings {
    pub confidence: f64,
    pub max_iterations: usize,
}

impl Default for RansacSettings {
    fn default() -> Self {
        Self {
            confidence: 0.9999,
            max_iterations: 10_000,
        }
    }
}

impl RansacSettings {
    /// Iterations needed to draw one all-inlier sample of `sample_size` with the configured confidence.
    pub fn required_iterations(&self, inlier_ratio: f64, sample_size: i32) -> usize {
        let p = inlier_ratio.powi(sample_size);
        if p >= 1.0 {
            return 1;
        }
        if p <= 0.0 {
            return self.max_iterations;
        }
        let n = (1.0 - self.confidence).ln() / (1.0 - p).ln();
        (n.ceil() as usize).clamp(1, self.max_iterations)
    }
}

#[derive(Clone, Debug)]
pub struct EssentialEstimate {
    pub essential: Matrix3<f64>,
    pub inliers: Vec<usize>,
}

/// Linear eight-point fit of `E` with `x2ᵀ E x1 = 0`, projected onto the essential manifold.
pub fn fit_essential(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    subset: impl IntoIterator<Item = usize>,
) -> Option<Matrix3<f64>> {
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    let mut count = 0;
    for i in subset {
        let (x1, x2) = &pairs[i];
        let row = SVector::<f64, 9>::from_fn(|k, _| x2[k / 3] * x1[k % 3]);
        ata += row * row.transpose();
        count += 1;
    }
    if count < 8 {
        return None;
    }
    let e = smallest_eigenvector(&ata);
    project_essential(&Matrix3::from_row_slice(e.as_slice()))
}

/// Eight-point fit on exactly eight correspondences via the null space of the 8×9 system.
fn fit_minimal(pairs: &[(Vector3<f64>, Vector3<f64>)], idx: &[usize]) -> Option<Matrix3<f64>> {
    let mut a = [[0.0f64; 9]; 8];
    for (row, &i) in a.iter_mut().zip(idx) {
        let (x1, x2) = &pairs[i];
        for (k, v) in row.iter_mut().enumerate() {
            *v = x2[k / 3] * x1[k % 3];
        }
    }
    // Gaussian elimination with full pivoting; the one column never chosen is the free variable.
    let mut cols = [0usize, 1, 2, 3, 4, 5, 6, 7, 8];
    let mut scale = 0.0f64;
    for r in 0..8 {
        let (mut pr, mut pc, mut best) = (r, r, -1.0);
        for (i, row) in a.iter().enumerate().skip(r) {
            for (j, &col) in cols.iter().enumerate().skip(r) {
                if row[col].abs() > best {
                    (pr, pc, best) = (i, j, row[col].abs());
                }
            }
        }
        if r == 0 {
            scale = best;
        }
        if best <= 1e-12 * scale || best == 0.0 {
            return None;
        }
        a.swap(r, pr);
        cols.swap(r, pc);
        let pivot = a[r][cols[r]];
        for i in r + 1..8 {
            let f = a[i][cols[r]] / pivot;
            if f != 0.0 {
                for &c in &cols[r..] {
                    a[i][c] -= f * a[r][c];
                }
            }
        }
    }
    let mut x = [0.0f64; 9];
    x[cols[8]] = 1.0;
    for r in (0..8).rev() {
        let mut acc = 0.0;
        for &c in &cols[r + 1..] {
            acc += a[r][c] * x[c];
        }
        x[cols[r]] = -acc / a[r][cols[r]];
    }
    project_essential(&Matrix3::from_row_slice(&x))
}

/// Closest matrix with singular values `(1, 1, 0)`.
fn project_essential(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    if svd.singular_values[1] <= 1e-12 * svd.singular_values[0] {
        return None;
    }
    let u = svd.u?;
    let v_t = svd.v_t?;
    Some(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * v_t)
}

/// First-order geometric error of a bearing pair, in squared radians.
pub fn sampson_error(e: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let r = x2.dot(&ex1);
    let denom = ex1.norm_squared() + etx2.norm_squared() - 2.0 * r * r;
    if denom <= 1e-300 {
        return f64::INFINITY;
    }
    r * r / denom
}

fn count_inliers(e: &Matrix3<f64>, pairs: &[(Vector3<f64>, Vector3<f64>)], threshold_sq: f64) -> usize {
    pairs
        .iter()
        .filter(|(x1, x2)| sampson_error(e, x1, x2) < threshold_sq)
        .count()
}

fn inliers_of(e: &Matrix3<f64>, pairs: &[(Vector3<f64>, Vector3<f64>)], threshold_sq: f64) -> Vec<usize> {
    (0..pairs.len())
        .filter(|&i| sampson_error(e, &pairs[i].0, &pairs[i].1) < threshold_sq)
        .collect()
}

/// RANSAC over eight-point samples followed by a refit on the consensus set.
pub fn estimate_essential<R: Rng>(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    threshold_sq: f64,
    settings: &RansacSettings,
    rng: &mut R,
) -> Option<EssentialEstimate> {
    let n = pairs.len();
    if n < 8 {
        return None;
    }
    let mut best: Option<EssentialEstimate> = None;
    let mut needed = settings.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = sample(rng, n, 8).into_vec();
        let Some(e) = fit_minimal(pairs, &idx) else {
            continue;
        };
        let count = count_inliers(&e, pairs, threshold_sq);
        if best.as_ref().is_none_or(|b| count > b.inliers.len()) {
            needed = needed.min(settings.required_iterations(count as f64 / n as f64, 8));
            best = Some(EssentialEstimate {
                essential: e,
                inliers: inliers_of(&e, pairs, threshold_sq),
            });
        }
    }
    let best = best?;
    if best.inliers.len() < 8 {
        return None;
    }
    if let Some(e) = fit_essential(pairs, best.inliers.iter().copied()) {
        let inliers = inliers_of(&e, pairs, threshold_sq);
        if inliers.len() >= best.inliers.len() {
            return Some(EssentialEstimate { essential: e, inliers });
        }
    }
    Some(best)
}

/// Rays of a bearing pair for a second camera at `pose` relative to the first.
pub fn pair_rays(pose: &RigidPose, x1: &Vector3<f64>, x2: &Vector3<f64>) -> [Ray; 2] {
    [
        Ray {
            origin: Vector3::zeros(),
            direction: *x1,
        },
        Ray {
            origin: pose.center(),
            direction: pose.rotation.transpose() * x2,
        },
    ]
}

/// The four `(R, t)` factorizations of an essential matrix, `|t| = 1`.
pub fn decompose_essential(e: &Matrix3<f64>) -> Vec<RigidPose> {
    let svd = e.svd(true, true);
    let (Some(mut u), Some(mut v_t)) = (svd.u, svd.v_t) else {
        return Vec::new();
    };
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vector3<f64> = u.column(2).into();
    let mut out = Vec::with_capacity(4);
    for r in [u * w * v_t, u * w.transpose() * v_t] {
        let rot = Rotation3::from_matrix_unchecked(r);
        out.push(RigidPose::new(rot, t));
        out.push(RigidPose::new(rot, -t));
    }
    out
}

/// Picks the factorization placing most inlier points in front of both cameras.
/// Returns the pose and the indices that pass the test.
pub fn choose_relative_pose(
    e: &Matrix3<f64>,
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    inliers: &[usize],
) -> Option<(RigidPose, Vec<usize>)> {
    let mut best: Option<(RigidPose, Vec<usize>)> = None;
    for pose in decompose_essential(e) {
        let front: Vec<usize> = inliers
            .iter()
            .copied()
            .filter(|&i| {
                let (x1, x2) = &pairs[i];
                midpoint(&pair_rays(&pose, x1, x2)).is_some_and(|(_, d)| d.iter().all(|&v| v > 0.0))
            })
            .collect();
        if best.as_ref().is_none_or(|b| front.len() > b.1.len()) {
            best = Some((pose, front));
        }
    }
    best.filter(|b| !b.1.is_empty())
}
