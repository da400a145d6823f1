use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use super::filter::neighbor_count;
use super::kdtree::KdTree;
use super::PointCloud;
use crate::error::{Error, Result};

/// Smallest cloud accepted by [`estimate_normals`].
pub const MIN_NORMAL_POINTS: usize = 30;

#[derive(Clone, Debug)]
pub struct NormalEstimate {
    /// Points with a well-defined normal, each carrying its unit normal (sign arbitrary).
    pub cloud: PointCloud,
    /// Input indices whose neighbourhood covariance had rank below two.
    pub invalid: Vec<usize>,
}

/// Per-point PCA normals over the `⌈k·fraction⌉` nearest neighbours, `k` the cloud size.
pub fn estimate_normals(cloud: &PointCloud, fraction: f64) -> Result<NormalEstimate> {
    let n = cloud.len();
    if n < MIN_NORMAL_POINTS {
        return Err(Error::InvalidInput(format!(
            "normal estimation needs at least {MIN_NORMAL_POINTS} points, got {n}"
        )));
    }
    let k = neighbor_count(n, fraction).max(2).min(n - 1);
    let tree = KdTree::new(&cloud.points);
    let normals: Vec<Option<Vector3<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nn = tree.nearest(&cloud.points[i], k, Some(i));
            let pts: Vec<Vector3<f64>> = nn.iter().map(|x| cloud.points[x.index]).collect();
            pca_normal(&pts)
        })
        .collect();
    let valid: Vec<usize> = (0..n).filter(|&i| normals[i].is_some()).collect();
    let invalid: Vec<usize> = (0..n).filter(|&i| normals[i].is_none()).collect();
    let mut out = cloud.select(&valid);
    out.normals = Some(valid.iter().map(|&i| normals[i].expect("filtered")).collect());
    Ok(NormalEstimate { cloud: out, invalid })
}

/// Eigenvector of the smallest covariance eigenvalue, or `None` for a rank-deficient spread.
fn pca_normal(points: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    if !(largest > 0.0) || eig.eigenvalues[order[1]] <= 1e-12 * largest {
        return None;
    }
    let v: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    Some(v.normalize())
}

/// Flips each normal to face the nearest camera that observed its point, or the nearest
/// camera overall when visibility is unknown.
pub fn orient_normals(cloud: &PointCloud, cameras: &[(usize, Vector3<f64>)]) -> Result<PointCloud> {
    if cameras.is_empty() {
        return Err(Error::InvalidInput(
            "normal orientation needs at least one camera".into(),
        ));
    }
    let Some(normals) = &cloud.normals else {
        return Err(Error::InvalidInput("point cloud has no normals to orient".into()));
    };
    let nearest = |p: &Vector3<f64>, allowed: Option<&[usize]>| {
        cameras
            .iter()
            .filter(|(id, _)| allowed.is_none_or(|ids| ids.contains(id)))
            .map(|(_, c)| *c)
            .min_by(|a, b| (a - p).norm_squared().total_cmp(&(b - p).norm_squared()))
    };
    let oriented: Vec<Vector3<f64>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let p = &cloud.points[i];
            let seen = cloud.visibility.as_ref().map(|v| v[i].as_slice());
            let c = seen
                .and_then(|ids| nearest(p, Some(ids)))
                .or_else(|| nearest(p, None))
                .expect("cameras is non-empty");
            let m = normals[i];
            if m.dot(&(c - p)) < 0.0 {
                -m
            } else {
                m
            }
        })
        .collect();
    let mut out = cloud.clone();
    out.normals = Some(oriented);
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sphere(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let l = v.norm();
                if l > 0.1 && l <= 1.0 {
                    break v / l;
                }
            })
            .collect()
    }

    #[test]
    fn planar_normals_are_vertical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0))
            .collect();
        let est = estimate_normals(&PointCloud::new(pts), 0.1).unwrap();
        assert!(est.invalid.is_empty());
        for m in est.cloud.normals.unwrap() {
            assert!((m.z.abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let pts = sphere(10_000, 2);
        let est = estimate_normals(&PointCloud::new(pts), 0.1).unwrap();
        let normals = est.cloud.normals.unwrap();
        let good = est
            .cloud
            .points
            .iter()
            .zip(&normals)
            .filter(|(p, m)| p.dot(m).abs() > 5f64.to_radians().cos())
            .count();
        assert!(good as f64 >= 0.99 * 10_000.0, "{good}");
    }

    #[test]
    fn too_few_points() {
        let c = PointCloud::new(sphere(10, 1));
        assert!(matches!(estimate_normals(&c, 0.1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn collinear_neighbourhoods_are_flagged() {
        let pts: Vec<Vector3<f64>> = (0..40).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let est = estimate_normals(&PointCloud::new(pts), 0.1).unwrap();
        assert_eq!(est.invalid.len(), 40);
        assert!(est.cloud.is_empty());
    }

    #[test]
    fn orientation_faces_camera() {
        let mut c = PointCloud::new(vec![Vector3::new(0.0, 0.0, 2.0)]);
        c.normals = Some(vec![Vector3::z()]);
        let cams = [(0, Vector3::zeros())];
        assert_eq!(orient_normals(&c, &cams).unwrap().normals.unwrap()[0], -Vector3::z());
        c.normals = Some(vec![-Vector3::z()]);
        assert_eq!(orient_normals(&c, &cams).unwrap().normals.unwrap()[0], -Vector3::z());
        assert!(orient_normals(&c, &[]).is_err());
    }

    #[test]
    fn orientation_prefers_observing_camera() {
        let mut c = PointCloud::new(vec![Vector3::zeros()]);
        c.normals = Some(vec![Vector3::x()]);
        c.visibility = Some(vec![vec![1]]);
        // Camera 0 is nearer but did not observe the point.
        let cams = [(0, Vector3::new(0.5, 0.0, 0.0)), (1, Vector3::new(-3.0, 0.0, 0.0))];
        assert_eq!(orient_normals(&c, &cams).unwrap().normals.unwrap()[0], -Vector3::x());
        c.visibility = Some(vec![vec![7]]);
        assert_eq!(orient_normals(&c, &cams).unwrap().normals.unwrap()[0], Vector3::x());
    }

    #[test]
    fn interior_cameras_orient_sphere_inward() {
        let est = estimate_normals(&PointCloud::new(sphere(3000, 4)), 0.1).unwrap();
        let cams: Vec<(usize, Vector3<f64>)> = (0..8)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 8.0;
                (i, Vector3::new(0.3 * a.cos(), 0.3 * a.sin(), 0.1))
            })
            .collect();
        let out = orient_normals(&est.cloud, &cams).unwrap();
        for (p, m) in out.points.iter().zip(out.normals.as_ref().unwrap()) {
            let c = cams
                .iter()
                .map(|x| x.1)
                .min_by(|a, b| (a - p).norm().total_cmp(&(b - p).norm()))
                .unwrap();
            assert!(m.dot(&(c - p)) > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn normals_corotate(seed in any::<u64>(), rx in -3.0f64..3.0, ry in -3.0f64..3.0, rz in -3.0f64..3.0,
                             t in prop::array::uniform3(-5.0f64..5.0)) {
            let pts = sphere(300, seed);
            let r = Rotation3::from_euler_angles(rx, ry, rz);
            let t = Vector3::from(t);
            let moved: Vec<Vector3<f64>> = pts.iter().map(|p| r * p + t).collect();
            let a = estimate_normals(&PointCloud::new(pts), 0.1).unwrap();
            let b = estimate_normals(&PointCloud::new(moved), 0.1).unwrap();
            prop_assert_eq!(a.invalid.len(), b.invalid.len());
            for (m, mb) in a.cloud.normals.unwrap().iter().zip(b.cloud.normals.unwrap()) {
                let rotated = r * m;
                prop_assert!((rotated - mb).norm().min((rotated + mb).norm()) < 1e-6);
            }
        }
    }
}
