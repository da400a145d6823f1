use nalgebra::{Matrix3, Vector3};

use crate::geometry::angle_between;

/// A viewing ray in world coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
}

/// Least-squares point closest to all rays, with the signed distance along each ray.
pub fn midpoint(rays: &[Ray]) -> Option<(Vector3<f64>, Vec<f64>)> {
    if rays.len() < 2 {
        return None;
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for ray in rays {
        let p = Matrix3::identity() - ray.direction * ray.direction.transpose();
        a += p;
        b += p * ray.origin;
    }
    let chol = a.cholesky()?;
    let x = chol.solve(&b);
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let depths = rays.iter().map(|r| r.direction.dot(&(x - r.origin))).collect();
    Some((x, depths))
}

/// Largest angle between any two ray directions.
pub fn max_ray_angle(rays: &[Ray]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in rays.iter().enumerate() {
        for b in &rays[i + 1..] {
            best = best.max(angle_between(&a.direction, &b.direction));
        }
    }
    best
}
