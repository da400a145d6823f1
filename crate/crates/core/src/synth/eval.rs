use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, rotation_angle, RigidPose};
use crate::sfm::{compute_stats, Reconstruction, ReconstructionStats};

/// `truth ≈ scale · rotation · estimate + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
    pub rmse: f64,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Closed-form least-squares similarity between corresponding point sets (Umeyama).
pub fn align_similarity(estimated: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<Similarity> {
    if estimated.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} estimated points but {} ground-truth points",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated.len() < 3 {
        return Err(Error::Degenerate("similarity needs at least 3 points".into()));
    }
    let n = estimated.len() as f64;
    let mx = estimated.iter().sum::<Vector3<f64>>() / n;
    let my = truth.iter().sum::<Vector3<f64>>() / n;
    let var_x = estimated.iter().map(|x| (x - mx).norm_squared()).sum::<f64>() / n;
    let mut cov = Matrix3::zeros();
    for (x, y) in estimated.iter().zip(truth) {
        cov += (y - my) * (x - mx).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let var_y = truth.iter().map(|y| (y - my).norm_squared()).sum::<f64>() / n;
    if var_x <= 1e-300 || sv[1] <= 1e-12 * var_x.sqrt() * var_y.sqrt() {
        return Err(Error::Degenerate("points are collinear or coincident".into()));
    }
    let rotation = nearest_rotation(&cov);
    let (u, v_t) = (svd.u.expect("computed"), svd.v_t.expect("computed"));
    let sign = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let scale = (sv[0] + sv[1] + sign * sv[2]) / var_x;
    let translation = my - rotation * mx * scale;
    let mut sim = Similarity {
        scale,
        rotation,
        translation,
        rmse: 0.0,
    };
    sim.rmse = (estimated
        .iter()
        .zip(truth)
        .map(|(x, y)| (sim.apply(x) - y).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(sim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    /// Camera-centre RMSE after alignment, scene units.
    pub pose_rmse: f64,
    /// Geodesic rotation RMSE after alignment, degrees.
    pub rot_rmse: f64,
    /// RMS distance of aligned mesh vertices to the true surface, scene units.
    pub point_to_surface_rms: Option<f64>,
    pub registered_pct: f64,
    /// Largest distance between two ground-truth camera centres.
    pub trajectory_extent: f64,
    pub scene_diameter: f64,
    pub stats: ReconstructionStats,
}

/// Compares a reconstruction (and optionally mesh vertices in the reconstruction frame)
/// with the scene. `input_image_ids` of the reconstruction index the trajectory.
pub fn evaluate(
    recon: &Reconstruction,
    mesh_vertices: Option<&[Vector3<f64>]>,
    scene: &SyntheticScene,
) -> Result<EvalReport> {
    let mut est = Vec::new();
    let mut truth = Vec::new();
    let mut pairs: Vec<(&RigidPose, &RigidPose)> = Vec::new();
    for (&id, pose) in &recon.frames {
        let source = *recon
            .input_image_ids
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("frame {id} has no input image id")))?;
        let gt = scene
            .trajectory
            .get(source)
            .ok_or_else(|| Error::InvalidInput(format!("image {source} is not part of the trajectory")))?;
        est.push(pose.center());
        truth.push(gt.center());
        pairs.push((pose, gt));
    }
    if est.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "evaluation needs 3 registered frames, got {}",
            est.len()
        )));
    }
    let sim = align_similarity(&est, &truth)?;
    let rot_sq: f64 = pairs
        .iter()
        .map(|(e, g)| {
            rotation_angle(&(e.rotation * sim.rotation.inverse()), &g.rotation)
                .to_degrees()
                .powi(2)
        })
        .sum();
    let rot_rmse = (rot_sq / pairs.len() as f64).sqrt();
    let point_to_surface_rms = mesh_vertices.filter(|v| !v.is_empty()).map(|verts| {
        let sq: f64 = verts
            .iter()
            .map(|v| scene.distance_to_surface(&sim.apply(v)).powi(2))
            .sum();
        (sq / verts.len() as f64).sqrt()
    });
    let centers: Vec<Vector3<f64>> = scene.trajectory.iter().map(|p| p.center()).collect();
    let trajectory_extent = centers
        .iter()
        .flat_map(|a| centers.iter().map(move |b| (a - b).norm()))
        .fold(0.0, f64::max);
    let stats = compute_stats(recon);
    Ok(EvalReport {
        pose_rmse: sim.rmse,
        rot_rmse,
        point_to_surface_rms,
        registered_pct: stats.reconstructed_pct,
        trajectory_extent,
        scene_diameter: scene.diameter(),
        stats,
    })
}
