//! Best-view selection per triangle and texture-atlas baking.

mod atlas;
mod bvh;

pub use atlas::{bake_atlas, Chart, TexturedMesh, GUTTER, UNASSIGNED_COLOR};
pub use bvh::{ray_triangle, Bvh};

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::RigidPose;
use crate::meshgen::TriangleMesh;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureParams {
    /// Exponent on the cosine between the triangle normal and the direction to the camera.
    pub angle_exponent: f64,
    /// Exponent on the triangle-to-camera distance in the denominator.
    pub distance_exponent: f64,
    pub occlusion: bool,
    /// Largest atlas side, in texels.
    pub texel_budget: u32,
    /// Chart texels per source-image pixel along a triangle edge.
    pub texel_density: f64,
    /// Largest chart leg, in texels.
    pub max_chart: u32,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            angle_exponent: 1.0,
            distance_exponent: 2.0,
            occlusion: true,
            texel_budget: 4096,
            texel_density: 0.5,
            max_chart: 32,
        }
    }
}

impl TextureParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle_exponent >= 0.0 && self.angle_exponent.is_finite())
            || !(self.distance_exponent >= 0.0 && self.distance_exponent.is_finite())
        {
            return Err(Error::Config("texture score exponents must be non-negative".into()));
        }
        if !(self.texel_density > 0.0 && self.texel_density.is_finite()) {
            return Err(Error::Config("texel_density must be positive".into()));
        }
        if self.max_chart == 0 || self.texel_budget < 8 {
            return Err(Error::Config(
                "max_chart must be positive and texel_budget at least 8".into(),
            ));
        }
        Ok(())
    }
}

/// Chosen source frame per triangle, with its score (0 when unassigned).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewAssignment {
    pub views: Vec<Option<usize>>,
    pub scores: Vec<f64>,
}

impl ViewAssignment {
    pub fn assigned(&self) -> usize {
        self.views.iter().flatten().count()
    }
}

/// Score of viewing a triangle with unit normal `normal` and centroid `centroid` from `center`,
/// or `None` when the camera is behind the triangle's plane.
pub fn view_score(
    normal: &Vector3<f64>,
    centroid: &Vector3<f64>,
    center: &Vector3<f64>,
    params: &TextureParams,
) -> Option<f64> {
    let to_camera = center - centroid;
    let facing = normal.dot(&to_camera);
    if !(facing > 0.0) {
        return None;
    }
    let d = to_camera.norm();
    Some((facing / d).powf(params.angle_exponent) / d.powf(params.distance_exponent))
}

/// Whether all corners are in front of the camera and project inside the image.
pub fn in_frustum(intr: &CameraIntrinsics, pose: &RigidPose, corners: &[Vector3<f64>; 3]) -> bool {
    corners.iter().all(|v| {
        let pc = pose.transform(v);
        pc.z > 0.0 && intr.project(&pc).is_ok_and(|px| intr.contains(&px))
    })
}

/// Picks the highest-scoring registered frame for each triangle; equal scores go to the
/// lowest frame id.
pub fn select_views(
    mesh: &TriangleMesh,
    intr: &CameraIntrinsics,
    frames: &BTreeMap<usize, RigidPose>,
    params: &TextureParams,
) -> Result<ViewAssignment> {
    params.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidInput("view selection needs registered frames".into()));
    }
    if mesh.triangles.is_empty() {
        return Err(Error::InvalidInput("view selection needs a non-empty mesh".into()));
    }
    mesh.validate()?;
    let bvh = params.occlusion.then(|| Bvh::new(mesh));
    let centers: Vec<(usize, &RigidPose, Vector3<f64>)> = frames.iter().map(|(&id, p)| (id, p, p.center())).collect();
    let chosen: Vec<(Option<usize>, f64)> = (0..mesh.triangles.len())
        .into_par_iter()
        .map(|t| {
            let corners = mesh.corners(t);
            let Some(normal) = mesh.face_normal(t).try_normalize(0.0) else {
                return (None, 0.0);
            };
            let g = mesh.centroid(t);
            let mut best: (Option<usize>, f64) = (None, 0.0);
            for (id, pose, c) in &centers {
                let Some(score) = view_score(&normal, &g, c, params) else {
                    continue;
                };
                if best.0.is_some() && score <= best.1 {
                    continue;
                }
                if !in_frustum(intr, pose, &corners) {
                    continue;
                }
                if bvh.as_ref().is_some_and(|b| b.segment_blocked(c, &g, t)) {
                    continue;
                }
                best = (Some(*id), score);
            }
            best
        })
        .collect();
    Ok(ViewAssignment {
        views: chosen.iter().map(|c| c.0).collect(),
        scores: chosen.iter().map(|c| c.1).collect(),
    })
}
