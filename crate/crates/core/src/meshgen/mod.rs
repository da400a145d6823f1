//! Sparse point cloud to watertight mesh: downsampling, statistical outlier removal, normal
//! estimation and orientation, and screened Poisson surface reconstruction.

mod filter;
mod kdtree;
mod mesh;
mod normals;
mod poisson;

pub use filter::{downsample, mean_and_std, neighbor_count, remove_outliers, FilterParams, FilterReport};
pub use kdtree::{KdTree, Neighbor};
pub use mesh::TriangleMesh;
pub use normals::{estimate_normals, orient_normals, NormalEstimate};
pub use poisson::{poisson_reconstruct, PoissonParams};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sfm::Reconstruction;

/// Points with optional parallel attribute arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    /// Ids of the frames that observed each point.
    pub visibility: Option<Vec<Vec<usize>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            ..Self::default()
        }
    }

    /// Triangulated tracks of a reconstruction, with colours and observing frames.
    pub fn from_reconstruction(recon: &Reconstruction) -> Self {
        let mut cloud = Self {
            colors: Some(Vec::new()),
            visibility: Some(Vec::new()),
            ..Self::default()
        };
        for track in &recon.tracks {
            let Some(p) = track.point3d else { continue };
            cloud.points.push(p);
            cloud
                .colors
                .as_mut()
                .expect("set above")
                .push(track.color.unwrap_or([128; 3]));
            cloud
                .visibility
                .as_mut()
                .expect("set above")
                .push(track.observations.iter().map(|o| o.image).collect());
        }
        cloud
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            normals: self.normals.as_ref().map(|n| indices.iter().map(|&i| n[i]).collect()),
            visibility: self
                .visibility
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        let lengths = [
            self.colors.as_ref().map(Vec::len),
            self.normals.as_ref().map(Vec::len),
            self.visibility.as_ref().map(Vec::len),
        ];
        if lengths.iter().flatten().any(|&l| l != n) {
            return Err(Error::InvalidInput(
                "point cloud attribute arrays differ in length".into(),
            ));
        }
        if self.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput(
                "point cloud contains non-finite coordinates".into(),
            ));
        }
        if let Some(normals) = &self.normals {
            if normals.iter().any(|m| (m.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidInput("point cloud normals are not unit length".into()));
            }
        }
        Ok(())
    }
}

/// Settings of the whole cloud-to-mesh chain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshgenParams {
    pub filter: FilterParams,
    pub poisson: PoissonParams,
}

impl MeshgenParams {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.poisson.validate()
    }
}

/// Intermediate products of [`mesh_from_cloud`].
#[derive(Clone, Debug)]
pub struct MeshgenOutput {
    pub filtered: PointCloud,
    pub report: FilterReport,
    pub oriented: PointCloud,
    pub mesh: TriangleMesh,
}

/// Downsample, filter, estimate and orient normals, then run Poisson reconstruction.
pub fn mesh_from_cloud(
    cloud: &PointCloud,
    camera_centers: &[(usize, Vector3<f64>)],
    params: &MeshgenParams,
    seed: u64,
) -> Result<MeshgenOutput> {
    params.validate()?;
    cloud.validate()?;
    let sampled = downsample(cloud, params.filter.n, seed);
    let (filtered, report) = remove_outliers(&sampled, &params.filter)?;
    let estimate = estimate_normals(&filtered, params.filter.neighbor_fraction)?;
    let oriented = orient_normals(&estimate.cloud, camera_centers)?;
    let mesh = poisson_reconstruct(&oriented, &params.poisson)?;
    Ok(MeshgenOutput {
        filtered,
        report,
        oriented,
        mesh,
    })
}
