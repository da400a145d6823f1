//! JSON documents exchanged between pipeline stages and with the viewer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::{PoseRecord, RigidPose};
use crate::sfm::{Reconstruction, Track};
use crate::texturing::{Chart, TexturedMesh};

/// One registered camera of [`CamerasManifest`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    /// Index of the source frame in the input sequence.
    pub id: usize,
    /// World-to-camera rotation as `[w, x, y, z]`.
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
    /// Path of the frame image, relative to the manifest when it is not absolute.
    pub image: String,
}

/// Intrinsics plus the registered cameras, in increasing id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasManifest {
    pub intrinsics: CameraIntrinsics,
    pub cameras: Vec<CameraEntry>,
}

impl CamerasManifest {
    /// `image_path` maps a source frame id to the path recorded for it.
    pub fn from_reconstruction(recon: &Reconstruction, image_path: impl Fn(usize) -> String) -> Self {
        let cameras = recon
            .frames
            .iter()
            .map(|(&image, pose)| {
                let id = recon.input_image_ids.get(image).copied().unwrap_or(image);
                let record = PoseRecord::from(pose);
                CameraEntry {
                    id,
                    quaternion: record.quaternion,
                    translation: record.translation,
                    image: image_path(id),
                }
            })
            .collect();
        Self {
            intrinsics: recon.intrinsics,
            cameras,
        }
    }

    pub fn poses(&self) -> Result<BTreeMap<usize, RigidPose>> {
        self.cameras
            .iter()
            .map(|c| {
                let pose = PoseRecord {
                    quaternion: c.quaternion,
                    translation: c.translation,
                }
                .to_pose()
                .ok_or_else(|| Error::InvalidInput(format!("camera {} has an invalid pose", c.id)))?;
                Ok((c.id, pose))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        for w in self.cameras.windows(2) {
            if w[0].id >= w[1].id {
                return Err(Error::InvalidInput("camera ids must be strictly increasing".into()));
            }
        }
        self.poses().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    /// Position of the frame in the reconstruction input.
    pub image: usize,
    #[serde(flatten)]
    pub pose: PoseRecord,
}

/// Complete serialized SfM state, enough to resume later stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionFile {
    pub intrinsics: CameraIntrinsics,
    pub input_image_ids: Vec<usize>,
    pub frames: Vec<FrameEntry>,
    pub tracks: Vec<Track>,
}

impl From<&Reconstruction> for ReconstructionFile {
    fn from(r: &Reconstruction) -> Self {
        Self {
            intrinsics: r.intrinsics,
            input_image_ids: r.input_image_ids.clone(),
            frames: r
                .frames
                .iter()
                .map(|(&image, pose)| FrameEntry {
                    image,
                    pose: PoseRecord::from(pose),
                })
                .collect(),
            tracks: r.tracks.clone(),
        }
    }
}

impl ReconstructionFile {
    pub fn to_reconstruction(&self) -> Result<Reconstruction> {
        self.intrinsics.validate()?;
        let mut recon = Reconstruction::new(self.intrinsics, self.input_image_ids.clone());
        for f in &self.frames {
            let pose = f
                .pose
                .to_pose()
                .ok_or_else(|| Error::InvalidInput(format!("frame {} has an invalid pose", f.image)))?;
            if f.image >= self.input_image_ids.len() || recon.frames.insert(f.image, pose).is_some() {
                return Err(Error::InvalidInput(format!(
                    "frame {} is out of range or repeated",
                    f.image
                )));
            }
        }
        for (i, t) in self.tracks.iter().enumerate() {
            let sorted = t.observations.windows(2).all(|w| w[0].image < w[1].image);
            let known = t.observations.iter().all(|o| o.image < self.input_image_ids.len());
            if !sorted || !known {
                return Err(Error::InvalidInput(format!("track {i} has invalid observations")));
            }
        }
        recon.tracks = self.tracks.clone();
        Ok(recon)
    }
}

/// Chart and assignment table of a textured mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureTable {
    pub atlas: String,
    pub width: u32,
    pub height: u32,
    /// Assigned source frame id per triangle, `null` when no view qualifies.
    pub views: Vec<Option<usize>>,
    pub charts: Vec<Chart>,
}

impl TextureTable {
    pub fn new(tex: &TexturedMesh, atlas: &str) -> Self {
        Self {
            atlas: atlas.to_string(),
            width: tex.atlas.width(),
            height: tex.atlas.height(),
            views: tex.assignments.views.clone(),
            charts: tex.charts.clone(),
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
