//! File formats: PLY, OBJ/MTL, and the JSON manifests.

mod manifest;
mod obj;
mod ply;

pub use manifest::{to_json, CameraEntry, CamerasManifest, FrameEntry, ReconstructionFile, TextureTable};
pub use obj::{read_obj, write_mtl, write_obj, FaceVertex, ObjData};
pub use ply::{read_ply, write_ply, PlyData};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::file(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
}
