use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::RgbImage;

use super::{load_colour_frames, source_poses, write_textured_as};
use crate::error::{Error, Result};
use crate::io::{to_json, write_file, CamerasManifest};
use crate::sfm::Reconstruction;
use crate::texturing::TexturedMesh;

/// Longest side of the frame thumbnails in a viewer bundle.
pub const BUNDLE_FRAME_MAX_SIDE: u32 = 512;
const JPEG_QUALITY: u8 = 90;

fn bundle_frame_name(id: usize) -> String {
    format!("frames/frame_{id:06}.jpg")
}

fn thumbnail(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.max(h);
    if side <= BUNDLE_FRAME_MAX_SIDE {
        return img.clone();
    }
    let scale = BUNDLE_FRAME_MAX_SIDE as f64 / side as f64;
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    imageops::resize(img, nw, nh, FilterType::Triangle)
}

/// Writes the static scene bundle read by the viewer:
/// `mesh.obj`, `mesh.mtl`, `atlas.png`, `texture.json`, `cameras.json` and `frames/`.
///
/// `frames_dir` holds the colour frames as `frame_%06d.png` by source index.
pub fn export_viewer_bundle(
    recon: &Reconstruction,
    tex: &TexturedMesh,
    frames_dir: &Path,
    out_dir: &Path,
) -> Result<CamerasManifest> {
    if recon.frames.is_empty() {
        return Err(Error::Export("reconstruction has no registered cameras".into()));
    }
    let ids: Vec<usize> = source_poses(recon).into_keys().collect();
    let frames = load_colour_frames(frames_dir, ids)?;

    write_textured_as(tex, out_dir, "mesh.obj", "mesh.mtl")?;
    for (&id, img) in &frames {
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, JPEG_QUALITY).encode_image(&thumbnail(img))?;
        write_file(&out_dir.join(bundle_frame_name(id)), buf)?;
    }
    let manifest = CamerasManifest::from_reconstruction(recon, bundle_frame_name);
    write_file(&out_dir.join("cameras.json"), to_json(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thumbnails_cap_the_long_side() {
        let t = thumbnail(&RgbImage::new(640, 480));
        assert_eq!(t.dimensions(), (512, 384));
        let t = thumbnail(&RgbImage::new(300, 1000));
        assert_eq!(t.dimensions(), (154, 512));
        assert_eq!(thumbnail(&RgbImage::new(320, 240)).dimensions(), (320, 240));
    }
}
