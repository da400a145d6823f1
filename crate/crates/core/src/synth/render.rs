use image::RgbImage;
use nalgebra::Vector2;
use rayon::prelude::*;

use super::scene::SyntheticScene;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::RigidPose;

/// Per-pixel distance along the viewing ray; NaN where nothing was hit.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }
}

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub image: RgbImage,
    pub pose: RigidPose,
    pub depth: DepthMap,
}

/// Shaded colour of the first surface hit along a pixel's ray, with its distance.
pub fn shade_pixel(
    scene: &SyntheticScene,
    intr: &CameraIntrinsics,
    pose: &RigidPose,
    pixel: &Vector2<f64>,
) -> Option<([u8; 3], f64)> {
    let bearing = intr.unproject(pixel).ok()?;
    let dir = pose.rotation.transpose() * bearing;
    let origin = pose.center();
    let t = scene.cast(&origin, &dir)?;
    let hit = origin + dir * t;
    let cos = scene.normal(&hit).dot(&dir).abs();
    let falloff = (scene.spec.light_distance / t).powi(2);
    let albedo = scene.albedo(&hit);
    let rgb = albedo.map(|a| (255.0 * a * cos * falloff).round().clamp(0.0, 255.0) as u8);
    Some((rgb, t))
}

/// Renders one frame: ray cast per pixel centre, Lambertian shading from a light at the camera.
pub fn render_frame(scene: &SyntheticScene, intr: &CameraIntrinsics, pose: &RigidPose) -> RenderedView {
    let (w, h) = (intr.width, intr.height);
    let rows: Vec<(Vec<u8>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(3 * w as usize);
            let mut depth = Vec::with_capacity(w as usize);
            for x in 0..w {
                match shade_pixel(scene, intr, pose, &Vector2::new(x as f64, y as f64)) {
                    Some((c, t)) => {
                        rgb.extend_from_slice(&c);
                        depth.push(t as f32);
                    }
                    None => {
                        rgb.extend_from_slice(&[0, 0, 0]);
                        depth.push(f32::NAN);
                    }
                }
            }
            (rgb, depth)
        })
        .collect();
    let mut pixels = Vec::with_capacity((3 * w * h) as usize);
    let mut data = Vec::with_capacity((w * h) as usize);
    for (rgb, depth) in rows {
        pixels.extend(rgb);
        data.extend(depth);
    }
    RenderedView {
        image: RgbImage::from_raw(w, h, pixels).expect("buffer matches dimensions"),
        pose: *pose,
        depth: DepthMap {
            width: w,
            height: h,
            data,
        },
    }
}

/// Renders every trajectory pose.
pub fn render_views(scene: &SyntheticScene, intr: &CameraIntrinsics) -> Result<Vec<RenderedView>> {
    intr.validate()?;
    for (i, pose) in scene.trajectory.iter().enumerate() {
        if scene.implicit(&pose.center()) >= 0.0 {
            return Err(Error::InvalidScene(format!(
                "trajectory pose {i} is outside the cavity"
            )));
        }
    }
    Ok(scene
        .trajectory
        .iter()
        .map(|pose| render_frame(scene, intr, pose))
        .collect())
}
