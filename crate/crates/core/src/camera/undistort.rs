use image::{ImageBuffer, Pixel};
use nalgebra::{Vector2, Vector3};

use super::CameraIntrinsics;
use crate::error::{Error, Result};

/// Resamples a fisheye image into a pinhole image with focal `target_focal` and the same
/// principal point and size. Pixels whose source falls outside the image are 0.
pub fn undistort<P>(
    image: &ImageBuffer<P, Vec<u8>>,
    intr: &CameraIntrinsics,
    target_focal: f64,
) -> Result<ImageBuffer<P, Vec<u8>>>
where
    P: Pixel<Subpixel = u8>,
{
    intr.validate()?;
    if !(target_focal > 0.0) || !target_focal.is_finite() {
        return Err(Error::InvalidInput("target focal must be positive".into()));
    }
    let (w, h) = image.dimensions();
    let channels = P::CHANNEL_COUNT as usize;
    let mut out = ImageBuffer::<P, Vec<u8>>::new(w, h);
    let src = image.as_raw();
    for (u, v, px) in out.enumerate_pixels_mut() {
        let ray = Vector3::new(
            (u as f64 - intr.cx) / target_focal,
            (v as f64 - intr.cy) / target_focal,
            1.0,
        );
        let Ok(s) = intr.project(&ray) else { continue };
        if let Some(vals) = sample_bilinear(src, w, h, channels, &s) {
            for (c, val) in px.channels_mut().iter_mut().zip(vals.iter()) {
                *c = val.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Bilinear sample of an interleaved 8-bit raster; `None` outside `[0, w-1]×[0, h-1]`.
pub(crate) fn sample_bilinear(data: &[u8], w: u32, h: u32, channels: usize, at: &Vector2<f64>) -> Option<[f64; 4]> {
    let (x, y) = (at.x, at.y);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as u32).min(w.saturating_sub(2));
    let y0 = (y.floor() as u32).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let idx = |xx: u32, yy: u32| (yy as usize * w as usize + xx as usize) * channels;
    let mut out = [0.0; 4];
    for (c, o) in out.iter_mut().enumerate().take(channels) {
        let a = data[idx(x0, y0) + c] as f64;
        let b = data[idx(x1, y0) + c] as f64;
        let cc = data[idx(x0, y1) + c] as f64;
        let d = data[idx(x1, y1) + c] as f64;
        *o = (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (cc * (1.0 - fx) + d * fx) * fy;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn cam(k1: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(300.0, (160.0, 120.0), [k1, 0.0, 0.0, 0.0], 320, 240)
    }

    #[test]
    fn constant_image_stays_constant_in_valid_region() {
        let img = GrayImage::from_pixel(320, 240, Luma([77]));
        let out = undistort(&img, &cam(0.1), 200.0).unwrap();
        let valid: Vec<u8> = out.pixels().map(|p| p.0[0]).filter(|&v| v != 0).collect();
        assert!(!valid.is_empty());
        assert!(valid.iter().all(|&v| v == 77));
    }

    const SQUARE: f64 = 0.1;

    /// Fisheye view of a checkerboard on the plane z = 1, 4×4 supersampled.
    fn checker(intr: &CameraIntrinsics) -> GrayImage {
        GrayImage::from_fn(intr.width, intr.height, |x, y| {
            let mut acc = 0.0f64;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = Vector2::new(
                        x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5,
                        y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5,
                    );
                    let ray = intr.unproject(&px).unwrap();
                    let (gx, gy) = ((ray.x / ray.z / SQUARE).floor(), (ray.y / ray.z / SQUARE).floor());
                    acc += if (gx + gy).rem_euclid(2.0) == 0.0 { 40.0 } else { 215.0 };
                }
            }
            Luma([(acc / 16.0).round() as u8])
        })
    }

    /// Largest distance of the detected vertical-edge crossings from their fitted lines.
    fn vertical_edge_deviation(img: &GrayImage, cx: f64, cy: f64, f: f64) -> (f64, usize) {
        let cell = f * SQUARE;
        let mut edges: std::collections::BTreeMap<i64, Vec<(f64, f64)>> = Default::default();
        for v in 4..img.height() - 4 {
            let frac = ((v as f64 - cy) / cell).fract().abs();
            if frac.min(1.0 - frac) * cell < 2.0 {
                continue;
            }
            for u in 2..img.width() - 3 {
                let window = (u - 2..u + 4).map(|x| img.get_pixel(x, v).0[0]);
                if window.clone().any(|p| p == 0) {
                    continue;
                }
                let (a, b) = (img.get_pixel(u, v).0[0] as f64, img.get_pixel(u + 1, v).0[0] as f64);
                if (a - 127.5) * (b - 127.5) < 0.0 {
                    let x = u as f64 + (127.5 - a) / (b - a);
                    edges
                        .entry(((x - cx) / cell).round() as i64)
                        .or_default()
                        .push((v as f64, x));
                }
            }
        }
        let mut worst: f64 = 0.0;
        let mut fitted = 0;
        for pts in edges.values().filter(|p| p.len() >= 20) {
            let n = pts.len() as f64;
            let (mv, mu) = pts.iter().fold((0.0, 0.0), |(a, b), (v, u)| (a + v / n, b + u / n));
            let cov: f64 = pts.iter().map(|(v, u)| (v - mv) * (u - mu)).sum();
            let var: f64 = pts.iter().map(|(v, _)| (v - mv).powi(2)).sum();
            let slope = cov / var;
            for (v, u) in pts {
                worst = worst.max((u - mu - slope * (v - mv)).abs());
            }
            fitted += 1;
        }
        (worst, fitted)
    }

    #[test]
    fn checker_edges_are_straight_after_undistortion() {
        let intr = cam(0.1);
        let img = checker(&intr);
        let f = 200.0;
        let out = undistort(&img, &intr, f).unwrap();
        let (dev, edges) = vertical_edge_deviation(&out, intr.cx, intr.cy, f);
        assert!(edges >= 8, "{edges} edges");
        assert!(dev < 1.0, "max deviation {dev}");

        // Ignoring k1 leaves visible bending.
        let wrong = undistort(&img, &cam(0.0), f).unwrap();
        let (dev, _) = vertical_edge_deviation(&wrong, intr.cx, intr.cy, f);
        assert!(dev > 1.0, "max deviation {dev}");
    }

    #[test]
    fn rejects_nonpositive_focal() {
        let img = GrayImage::new(32, 32);
        assert!(undistort(&img, &cam(0.0), 0.0).is_err());
    }

    #[test]
    fn nearly_identity_for_small_angles_without_distortion() {
        // Equidistant and pinhole agree to second order near the axis.
        let img = GrayImage::from_fn(320, 240, |x, y| {
            let v = 128.0 + 100.0 * ((x as f64 / 7.0).sin() * (y as f64 / 9.0).cos());
            Luma([v.round() as u8])
        });
        let out = undistort(&img, &cam(0.0), 300.0).unwrap();
        for y in 110..130 {
            for x in 150..170 {
                let d = out.get_pixel(x, y).0[0] as i32 - img.get_pixel(x, y).0[0] as i32;
                assert!(d.abs() <= 1, "({x},{y}) differs by {d}");
            }
        }
    }
}
