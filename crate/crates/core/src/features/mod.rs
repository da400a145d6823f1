//! Scale-space keypoints, 128-d gradient descriptors and exhaustive mutual matching.

mod cache;
mod matching;
mod sift;

pub use cache::{decode_features, encode_features, FeatureCache, CACHE_VERSION};
pub use matching::{match_exhaustive, match_pair, passes_ratio, FeatureMatch, MatchSet, DEFAULT_RATIO};
pub use sift::{detect_and_describe, SiftParams};

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::Result;

pub const DESCRIPTOR_LEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Blur scale in pixels of the input image.
    pub scale: f32,
    pub orientation: f32,
    pub response: f32,
}

impl Keypoint {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x as f64, self.y as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub values: [f32; DESCRIPTOR_LEN],
}

impl Descriptor {
    /// Normalizes to unit length, clamps each entry to `clamp`, and renormalizes.
    pub fn normalized(mut values: [f32; DESCRIPTOR_LEN], clamp: f32) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v = (*v / norm).min(clamp));
            let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 0.0 {
                values.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Self { values }
    }

    /// Inner product with a fixed summation order, so `a.dot(b) == b.dot(a)` bitwise.
    #[inline]
    pub fn dot(&self, other: &Descriptor) -> f32 {
        let mut acc = [0.0f32; 8];
        for (ca, cb) in self.values.chunks_exact(8).zip(other.values.chunks_exact(8)) {
            for l in 0..8 {
                acc[l] += ca[l] * cb[l];
            }
        }
        ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
    }

    /// Euclidean distance; symmetric bitwise and exactly zero for identical descriptors.
    #[inline]
    pub fn distance(&self, other: &Descriptor) -> f32 {
        let mut acc = [0.0f32; 8];
        for (ca, cb) in self.values.chunks_exact(8).zip(other.values.chunks_exact(8)) {
            for l in 0..8 {
                let d = ca[l] - cb[l];
                acc[l] += d * d;
            }
        }
        (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))).sqrt()
    }
}

/// Index-aligned keypoints and descriptors of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Runs detection on every image in parallel; output order follows input order.
pub fn detect_all(images: &[image::GrayImage], params: &SiftParams) -> Result<Vec<FeatureSet>> {
    images.par_iter().map(|img| detect_and_describe(img, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn blob_image() -> GrayImage {
        GrayImage::from_fn(200, 200, |x, y| {
            let d2 = (x as f64 - 100.0).powi(2) + (y as f64 - 100.0).powi(2);
            Luma([(220.0 * (-d2 / (2.0 * 16.0)).exp()).round() as u8])
        })
    }

    /// Smooth random texture: sum of a few hundred Gaussian blobs.
    pub(crate) fn textured_image(size: u32, seed: u64) -> GrayImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..300)
            .map(|_| {
                (
                    rng.gen_range(0.0..size as f64),
                    rng.gen_range(0.0..size as f64),
                    rng.gen_range(2.0..7.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        GrayImage::from_fn(size, size, |x, y| {
            let mut v = 128.0;
            for &(bx, by, s, a) in &blobs {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                if d2 < 25.0 * s * s {
                    v += 90.0 * a * (-d2 / (2.0 * s * s)).exp();
                }
            }
            Luma([v.clamp(0.0, 255.0).round() as u8])
        })
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        let img = GrayImage::from_pixel(128, 128, Luma([90]));
        let f = detect_and_describe(&img, &SiftParams::default()).unwrap();
        assert!(f.is_empty());
    }

    #[test]
    fn small_image_is_rejected() {
        let img = GrayImage::new(63, 100);
        assert!(detect_and_describe(&img, &SiftParams::default()).is_err());
    }

    #[test]
    fn gaussian_blob_is_detected_at_its_scale() {
        let f = detect_and_describe(&blob_image(), &SiftParams::default()).unwrap();
        let hit = f.keypoints.iter().any(|k| {
            let d = ((k.x - 100.0).powi(2) + (k.y - 100.0).powi(2)).sqrt();
            d <= 2.0 && k.scale >= 2.0 && k.scale <= 8.0
        });
        assert!(hit, "{:?}", f.keypoints);
    }

    #[test]
    fn descriptors_are_unit_norm() {
        let f = detect_and_describe(&textured_image(160, 1), &SiftParams::default()).unwrap();
        assert!(f.len() > 20);
        assert_eq!(f.keypoints.len(), f.descriptors.len());
        for d in &f.descriptors {
            let n = d.values.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        for k in &f.keypoints {
            assert!(k.x >= 0.0 && k.y >= 0.0 && k.x < 160.0 && k.y < 160.0 && k.scale > 0.0);
        }
    }

    #[test]
    fn descriptors_survive_quarter_turn() {
        let size = 240;
        let img = textured_image(size, 4);
        let rotated = image::imageops::rotate90(&img);
        let p = SiftParams::default();
        let a = detect_and_describe(&img, &p).unwrap();
        let b = detect_and_describe(&rotated, &p).unwrap();
        let set = match_pair(&a, &b, DEFAULT_RATIO);
        // rotate90 maps (x, y) to (h - 1 - y, x).
        let good = set
            .matches
            .iter()
            .filter(|m| {
                let ka = a.keypoints[m.query as usize];
                let kb = b.keypoints[m.train as usize];
                let ex = (size - 1) as f32 - ka.y;
                let ey = ka.x;
                ((kb.x - ex).powi(2) + (kb.y - ey).powi(2)).sqrt() < 2.0
            })
            .count();
        let denom = a.len().min(b.len());
        assert!(
            good as f64 >= 0.5 * denom as f64,
            "{good} of {denom} keypoints matched consistently"
        );
    }

    #[test]
    fn detection_is_deterministic() {
        let img = textured_image(128, 9);
        let p = SiftParams::default();
        assert_eq!(
            detect_and_describe(&img, &p).unwrap(),
            detect_and_describe(&img, &p).unwrap()
        );
    }
}
