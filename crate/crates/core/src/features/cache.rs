//! On-disk feature cache: one little-endian file per image, keyed by content hash.
//!
//! Layout: magic `GFEA`, `u32` version, `u32` count, then `count` keypoint records of five
//! `f32` (x, y, scale, orientation, response), then `count` descriptors of 128 `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use sha2::{Digest, Sha256};

use super::{Descriptor, FeatureSet, Keypoint, SiftParams, DESCRIPTOR_LEN};
use crate::error::{Error, Result};

pub const CACHE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GFEA";
const HEADER_LEN: usize = 12;
const KEYPOINT_LEN: usize = 5 * 4;
const DESCRIPTOR_BYTES: usize = DESCRIPTOR_LEN * 4;

pub fn encode_features(set: &FeatureSet) -> Vec<u8> {
    let n = set.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * (KEYPOINT_LEN + DESCRIPTOR_BYTES));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for k in &set.keypoints {
        for v in [k.x, k.y, k.scale, k.orientation, k.response] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for d in &set.descriptors {
        for v in d.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_f32(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let bad = |msg: &str| Error::parse("feature cache", 0, msg);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = n
        .checked_mul(KEYPOINT_LEN + DESCRIPTOR_BYTES)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("count overflows"))?;
    if bytes.len() != expected {
        return Err(bad(&format!("length {} does not match {n} features", bytes.len())));
    }
    let mut keypoints = Vec::with_capacity(n);
    for i in 0..n {
        let at = HEADER_LEN + i * KEYPOINT_LEN;
        let f: Vec<f32> = (0..5).map(|k| read_f32(bytes, at + 4 * k)).collect();
        if f.iter().any(|v| !v.is_finite()) || f[2] <= 0.0 {
            return Err(bad(&format!("invalid keypoint {i}")));
        }
        keypoints.push(Keypoint {
            x: f[0],
            y: f[1],
            scale: f[2],
            orientation: f[3],
            response: f[4],
        });
    }
    let base = HEADER_LEN + n * KEYPOINT_LEN;
    let mut descriptors = Vec::with_capacity(n);
    for i in 0..n {
        let at = base + i * DESCRIPTOR_BYTES;
        let mut values = [0.0f32; DESCRIPTOR_LEN];
        for (k, v) in values.iter_mut().enumerate() {
            *v = read_f32(bytes, at + 4 * k);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(&format!("invalid descriptor {i}")));
        }
        descriptors.push(Descriptor { values });
    }
    Ok(FeatureSet { keypoints, descriptors })
}

/// Directory of cached feature files.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Hex SHA-256 over the image size, pixels and detector parameters.
    pub fn key(image: &GrayImage, params: &SiftParams) -> String {
        let mut h = Sha256::new();
        h.update(image.width().to_le_bytes());
        h.update(image.height().to_le_bytes());
        h.update(image.as_raw());
        h.update(format!("{params:?}").as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.gfea"))
    }

    pub fn load(&self, key: &str) -> Option<FeatureSet> {
        let bytes = fs::read(self.path(key)).ok()?;
        decode_features(&bytes).ok()
    }

    pub fn store(&self, key: &str, set: &FeatureSet) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::file(&self.dir, e))?;
        let path = self.path(key);
        fs::write(&path, encode_features(set)).map_err(|e| Error::file(&path, e))
    }

    /// Cached detection: loads on hit, detects and stores on miss.
    pub fn detect(&self, image: &GrayImage, params: &SiftParams) -> Result<FeatureSet> {
        let key = Self::key(image, params);
        if let Some(set) = self.load(&key) {
            return Ok(set);
        }
        let set = super::detect_and_describe(image, params)?;
        self.store(&key, &set)?;
        Ok(set)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let img = crate::features::tests::textured_image(96, 3);
        let set = super::super::detect_and_describe(&img, &SiftParams::default()).unwrap();
        let bytes = encode_features(&set);
        assert_eq!(&bytes[..4], b"GFEA");
        assert_eq!(decode_features(&bytes).unwrap(), set);
    }

    #[test]
    fn rejects_truncated_and_foreign_data() {
        let set = FeatureSet {
            keypoints: vec![Keypoint {
                x: 1.0,
                y: 2.0,
                scale: 1.5,
                orientation: 0.0,
                response: 0.1,
            }],
            descriptors: vec![Descriptor {
                values: [0.0; DESCRIPTOR_LEN],
            }],
        };
        let bytes = encode_features(&set);
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_features(b"nope").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(decode_features(&wrong_version).is_err());
    }

    #[test]
    fn cache_hits_after_store() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let img = crate::features::tests::textured_image(80, 5);
        let p = SiftParams::default();
        let first = cache.detect(&img, &p).unwrap();
        let key = FeatureCache::key(&img, &p);
        assert_eq!(cache.load(&key).unwrap(), first);
        assert_eq!(cache.detect(&img, &p).unwrap(), first);
    }
}
