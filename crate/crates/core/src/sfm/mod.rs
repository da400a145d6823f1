//! Incremental structure from motion on bearing vectors of the fisheye model.
//!
//! Pairs are verified with an essential-matrix RANSAC, observations are chained into tracks,
//! and the reconstruction grows one image at a time from the best two-view seed: absolute pose
//! from three-point RANSAC, multi-view triangulation, and sparse bundle adjustment.

mod bundle;
mod incremental;
mod pnp;
mod tracks;
mod triangulate;
mod twoview;

pub use bundle::{bundle_adjust, bundle_adjust_frames, observation_jacobian, prune_observations, BaReport, BaSettings};
pub use incremental::{reconstruct, verify_pairs, IncrementalMapper, ViewPair};
pub use pnp::{absolute_orientation, p3p, refine_pose, solve_pnp, PnpResult, PnpSettings};
pub use tracks::build_tracks;
pub use triangulate::{max_ray_angle, midpoint, Ray};
pub use twoview::{
    choose_relative_pose, decompose_essential, estimate_essential, fit_essential, sampson_error, EssentialEstimate,
    RansacSettings,
};

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::RigidPose;

/// One 2D feature of a track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub image: usize,
    pub keypoint: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Track {
    /// Sorted by image, at most one per image.
    pub observations: Vec<Observation>,
    pub point3d: Option<Vector3<f64>>,
    pub color: Option<[u8; 3]>,
}

impl Track {
    pub fn observation_in(&self, image: usize) -> Option<&Observation> {
        self.observations
            .binary_search_by_key(&image, |o| o.image)
            .ok()
            .map(|i| &self.observations[i])
    }

    pub fn remove_observation(&mut self, image: usize) {
        self.observations.retain(|o| o.image != image);
    }
}

/// Registered frames, tracks, and the shared intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub intrinsics: CameraIntrinsics,
    pub frames: BTreeMap<usize, RigidPose>,
    pub tracks: Vec<Track>,
    pub input_image_ids: Vec<usize>,
}

impl Reconstruction {
    pub fn new(intrinsics: CameraIntrinsics, input_image_ids: Vec<usize>) -> Self {
        Self {
            intrinsics,
            frames: BTreeMap::new(),
            tracks: Vec::new(),
            input_image_ids,
        }
    }

    pub fn num_points(&self) -> usize {
        self.tracks.iter().filter(|t| t.point3d.is_some()).count()
    }

    /// Pixel distance between an observation and the projection of `point`;
    /// `None` when the frame is unregistered or the point cannot be projected.
    pub fn observation_error(&self, obs: &Observation, point: &Vector3<f64>) -> Option<f64> {
        let pose = self.frames.get(&obs.image)?;
        let pc = pose.transform(point);
        let bearing = self.intrinsics.unproject(&obs.pixel).ok()?;
        if pc.dot(&bearing) <= 0.0 {
            return None;
        }
        let q = self.intrinsics.project(&pc).ok()?;
        Some((q - obs.pixel).norm())
    }

    /// Errors of every observation of a triangulated track in a registered frame.
    pub fn reprojection_errors(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.tracks {
            let Some(p) = t.point3d else { continue };
            for o in &t.observations {
                if self.frames.contains_key(&o.image) {
                    out.push(self.observation_error(o, &p).unwrap_or(f64::INFINITY));
                }
            }
        }
        out
    }

    pub fn mean_reprojection_error(&self) -> f64 {
        let e = self.reprojection_errors();
        if e.is_empty() {
            return 0.0;
        }
        e.iter().sum::<f64>() / e.len() as f64
    }

    /// Triangulated observations per registered frame.
    pub fn observations_per_frame(&self) -> BTreeMap<usize, usize> {
        let mut counts: BTreeMap<usize, usize> = self.frames.keys().map(|&k| (k, 0)).collect();
        for t in self.tracks.iter().filter(|t| t.point3d.is_some()) {
            for o in &t.observations {
                if let Some(c) = counts.get_mut(&o.image) {
                    *c += 1;
                }
            }
        }
        counts
    }

    /// Verifies track structure, cheirality and the reprojection bound.
    pub fn check_invariants(&self, max_reproj: f64) -> Result<()> {
        for (i, t) in self.tracks.iter().enumerate() {
            if t.observations.windows(2).any(|w| w[0].image >= w[1].image) {
                return Err(Error::InvalidInput(format!(
                    "track {i} has unsorted or repeated images"
                )));
            }
            let Some(p) = t.point3d else { continue };
            let mut registered = 0;
            for o in t.observations.iter().filter(|o| self.frames.contains_key(&o.image)) {
                registered += 1;
                match self.observation_error(o, &p) {
                    Some(e) if e < max_reproj => {}
                    Some(e) => {
                        return Err(Error::InvalidInput(format!(
                            "track {i} reprojects {e:.3} px off in image {}",
                            o.image
                        )))
                    }
                    None => return Err(Error::InvalidInput(format!("track {i} is behind image {}", o.image))),
                }
            }
            if registered < 2 {
                return Err(Error::InvalidInput(format!(
                    "track {i} has a point but {registered} views"
                )));
            }
        }
        Ok(())
    }

    /// Multiplies all camera centres and points by `s`; the origin stays fixed.
    pub fn rescale(&mut self, s: f64) {
        for pose in self.frames.values_mut() {
            pose.translation *= s;
        }
        for t in &mut self.tracks {
            if let Some(p) = t.point3d.as_mut() {
                *p *= s;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionStats {
    pub input_images: usize,
    pub reconstructed_images: usize,
    pub reconstructed_pct: f64,
    pub points3d: usize,
    pub average_observation: f64,
}

impl ReconstructionStats {
    pub fn empty(input_images: usize) -> Self {
        Self {
            input_images,
            reconstructed_images: 0,
            reconstructed_pct: 0.0,
            points3d: 0,
            average_observation: 0.0,
        }
    }
}

/// `100 · registered / input`, rounded to one decimal.
pub fn registered_percent(registered: usize, input: usize) -> f64 {
    if input == 0 {
        return 0.0;
    }
    (1000.0 * registered as f64 / input as f64).round() / 10.0
}

pub fn compute_stats(recon: &Reconstruction) -> ReconstructionStats {
    let input = recon.input_image_ids.len();
    let registered = recon.frames.len();
    let per_frame = recon.observations_per_frame();
    let total: usize = per_frame.values().sum();
    ReconstructionStats {
        input_images: input,
        reconstructed_images: registered,
        reconstructed_pct: registered_percent(registered, input),
        points3d: recon.num_points(),
        average_observation: if registered == 0 {
            0.0
        } else {
            total as f64 / registered as f64
        },
    }
}

/// Tunables of the incremental reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmConfig {
    pub seed: u64,
    /// Reprojection bound for inliers and retained observations, in pixels.
    pub max_reproj: f64,
    /// Two-view inlier threshold, in pixels at the focal length.
    pub two_view_threshold: f64,
    pub ransac_confidence: f64,
    pub ransac_max_iterations: usize,
    pub match_ratio: f32,
    pub min_pair_inliers: usize,
    pub min_init_inliers: usize,
    pub min_init_points: usize,
    pub min_triangulation_angle_deg: f64,
    pub min_pnp_correspondences: usize,
    pub min_inlier_ratio: f64,
    pub local_ba_frames: usize,
    pub global_ba_interval: usize,
    pub huber_delta: f64,
    pub ba_max_iterations: usize,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            max_reproj: 4.0,
            two_view_threshold: 2.0,
            ransac_confidence: 0.9999,
            ransac_max_iterations: 10_000,
            match_ratio: crate::features::DEFAULT_RATIO,
            min_pair_inliers: 15,
            min_init_inliers: 100,
            min_init_points: 50,
            min_triangulation_angle_deg: 1.5,
            min_pnp_correspondences: 15,
            min_inlier_ratio: 0.25,
            local_ba_frames: 5,
            global_ba_interval: 10,
            huber_delta: 2.0,
            ba_max_iterations: 50,
        }
    }
}

impl SfmConfig {
    pub fn ransac(&self) -> RansacSettings {
        RansacSettings {
            confidence: self.ransac_confidence,
            max_iterations: self.ransac_max_iterations,
        }
    }

    pub fn pnp(&self) -> PnpSettings {
        PnpSettings {
            max_reproj: self.max_reproj,
            min_correspondences: self.min_pnp_correspondences,
            min_inlier_ratio: self.min_inlier_ratio,
            ransac: self.ransac(),
        }
    }

    pub fn bundle(&self) -> BaSettings {
        BaSettings {
            max_iterations: self.ba_max_iterations,
            huber_delta: self.huber_delta,
            max_reproj: self.max_reproj,
            ..BaSettings::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_reproj", self.max_reproj),
            ("two_view_threshold", self.two_view_threshold),
            ("huber_delta", self.huber_delta),
            ("min_triangulation_angle_deg", self.min_triangulation_angle_deg),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return Err(Error::Config("ransac_confidence must lie in (0, 1)".into()));
        }
        if !(self.match_ratio > 0.0 && self.match_ratio <= 1.0) {
            return Err(Error::Config("match_ratio must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.min_inlier_ratio) {
            return Err(Error::Config("min_inlier_ratio must lie in [0, 1]".into()));
        }
        if self.ransac_max_iterations == 0 || self.global_ba_interval == 0 {
            return Err(Error::Config(
                "ransac_max_iterations and global_ba_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recon_with_counts(counts: &[usize]) -> Reconstruction {
        let intr = CameraIntrinsics::new(100.0, (50.0, 50.0), [0.0; 4], 100, 100);
        let mut r = Reconstruction::new(intr, (0..counts.len()).collect());
        for (img, &c) in counts.iter().enumerate() {
            r.frames.insert(img, RigidPose::identity());
            for k in 0..c {
                r.tracks.push(Track {
                    observations: vec![Observation {
                        image: img,
                        keypoint: k,
                        pixel: Vector2::zeros(),
                    }],
                    point3d: Some(Vector3::z()),
                    color: None,
                });
            }
        }
        r
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(registered_percent(687, 2975), 23.1);
        assert_eq!(registered_percent(138, 731), 18.9);
        assert_eq!(registered_percent(1064, 2959), 36.0);
        assert_eq!(registered_percent(1481, 1483), 99.9);
        assert_eq!(registered_percent(0, 0), 0.0);
        assert_eq!(registered_percent(2, 3), 66.7);
    }

    #[test]
    fn average_observation_counts_triangulated_features() {
        let s = compute_stats(&recon_with_counts(&[3, 5]));
        assert_eq!(s.average_observation, 4.0);
        assert_eq!(s.points3d, 8);
        assert_eq!(s.reconstructed_pct, 100.0);
    }

    #[test]
    fn empty_reconstruction_stats() {
        let intr = CameraIntrinsics::new(100.0, (50.0, 50.0), [0.0; 4], 100, 100);
        let s = compute_stats(&Reconstruction::new(intr, (0..7).collect()));
        assert_eq!(s, ReconstructionStats::empty(7));
    }

    #[test]
    fn config_validation() {
        assert!(SfmConfig::default().validate().is_ok());
        let bad = SfmConfig {
            max_reproj: -1.0,
            ..SfmConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: SfmConfig = toml::from_str("seed = 7").unwrap();
        assert_eq!(parsed.seed, 7);
        assert!(toml::from_str::<SfmConfig>("sed = 7").is_err());
    }
}
