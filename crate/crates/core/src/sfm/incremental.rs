use std::collections::{BTreeMap, BTreeSet};

use image::GrayImage;
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::bundle::{bundle_adjust, bundle_adjust_frames, prune_observations};
use super::pnp::solve_pnp;
use super::tracks::build_tracks;
use super::triangulate::{max_ray_angle, midpoint, Ray};
use super::twoview::{choose_relative_pose, estimate_essential, pair_rays};
use super::{compute_stats, Reconstruction, ReconstructionStats, SfmConfig, Track};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::features::{detect_all, match_exhaustive, FeatureMatch, FeatureSet, MatchSet, SiftParams};
use crate::geometry::{angle_between, median, nearest_rotation, RigidPose};

const STREAM_TWO_VIEW: u64 = 1 << 40;
const STREAM_PNP: u64 = 2 << 40;

/// A geometrically verified image pair.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub images: (usize, usize),
    /// Matches consistent with the essential matrix and in front of both cameras.
    pub matches: Vec<FeatureMatch>,
    /// Pose of the second image relative to the first, unit baseline.
    pub relative: RigidPose,
    /// Median angle between the two rays of each inlier, radians.
    pub median_angle: f64,
    /// The inliers are explained as well by a pure rotation: no usable baseline.
    pub rotation_only: bool,
}

type Bearings = Vec<Vec<Option<Vector3<f64>>>>;

fn unproject_all(intr: &CameraIntrinsics, keypoints: &[Vec<Vector2<f64>>]) -> Bearings {
    keypoints
        .iter()
        .map(|kps| kps.iter().map(|p| intr.unproject(p).ok()).collect())
        .collect()
}

/// Essential-matrix verification of every match set; pairs with too few inliers are dropped.
pub fn verify_pairs(
    intr: &CameraIntrinsics,
    features: &[FeatureSet],
    matches: &[MatchSet],
    config: &SfmConfig,
) -> Vec<ViewPair> {
    let keypoints: Vec<Vec<Vector2<f64>>> = features
        .iter()
        .map(|f| f.keypoints.iter().map(|k| k.position()).collect())
        .collect();
    let bearings = unproject_all(intr, &keypoints);
    verify_with_bearings(intr, &bearings, matches, config)
}

fn verify_with_bearings(
    intr: &CameraIntrinsics,
    bearings: &Bearings,
    matches: &[MatchSet],
    config: &SfmConfig,
) -> Vec<ViewPair> {
    let threshold = config.two_view_threshold / intr.fx.min(intr.fy);
    let ransac = config.ransac();
    let verified: Vec<Option<ViewPair>> = matches
        .par_iter()
        .enumerate()
        .map(|(index, set)| {
            let (a, b) = set.image_pair;
            if set.matches.len() < config.min_pair_inliers.max(8) {
                return None;
            }
            let mut used = Vec::with_capacity(set.matches.len());
            let mut pairs = Vec::with_capacity(set.matches.len());
            for m in &set.matches {
                if let (Some(x1), Some(x2)) = (bearings[a][m.query as usize], bearings[b][m.train as usize]) {
                    used.push(*m);
                    pairs.push((x1, x2));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(STREAM_TWO_VIEW + index as u64);
            let est = estimate_essential(&pairs, threshold * threshold, &ransac, &mut rng)?;
            let (relative, front) = choose_relative_pose(&est.essential, &pairs, &est.inliers)?;
            if front.len() < config.min_pair_inliers {
                return None;
            }
            let mut angles: Vec<f64> = front
                .iter()
                .map(|&i| {
                    let [r1, r2] = pair_rays(&relative, &pairs[i].0, &pairs[i].1);
                    angle_between(&r1.direction, &r2.direction)
                })
                .collect();
            let median_angle = median(&mut angles).unwrap_or(0.0);
            let mut m = nalgebra::Matrix3::zeros();
            for &i in &front {
                m += pairs[i].1 * pairs[i].0.transpose();
            }
            let rotation = nearest_rotation(&m);
            let explained = front
                .iter()
                .filter(|&&i| angle_between(&(rotation * pairs[i].0), &pairs[i].1) < 2.0 * threshold)
                .count();
            Some(ViewPair {
                images: (a, b),
                matches: front.iter().map(|&i| used[i]).collect(),
                relative,
                median_angle,
                rotation_only: explained as f64 >= 0.8 * front.len() as f64,
            })
        })
        .collect();
    verified.into_iter().flatten().collect()
}

/// Grows a reconstruction one image at a time.
pub struct IncrementalMapper<'a> {
    config: SfmConfig,
    bearings: Bearings,
    images: Option<&'a [GrayImage]>,
    pairs: Vec<ViewPair>,
    /// Track index of every keypoint, per image.
    track_of: Vec<Vec<Option<usize>>>,
    recon: Reconstruction,
    seed_pair: Option<(usize, usize)>,
    attempts: BTreeMap<usize, u64>,
}

impl<'a> IncrementalMapper<'a> {
    /// Verifies all pairs and builds tracks. `images`, when given, colour the points.
    pub fn new(
        intr: CameraIntrinsics,
        features: &[FeatureSet],
        matches: &[MatchSet],
        images: Option<&'a [GrayImage]>,
        config: &SfmConfig,
    ) -> Self {
        let keypoints: Vec<Vec<Vector2<f64>>> = features
            .iter()
            .map(|f| f.keypoints.iter().map(|k| k.position()).collect())
            .collect();
        let bearings = unproject_all(&intr, &keypoints);
        let pairs = verify_with_bearings(&intr, &bearings, matches, config);
        let mut recon = Reconstruction::new(intr, (0..features.len()).collect());
        recon.tracks = build_tracks(&keypoints, &pairs);
        let mut mapper = Self {
            config: config.clone(),
            bearings,
            images,
            pairs,
            track_of: keypoints.iter().map(|k| vec![None; k.len()]).collect(),
            recon,
            seed_pair: None,
            attempts: BTreeMap::new(),
        };
        mapper.index_tracks();
        mapper
    }

    fn index_tracks(&mut self) {
        for row in &mut self.track_of {
            row.iter_mut().for_each(|t| *t = None);
        }
        for (t, track) in self.recon.tracks.iter().enumerate() {
            for o in &track.observations {
                self.track_of[o.image][o.keypoint] = Some(t);
            }
        }
    }

    pub fn pairs(&self) -> &[ViewPair] {
        &self.pairs
    }

    pub fn reconstruction(&self) -> &Reconstruction {
        &self.recon
    }

    pub fn seed_pair(&self) -> Option<(usize, usize)> {
        self.seed_pair
    }

    fn min_angle(&self) -> f64 {
        self.config.min_triangulation_angle_deg.to_radians()
    }

    fn bearing(&self, image: usize, keypoint: usize) -> Option<Vector3<f64>> {
        self.bearings[image][keypoint]
    }

    /// Triangulates one track from its registered views; bad views are dropped and the
    /// triangulation retried once.
    fn triangulate_track(&mut self, t: usize) -> bool {
        for attempt in 0..2 {
            let track = &self.recon.tracks[t];
            let views: Vec<(usize, Ray)> = track
                .observations
                .iter()
                .filter_map(|o| {
                    let pose = self.recon.frames.get(&o.image)?;
                    let b = self.bearing(o.image, o.keypoint)?;
                    Some((
                        o.image,
                        Ray {
                            origin: pose.center(),
                            direction: pose.rotation.transpose() * b,
                        },
                    ))
                })
                .collect();
            if views.len() < 2 {
                return false;
            }
            let rays: Vec<Ray> = views.iter().map(|v| v.1).collect();
            if max_ray_angle(&rays) < self.min_angle() {
                return false;
            }
            let Some((point, depths)) = midpoint(&rays) else {
                return false;
            };
            let bad: Vec<usize> = views
                .iter()
                .zip(&depths)
                .filter(|((image, _), &depth)| {
                    let obs = track.observation_in(*image).expect("view has an observation");
                    depth <= 0.0
                        || !self
                            .recon
                            .observation_error(obs, &point)
                            .is_some_and(|e| e < self.config.max_reproj)
                })
                .map(|(v, _)| v.0)
                .collect();
            if bad.is_empty() {
                let color = self.sample_color(&self.recon.tracks[t]);
                let track = &mut self.recon.tracks[t];
                track.point3d = Some(point);
                track.color = color;
                return true;
            }
            if attempt == 1 {
                return false;
            }
            for image in bad {
                let kp = self.recon.tracks[t].observation_in(image).map(|o| o.keypoint);
                self.recon.tracks[t].remove_observation(image);
                if let Some(kp) = kp {
                    self.track_of[image][kp] = None;
                }
            }
        }
        false
    }

    fn sample_color(&self, track: &Track) -> Option<[u8; 3]> {
        let images = self.images?;
        let o = track
            .observations
            .iter()
            .find(|o| self.recon.frames.contains_key(&o.image))?;
        let img = images.get(o.image)?;
        let x = (o.pixel.x.round() as i64).clamp(0, img.width() as i64 - 1) as u32;
        let y = (o.pixel.y.round() as i64).clamp(0, img.height() as i64 - 1) as u32;
        let g = img.get_pixel(x, y)[0];
        Some([g, g, g])
    }

    /// Triangulates pending tracks, optionally only those observed in `image`.
    pub fn triangulate_pending(&mut self, image: Option<usize>) -> usize {
        let candidates: Vec<usize> = match image {
            Some(img) => {
                let mut v: Vec<usize> = self.track_of[img].iter().flatten().copied().collect();
                v.sort_unstable();
                v
            }
            None => (0..self.recon.tracks.len()).collect(),
        };
        let mut added = 0;
        for t in candidates {
            if self.recon.tracks[t].point3d.is_none() && self.triangulate_track(t) {
                added += 1;
            }
        }
        added
    }

    /// Seeds the reconstruction from the best-scoring verified pair.
    pub fn initialize(&mut self) -> Result<()> {
        let mut candidates: Vec<&ViewPair> = self
            .pairs
            .iter()
            .filter(|p| p.matches.len() >= self.config.min_init_inliers && !p.rotation_only)
            .collect();
        let score = |p: &ViewPair| p.matches.len() as f64 * p.median_angle;
        candidates.sort_by(|a, b| score(b).total_cmp(&score(a)).then(a.images.cmp(&b.images)));
        let candidates: Vec<(usize, usize, RigidPose)> = candidates
            .iter()
            .map(|p| (p.images.0, p.images.1, p.relative))
            .collect();

        let pristine = self.recon.tracks.clone();
        for (a, b, relative) in candidates {
            self.recon.frames.clear();
            self.recon.frames.insert(a, RigidPose::identity());
            self.recon.frames.insert(b, relative);
            let shared: Vec<usize> = self.track_of[a]
                .iter()
                .flatten()
                .copied()
                .filter(|&t| self.recon.tracks[t].observation_in(b).is_some())
                .collect();
            let mut ok = 0;
            for t in shared {
                if self.triangulate_track(t) {
                    ok += 1;
                }
            }
            if ok >= self.config.min_init_points {
                self.seed_pair = Some((a, b));
                let report = bundle_adjust(&mut self.recon, &BTreeSet::from([a]), &self.config.bundle());
                self.fix_scale();
                self.index_tracks();
                log::info!(
                    "initialized from images {a} and {b}: {} points, cost {:.4e} -> {:.4e}",
                    self.recon.num_points(),
                    report.initial_cost,
                    report.final_cost
                );
                if self.recon.num_points() >= self.config.min_init_points {
                    return Ok(());
                }
            }
            self.recon.tracks = pristine.clone();
            self.recon.frames.clear();
            self.seed_pair = None;
            self.index_tracks();
        }
        let best = self.pairs.iter().max_by(|x, y| {
            score(x)
                .total_cmp(&score(y))
                .then(x.matches.len().cmp(&y.matches.len()))
                .then(y.images.cmp(&x.images))
        });
        Err(Error::InitializationFailure {
            best_pair: best.map(|p| p.images),
            inliers: best.map_or(0, |p| p.matches.len()),
        })
    }

    /// Restores a unit distance between the two seed cameras.
    fn fix_scale(&mut self) {
        let Some((a, b)) = self.seed_pair else { return };
        let (Some(pa), Some(pb)) = (self.recon.frames.get(&a), self.recon.frames.get(&b)) else {
            return;
        };
        let d = (pa.center() - pb.center()).norm();
        if d > 1e-12 && d.is_finite() {
            self.recon.rescale(1.0 / d);
        }
    }

    /// 2D–3D correspondences of an unregistered image: (track, keypoint).
    fn correspondences(&self, image: usize) -> Vec<(usize, usize)> {
        self.track_of[image]
            .iter()
            .enumerate()
            .filter_map(|(kp, t)| {
                let t = (*t)?;
                self.recon.tracks[t].point3d.map(|_| (t, kp))
            })
            .collect()
    }

    /// Estimates the pose of `image` and adds it to the reconstruction.
    pub fn register_image(&mut self, image: usize) -> Result<()> {
        if self.recon.frames.contains_key(&image) {
            return Err(Error::RegistrationFailure {
                image,
                reason: "already registered".into(),
            });
        }
        let corr = self.correspondences(image);
        let points: Vec<Vector3<f64>> = corr
            .iter()
            .map(|&(t, _)| self.recon.tracks[t].point3d.expect("triangulated"))
            .collect();
        let pixels: Vec<Vector2<f64>> = corr
            .iter()
            .map(|&(t, _)| self.recon.tracks[t].observation_in(image).expect("indexed").pixel)
            .collect();
        let attempt = self.attempts.entry(image).or_insert(0);
        *attempt += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(STREAM_PNP + ((image as u64) << 8) + *attempt);
        let result = solve_pnp(
            image,
            &self.recon.intrinsics,
            &points,
            &pixels,
            &self.config.pnp(),
            &mut rng,
        )?;

        self.recon.frames.insert(image, result.pose);
        let inliers: BTreeSet<usize> = result.inliers.iter().copied().collect();
        for (i, &(t, kp)) in corr.iter().enumerate() {
            if !inliers.contains(&i) {
                self.recon.tracks[t].remove_observation(image);
                self.track_of[image][kp] = None;
            }
        }
        Ok(())
    }

    /// Registered frames sharing the most triangulated tracks with `image`.
    fn covisible(&self, image: usize, count: usize) -> Vec<usize> {
        let mut shared: BTreeMap<usize, usize> = BTreeMap::new();
        for t in self.track_of[image].iter().flatten() {
            let track = &self.recon.tracks[*t];
            if track.point3d.is_none() {
                continue;
            }
            for o in &track.observations {
                if o.image != image && self.recon.frames.contains_key(&o.image) {
                    *shared.entry(o.image).or_default() += 1;
                }
            }
        }
        let mut v: Vec<(usize, usize)> = shared.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().take(count).map(|(f, _)| f).collect()
    }

    fn local_adjust(&mut self, image: usize) {
        let mut variable: BTreeSet<usize> = self.covisible(image, self.config.local_ba_frames).into_iter().collect();
        variable.insert(image);
        if let Some((a, _)) = self.seed_pair {
            variable.remove(&a);
        }
        bundle_adjust_frames(&mut self.recon, &variable, &self.config.bundle());
        self.index_tracks();
    }

    fn global_adjust(&mut self) {
        let fixed: BTreeSet<usize> = self.seed_pair.map(|p| p.0).into_iter().collect();
        let report = bundle_adjust(&mut self.recon, &fixed, &self.config.bundle());
        self.fix_scale();
        self.index_tracks();
        let added = self.triangulate_pending(None);
        let all: Vec<usize> = (0..self.recon.tracks.len()).collect();
        prune_observations(&mut self.recon, &all, self.config.max_reproj);
        self.index_tracks();
        log::debug!(
            "global adjustment over {} frames: cost {:.4e} -> {:.4e}, {} pruned, {added} retriangulated",
            self.recon.frames.len(),
            report.initial_cost,
            report.final_cost,
            report.pruned
        );
    }

    /// Runs initialization and the registration loop to completion.
    pub fn run(mut self) -> Result<Reconstruction> {
        self.initialize()?;
        let num_images = self.recon.input_image_ids.len();
        // Global-adjustment epoch at which each image last failed to register.
        let mut failed_at: BTreeMap<usize, usize> = BTreeMap::new();
        let mut epoch = 0usize;
        let mut since_global = 0usize;
        loop {
            let next = (0..num_images)
                .filter(|i| !self.recon.frames.contains_key(i))
                .filter(|i| failed_at.get(i).is_none_or(|&e| e < epoch))
                .map(|i| (self.correspondences(i).len(), i))
                .filter(|&(n, _)| n >= self.config.min_pnp_correspondences)
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            let Some((_, image)) = next else {
                if since_global == 0 {
                    break;
                }
                self.global_adjust();
                epoch += 1;
                since_global = 0;
                continue;
            };
            match self.register_image(image) {
                Ok(()) => {
                    failed_at.remove(&image);
                    since_global += 1;
                    self.triangulate_pending(Some(image));
                    self.local_adjust(image);
                    if self.recon.frames.len().is_multiple_of(self.config.global_ba_interval) {
                        self.global_adjust();
                        epoch += 1;
                        since_global = 0;
                    }
                }
                Err(e) => {
                    log::debug!("{e}");
                    failed_at.insert(image, epoch);
                }
            }
        }
        log::info!(
            "registered {} of {num_images} images, {} points",
            self.recon.frames.len(),
            self.recon.num_points()
        );
        Ok(self.recon)
    }
}

/// Features, exhaustive matching and incremental reconstruction of a set of single-channel images.
pub fn reconstruct(
    images: &[GrayImage],
    intr: &CameraIntrinsics,
    sift: &SiftParams,
    config: &SfmConfig,
) -> Result<(Reconstruction, ReconstructionStats)> {
    if images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "reconstruction needs at least 2 images, got {}",
            images.len()
        )));
    }
    config.validate()?;
    intr.validate()?;
    let features = detect_all(images, sift)?;
    let matches = match_exhaustive(&features, config.match_ratio);
    let mapper = IncrementalMapper::new(*intr, &features, &matches, Some(images), config);
    let recon = mapper.run()?;
    let stats = compute_stats(&recon);
    Ok((recon, stats))
}
