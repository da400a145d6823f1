//! Sparse Levenberg–Marquardt over poses and points with the point blocks eliminated.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector6};

use super::Reconstruction;
use crate::camera::CameraIntrinsics;
use crate::error::Result;
use crate::geometry::{skew, RigidPose};

type Matrix2x6 = SMatrix<f64, 2, 6>;
type Matrix6 = SMatrix<f64, 6, 6>;
type Matrix6x3 = SMatrix<f64, 6, 3>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaSettings {
    pub max_iterations: usize,
    /// Huber threshold on the pixel residual norm.
    pub huber_delta: f64,
    /// Observations farther than this after convergence are removed.
    pub max_reproj: f64,
    pub relative_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for BaSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            huber_delta: 2.0,
            max_reproj: 4.0,
            relative_tolerance: 1e-10,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    /// `false` when the iteration budget ran out; the best iterate is kept.
    pub converged: bool,
    pub observations: usize,
    pub pruned: usize,
}

/// Residual `π(R X + t) − pixel` with its Jacobians for the left pose increment `(ω, δt)`
/// and for the point.
pub fn observation_jacobian(
    intr: &CameraIntrinsics,
    pose: &RigidPose,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
) -> Result<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>)> {
    let rx = pose.rotation * point;
    let (q, jpi) = intr.project_with_jacobian(&(rx + pose.translation))?;
    let mut jpose = Matrix2x6::zeros();
    jpose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jpi * -skew(&rx)));
    jpose.fixed_view_mut::<2, 3>(0, 3).copy_from(&jpi);
    let jpoint = jpi * pose.rotation.matrix();
    Ok((q - pixel, jpose, jpoint))
}

/// Huber loss of a squared residual norm.
fn huber(sq: f64, delta: f64) -> f64 {
    if sq <= delta * delta {
        sq
    } else {
        2.0 * delta * sq.sqrt() - delta * delta
    }
}

fn huber_weight(sq: f64, delta: f64) -> f64 {
    if sq <= delta * delta {
        1.0
    } else {
        delta / sq.sqrt()
    }
}

struct Obs {
    frame: usize,
    cam: Option<usize>,
    point: usize,
    pixel: Vector2<f64>,
}

struct Problem<'a> {
    intr: &'a CameraIntrinsics,
    frames: &'a BTreeMap<usize, RigidPose>,
    obs: Vec<Obs>,
    obs_by_point: Vec<Vec<usize>>,
    num_cams: usize,
    delta: f64,
}

#[derive(Clone)]
struct State {
    poses: Vec<RigidPose>,
    points: Vec<Vector3<f64>>,
}

impl Problem<'_> {
    fn pose<'s>(&'s self, state: &'s State, o: &Obs) -> &'s RigidPose {
        match o.cam {
            Some(c) => &state.poses[c],
            None => &self.frames[&o.frame],
        }
    }

    fn cost(&self, state: &State) -> Option<f64> {
        let mut total = 0.0;
        for o in &self.obs {
            let pc = self.pose(state, o).transform(&state.points[o.point]);
            let q = self.intr.project(&pc).ok()?;
            total += huber((q - o.pixel).norm_squared(), self.delta);
        }
        Some(0.5 * total)
    }

    /// Solves the damped normal equations; `None` when the reduced system is not positive definite.
    fn step(&self, state: &State, lambda: f64) -> Option<State> {
        let nc = self.num_cams;
        let np = state.points.len();
        let mut hcc = vec![Matrix6::zeros(); nc];
        let mut gc = vec![Vector6::zeros(); nc];
        let mut hpp = vec![Matrix3::zeros(); np];
        let mut gp = vec![Vector3::zeros(); np];
        let mut w_blocks: Vec<Matrix6x3> = vec![Matrix6x3::zeros(); self.obs.len()];

        for (k, o) in self.obs.iter().enumerate() {
            let (r, jc, jp) =
                observation_jacobian(self.intr, self.pose(state, o), &state.points[o.point], &o.pixel).ok()?;
            let w = huber_weight(r.norm_squared(), self.delta);
            hpp[o.point] += w * jp.transpose() * jp;
            gp[o.point] -= w * jp.transpose() * r;
            if let Some(c) = o.cam {
                hcc[c] += w * jc.transpose() * jc;
                gc[c] -= w * jc.transpose() * r;
                w_blocks[k] = w * jc.transpose() * jp;
            }
        }

        let damp6 = |m: &mut Matrix6| {
            for i in 0..6 {
                m[(i, i)] += lambda * m[(i, i)].max(1e-12);
            }
        };
        let mut s = DMatrix::zeros(6 * nc, 6 * nc);
        let mut rhs = DVector::zeros(6 * nc);
        for c in 0..nc {
            let mut h = hcc[c];
            damp6(&mut h);
            s.fixed_view_mut::<6, 6>(6 * c, 6 * c).copy_from(&h);
            rhs.fixed_rows_mut::<6>(6 * c).copy_from(&gc[c]);
        }
        let mut vinv = vec![Matrix3::zeros(); np];
        for p in 0..np {
            let mut v = hpp[p];
            for i in 0..3 {
                v[(i, i)] += lambda * v[(i, i)].max(1e-12);
            }
            vinv[p] = v.try_inverse()?;
            let cams: Vec<(usize, Matrix6x3)> = self.obs_by_point[p]
                .iter()
                .filter_map(|&k| self.obs[k].cam.map(|c| (c, w_blocks[k])))
                .collect();
            for &(ci, wi) in &cams {
                let wv = wi * vinv[p];
                let mut r = rhs.fixed_rows_mut::<6>(6 * ci);
                r -= wv * gp[p];
                for &(cj, wj) in &cams {
                    let mut blk = s.fixed_view_mut::<6, 6>(6 * ci, 6 * cj);
                    blk -= wv * wj.transpose();
                }
            }
        }

        let dc = if nc > 0 {
            s.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let mut next = state.clone();
        for c in 0..nc {
            let d = dc.fixed_rows::<6>(6 * c);
            next.poses[c] = state.poses[c].perturbed(&Vector3::new(d[0], d[1], d[2]), &Vector3::new(d[3], d[4], d[5]));
        }
        for p in 0..np {
            let mut g = gp[p];
            for &k in &self.obs_by_point[p] {
                if let Some(c) = self.obs[k].cam {
                    g -= w_blocks[k].transpose() * dc.fixed_rows::<6>(6 * c);
                }
            }
            next.points[p] = state.points[p] + vinv[p] * g;
        }
        if next.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return None;
        }
        Some(next)
    }
}

/// Optimizes every registered frame outside `fixed` and every triangulated point.
pub fn bundle_adjust(recon: &mut Reconstruction, fixed: &BTreeSet<usize>, settings: &BaSettings) -> BaReport {
    let variable: BTreeSet<usize> = recon.frames.keys().copied().filter(|f| !fixed.contains(f)).collect();
    let tracks: Vec<usize> = (0..recon.tracks.len())
        .filter(|&t| recon.tracks[t].point3d.is_some())
        .collect();
    run(recon, &variable, &tracks, settings)
}

/// Optimizes the `variable` frames and the points they observe; all other frames stay fixed.
pub fn bundle_adjust_frames(recon: &mut Reconstruction, variable: &BTreeSet<usize>, settings: &BaSettings) -> BaReport {
    let tracks: Vec<usize> = (0..recon.tracks.len())
        .filter(|&t| {
            let tr = &recon.tracks[t];
            tr.point3d.is_some() && tr.observations.iter().any(|o| variable.contains(&o.image))
        })
        .collect();
    run(recon, variable, &tracks, settings)
}

fn run(recon: &mut Reconstruction, variable: &BTreeSet<usize>, tracks: &[usize], settings: &BaSettings) -> BaReport {
    let var_frames: Vec<usize> = variable
        .iter()
        .copied()
        .filter(|f| recon.frames.contains_key(f))
        .collect();
    let cam_index: BTreeMap<usize, usize> = var_frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let mut obs = Vec::new();
    let mut obs_by_point = vec![Vec::new(); tracks.len()];
    let mut points = Vec::with_capacity(tracks.len());
    for (pi, &t) in tracks.iter().enumerate() {
        let tr = &recon.tracks[t];
        let p = tr.point3d.expect("selected tracks are triangulated");
        points.push(p);
        for o in &tr.observations {
            let Some(pose) = recon.frames.get(&o.image) else {
                continue;
            };
            if recon.intrinsics.project(&pose.transform(&p)).is_err() {
                continue;
            }
            obs_by_point[pi].push(obs.len());
            obs.push(Obs {
                frame: o.image,
                cam: cam_index.get(&o.image).copied(),
                point: pi,
                pixel: o.pixel,
            });
        }
    }
    let mut state = State {
        poses: var_frames.iter().map(|f| recon.frames[f]).collect(),
        points,
    };
    let mut report = BaReport {
        observations: obs.len(),
        ..BaReport::default()
    };

    {
        let problem = Problem {
            intr: &recon.intrinsics,
            frames: &recon.frames,
            obs,
            obs_by_point,
            num_cams: var_frames.len(),
            delta: settings.huber_delta,
        };
        let mut cost = problem.cost(&state).unwrap_or(0.0);
        report.initial_cost = cost;
        report.cost_history.push(cost);
        let mut lambda = settings.initial_lambda;
        'outer: while report.iterations < settings.max_iterations {
            if cost <= 1e-30 {
                report.converged = true;
                break;
            }
            report.iterations += 1;
            loop {
                let candidate = problem.step(&state, lambda);
                let new_cost = candidate.as_ref().and_then(|c| problem.cost(c));
                match (candidate, new_cost) {
                    (Some(c), Some(nc)) if nc <= cost => {
                        let rel = (cost - nc) / cost.max(1e-300);
                        state = c;
                        cost = nc;
                        report.cost_history.push(cost);
                        lambda = (lambda / 10.0).max(1e-15);
                        if rel < settings.relative_tolerance {
                            report.converged = true;
                            break 'outer;
                        }
                        break;
                    }
                    _ => {
                        lambda *= 10.0;
                        if lambda > 1e16 {
                            report.converged = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
        report.final_cost = cost;
    }
    if !report.converged {
        log::warn!(
            "bundle adjustment stopped after {} iterations at cost {:.6e}",
            report.iterations,
            report.final_cost
        );
    }

    for (f, pose) in var_frames.iter().zip(&state.poses) {
        recon.frames.insert(*f, *pose);
    }
    for (&t, p) in tracks.iter().zip(&state.points) {
        recon.tracks[t].point3d = Some(*p);
    }
    report.pruned = prune_observations(recon, tracks, settings.max_reproj);
    report
}

/// Removes registered-frame observations of the given tracks that reproject at or beyond
/// `max_reproj` or lie behind the camera; tracks left with fewer than two registered views
/// lose their point. Returns the number of removed observations.
pub fn prune_observations(recon: &mut Reconstruction, tracks: &[usize], max_reproj: f64) -> usize {
    let mut pruned = 0;
    for &t in tracks {
        let Some(p) = recon.tracks[t].point3d else { continue };
        let bad: Vec<usize> = recon.tracks[t]
            .observations
            .iter()
            .filter(|o| recon.frames.contains_key(&o.image))
            .filter(|o| !recon.observation_error(o, &p).is_some_and(|e| e < max_reproj))
            .map(|o| o.image)
            .collect();
        let track = &mut recon.tracks[t];
        for img in &bad {
            track.remove_observation(*img);
        }
        pruned += bad.len();
        let views = track
            .observations
            .iter()
            .filter(|o| recon.frames.contains_key(&o.image))
            .count();
        if views < 2 {
            track.point3d = None;
            track.color = None;
        }
    }
    pruned
}

#[cfg(test)]
mod tests {
    use super::super::{Observation, Track};
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(240.0, (320.0, 240.0), [0.05, -0.01, 0.002, -0.0005], 640, 480)
    }

    /// Cameras on an arc looking at a cloud of points around (0, 0, 3).
    fn synthetic(num_frames: usize, num_points: usize, seed: u64) -> Reconstruction {
        let intr = intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recon = Reconstruction::new(intr, (0..num_frames).collect());
        let target = Vector3::new(0.0, 0.0, 3.0);
        for f in 0..num_frames {
            let pose = if f == 0 {
                RigidPose::identity()
            } else {
                let a = 0.15 * f as f64;
                let eye = Vector3::new(a.sin() * 1.5, 0.1 * f as f64, 3.0 - a.cos() * 3.0);
                RigidPose::look_at(&eye, &target, &Vector3::new(0.0, -1.0, 0.0))
            };
            recon.frames.insert(f, pose);
        }
        while recon.tracks.len() < num_points {
            let p = target
                + Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
            let observations: Vec<Observation> = recon
                .frames
                .iter()
                .filter_map(|(&f, pose)| {
                    let q = intr.project(&pose.transform(&p)).ok()?;
                    intr.contains(&q).then_some(Observation {
                        image: f,
                        keypoint: recon.tracks.len(),
                        pixel: q,
                    })
                })
                .collect();
            if observations.len() >= 2 {
                recon.tracks.push(Track {
                    observations,
                    point3d: Some(p),
                    color: None,
                });
            }
        }
        recon
    }

    fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn jacobian_matches_central_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let intr = intrinsics();
            let pose = RigidPose::new(
                Rotation3::new(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            );
            let dir = intr.unproject(&Vector2::new(rng.gen_range(10.0..630.0), rng.gen_range(10.0..470.0))).unwrap();
            let point = pose.inverse().transform(&(dir * rng.gen_range(0.5..5.0)));
            let pixel = Vector2::new(300.0, 200.0);
            let (_, jpose, jpoint) = observation_jacobian(&intr, &pose, &point, &pixel).unwrap();
            let h = 1e-6;
            let mut fd_pose = Matrix2x6::zeros();
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let shift = |s: f64| {
                    let p = pose.perturbed(&(d.fixed_rows::<3>(0) * s), &(d.fixed_rows::<3>(3) * s));
                    intr.project(&p.transform(&point)).unwrap()
                };
                fd_pose.set_column(k, &((shift(1.0) - shift(-1.0)) / (2.0 * h)));
            }
            let mut fd_point = Matrix2x3::zeros();
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                let plus = intr.project(&pose.transform(&(point + d))).unwrap();
                let minus = intr.project(&pose.transform(&(point - d))).unwrap();
                fd_point.set_column(k, &((plus - minus) / (2.0 * h)));
            }
            prop_assert!(relative_deviation(jpose.as_slice(), fd_pose.as_slice()) < 1e-4);
            prop_assert!(relative_deviation(jpoint.as_slice(), fd_point.as_slice()) < 1e-4);
        }
    }

    #[test]
    fn optimal_input_is_a_fixed_point() {
        let mut recon = synthetic(6, 80, 1);
        let before = recon.clone();
        let fixed = BTreeSet::from([0]);
        let report = bundle_adjust(&mut recon, &fixed, &BaSettings::default());
        assert!((report.final_cost - report.initial_cost).abs() < 1e-12);
        assert_eq!(report.pruned, 0);
        assert_eq!(recon.tracks.len(), before.tracks.len());
    }

    #[test]
    fn recovers_from_one_percent_perturbation() {
        let mut recon = synthetic(8, 150, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (f, pose) in recon.frames.iter_mut() {
            if *f == 0 {
                continue;
            }
            let scale = pose.translation.norm().max(1.0);
            let w = Vector3::from_fn(|_, _| rng.gen_range(-0.01..0.01));
            let t = Vector3::from_fn(|_, _| rng.gen_range(-0.01..0.01) * scale);
            *pose = pose.perturbed(&w, &t);
        }
        for t in recon.tracks.iter_mut() {
            let p = t.point3d.as_mut().unwrap();
            *p += Vector3::from_fn(|_, _| rng.gen_range(-0.01..0.01)) * p.norm();
        }
        let settings = BaSettings {
            max_iterations: 200,
            max_reproj: 1e9,
            ..BaSettings::default()
        };
        let report = bundle_adjust(&mut recon, &BTreeSet::from([0]), &settings);
        assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(
            recon.mean_reprojection_error() < 0.01,
            "{}",
            recon.mean_reprojection_error()
        );
        assert_eq!(recon.frames[&0], RigidPose::identity());
    }

    #[test]
    fn local_adjustment_keeps_other_frames() {
        let mut recon = synthetic(6, 100, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let moved = 5;
        let pose = recon.frames[&moved];
        recon.frames.insert(
            moved,
            pose.perturbed(
                &Vector3::from_fn(|_, _| rng.gen_range(-0.005..0.005)),
                &Vector3::zeros(),
            ),
        );
        let before = recon.frames.clone();
        let report = bundle_adjust_frames(&mut recon, &BTreeSet::from([moved]), &BaSettings::default());
        assert!(report.final_cost < report.initial_cost);
        for f in 0..5 {
            assert_eq!(recon.frames[&f], before[&f]);
        }
        assert!(recon.mean_reprojection_error() < 0.01);
    }

    #[test]
    fn gross_outliers_are_pruned() {
        let mut recon = synthetic(5, 60, 5);
        recon.tracks[0].observations[0].pixel += Vector2::new(40.0, -30.0);
        let report = bundle_adjust(&mut recon, &BTreeSet::from([0]), &BaSettings::default());
        assert!(report.pruned >= 1);
        assert!(recon.check_invariants(4.0).is_ok());
    }
}
