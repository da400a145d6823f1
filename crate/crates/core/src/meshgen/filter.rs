use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::PointCloud;
use crate::error::{Error, Result};

/// Uniform random subset of exactly `n` points, kept in input order; the cloud itself when
/// it has at most `n` points.
pub fn downsample(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    if cloud.len() <= n {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, cloud.len(), n).into_vec();
    keep.sort_unstable();
    cloud.select(&keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// Target point count of the downsampling step.
    pub n: usize,
    /// Neighbourhood size as a fraction of the cloud size.
    pub neighbor_fraction: f64,
    pub sigma_multiplier: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            n: 10_000,
            neighbor_fraction: 0.1,
            sigma_multiplier: 2.0,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("filter n must be at least 10, got {}", self.n)));
        }
        if !(self.neighbor_fraction > 0.0 && self.neighbor_fraction < 1.0) {
            return Err(Error::Config(format!(
                "neighbor_fraction must lie in (0, 1), got {}",
                self.neighbor_fraction
            )));
        }
        if !(self.sigma_multiplier > 0.0 && self.sigma_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_multiplier must be positive, got {}",
                self.sigma_multiplier
            )));
        }
        Ok(())
    }
}

/// `⌈count · fraction⌉`, at least 1.
pub fn neighbor_count(count: usize, fraction: f64) -> usize {
    ((count as f64 * fraction).ceil() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterReport {
    pub mean_dist_per_point: Vec<f64>,
    pub global_mean: f64,
    pub global_std: f64,
    pub threshold: f64,
    pub inlier_count: usize,
}

/// Mean of sorted distances, summed smallest first.
pub fn mean_distance(sorted: impl Iterator<Item = f64>, k: usize) -> f64 {
    sorted.sum::<f64>() / k as f64
}

/// Mean and population standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Single-pass statistical outlier removal.
pub fn remove_outliers(cloud: &PointCloud, params: &FilterParams) -> Result<(PointCloud, FilterReport)> {
    if !(params.neighbor_fraction > 0.0 && params.neighbor_fraction < 1.0) || !(params.sigma_multiplier > 0.0) {
        return Err(Error::InvalidInput("invalid filter parameters".into()));
    }
    let n = cloud.len();
    let k = neighbor_count(n, params.neighbor_fraction);
    if n < 10 || n < k + 1 {
        return Err(Error::InvalidInput(format!(
            "outlier removal needs at least {} points, got {n}",
            (k + 1).max(10)
        )));
    }
    let tree = KdTree::new(&cloud.points);
    let mean_dist: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nn = tree.nearest(&cloud.points[i], k, Some(i));
            mean_distance(nn.iter().map(|x| x.distance), k)
        })
        .collect();
    let (global_mean, global_std) = mean_and_std(&mean_dist);
    let threshold = global_mean + params.sigma_multiplier * global_std;
    let keep: Vec<usize> = (0..n).filter(|&i| mean_dist[i] <= threshold).collect();
    let report = FilterReport {
        inlier_count: keep.len(),
        mean_dist_per_point: mean_dist,
        global_mean,
        global_std,
        threshold,
    };
    Ok((cloud.select(&keep), report))
}
