use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{SiftParams, DEFAULT_RATIO};
use crate::meshgen::{FilterParams, MeshgenParams, PoissonParams};
use crate::preprocess::{ChannelTag, DEFAULT_DEDUP_TAU};
use crate::sfm::SfmConfig;
use crate::texturing::TextureParams;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of `frame_%06d.png` colour or single-channel frames.
    pub input: Option<PathBuf>,
    pub intrinsics: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Directory for cached SIFT features; no caching when unset.
    pub feature_cache: Option<PathBuf>,
}

/// Settings of a full run. Every table and key is optional; missing ones take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub channel: ChannelTag,
    pub dedup_tau: f64,
    pub ratio_threshold: f32,
    pub max_reproj: f64,
    pub ransac_seed: u64,
    /// Half-open `[begin, end)` range of source frame indices, as in the file names.
    pub frame_range: Option<[usize; 2]>,
    pub sift: SiftParams,
    pub filter: FilterParams,
    pub poisson: PoissonParams,
    pub texture: TextureParams,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            channel: ChannelTag::Red,
            dedup_tau: DEFAULT_DEDUP_TAU,
            ratio_threshold: DEFAULT_RATIO,
            max_reproj: SfmConfig::default().max_reproj,
            ransac_seed: SfmConfig::default().seed,
            frame_range: None,
            sift: SiftParams::default(),
            filter: FilterParams::default(),
            poisson: PoissonParams::default(),
            texture: TextureParams::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Seed offset of the meshing stage relative to `ransac_seed`.
const MESH_SEED_OFFSET: u64 = 1;

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment, or of a `[key]` table header.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            let assigned = l
                .strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='));
            assigned || l.trim_end() == format!("[{key}]")
        })
        .map(|i| i + 1)
}

impl PipelineConfig {
    /// Parses TOML text; `origin` names the source in error messages, which carry a line number.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| line_of(text, s.start));
            Error::Config(format!("{origin}:{line}: {}", e.message().trim()))
        })?;
        cfg.check().map_err(|(key, msg)| {
            let line = key_line(text, key).unwrap_or(1);
            Error::Config(format!("{origin}:{line}: {msg}"))
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, msg)| Error::Config(msg))
    }

    /// Validates every field; the error names the offending top-level key.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.channel.plane_index().is_none() {
            return Err(("channel", "channel must be red, green or blue".into()));
        }
        if !(self.dedup_tau >= 0.0 && self.dedup_tau.is_finite()) {
            return Err((
                "dedup_tau",
                format!("dedup_tau must be non-negative, got {}", self.dedup_tau),
            ));
        }
        if let Some([b, e]) = self.frame_range {
            if b >= e {
                return Err(("frame_range", format!("frame_range [{b}, {e}) is empty")));
            }
        }
        let nested = |key: &'static str, r: Result<()>| r.map_err(|e| (key, format!("{key}: {e}")));
        nested("ratio_threshold", self.sfm().validate())?;
        nested("sift", self.sift.validate())?;
        nested("filter", self.filter.validate())?;
        nested("poisson", self.poisson.validate())?;
        nested("texture", self.texture.validate())?;
        Ok(())
    }

    pub fn sfm(&self) -> SfmConfig {
        SfmConfig {
            seed: self.ransac_seed,
            max_reproj: self.max_reproj,
            match_ratio: self.ratio_threshold,
            ..SfmConfig::default()
        }
    }

    pub fn meshgen(&self) -> MeshgenParams {
        MeshgenParams {
            filter: self.filter.clone(),
            poisson: self.poisson.clone(),
        }
    }

    pub fn mesh_seed(&self) -> u64 {
        self.ransac_seed.wrapping_add(MESH_SEED_OFFSET)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            PipelineConfig::from_toml("", "t.toml").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = PipelineConfig {
            channel: ChannelTag::Green,
            frame_range: Some([2, 30]),
            ..Default::default()
        };
        cfg.poisson.depth = 7;
        cfg.paths.input = Some("frames".into());
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text, "t.toml").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = "channel = \"red\"\n\n[filter]\nn = 500\nsigma = 2.0\n";
        let err = PipelineConfig::from_toml(text, "demo.toml").unwrap_err().to_string();
        assert!(err.contains("demo.toml:5:"), "{err}");
        assert!(err.contains("sigma"), "{err}");
    }

    #[test]
    fn type_error_reports_its_line() {
        let err = PipelineConfig::from_toml("dedup_tau = 1.0\nransac_seed = \"x\"\n", "c")
            .unwrap_err()
            .to_string();
        assert!(err.contains("c:2:"), "{err}");
    }

    #[test]
    fn out_of_range_values_report_their_line() {
        let err = PipelineConfig::from_toml("channel = \"blue\"\nratio_threshold = 1.5\n", "c")
            .unwrap_err()
            .to_string();
        assert!(err.contains("c:2:"), "{err}");
        let err = PipelineConfig::from_toml("[poisson]\ndepth = 12\n", "c")
            .unwrap_err()
            .to_string();
        assert!(err.contains("c:1:") && err.contains("depth"), "{err}");
        let err = PipelineConfig::from_toml("channel = \"rgb\"\n", "c")
            .unwrap_err()
            .to_string();
        assert!(err.contains("c:1:"), "{err}");
        assert!(PipelineConfig::from_toml("frame_range = [4, 4]\n", "c").is_err());
        assert!(PipelineConfig::from_toml("dedup_tau = -1.0\n", "c").is_err());
    }

    #[test]
    fn stage_seeds_derive_from_ransac_seed() {
        let cfg = PipelineConfig {
            ransac_seed: u64::MAX,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.sfm().seed, u64::MAX);
        assert_eq!(cfg.mesh_seed(), 0);
    }
}
