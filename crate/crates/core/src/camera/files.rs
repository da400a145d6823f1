use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use super::{CalibrationView, CameraIntrinsics};
use crate::error::{Error, Result};

/// Parses one view's correspondences: whitespace-separated `bx by ix iy` rows (with `#`
/// comments) or a JSON array of 4-element rows.
pub fn parse_correspondences(text: &str) -> Result<CalibrationView> {
    let trimmed = text.trim_start();
    let rows: Vec<[f64; 4]> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| Error::parse("correspondence JSON", e.line(), e.to_string()))?
    } else {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse("correspondences", lineno + 1, e.to_string()))?;
            let row: [f64; 4] = vals.try_into().map_err(|v: Vec<f64>| {
                Error::parse(
                    "correspondences",
                    lineno + 1,
                    format!("expected 4 values, found {}", v.len()),
                )
            })?;
            rows.push(row);
        }
        rows
    };
    if let Some(i) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::parse("correspondences", i + 1, "non-finite value"));
    }
    Ok(CalibrationView {
        correspondences: rows
            .into_iter()
            .map(|[bx, by, ix, iy]| (Vector3::new(bx, by, 0.0), Vector2::new(ix, iy)))
            .collect(),
    })
}

/// Loads every `.txt`/`.json` correspondence file of a directory, in file-name order.
pub fn load_calibration_dir(dir: &Path) -> Result<Vec<CalibrationView>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("txt") | Some("json")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            parse_correspondences(&text)
        })
        .collect()
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let intr: CameraIntrinsics = serde_json::from_str(&text)?;
    intr.validate()?;
    Ok(intr)
}

pub fn write_intrinsics(path: &Path, intr: &CameraIntrinsics) -> Result<()> {
    let text = serde_json::to_string_pretty(intr)?;
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}
