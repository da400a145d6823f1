use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{TextureParams, ViewAssignment};
use crate::camera::{sample_bilinear, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::geometry::RigidPose;
use crate::meshgen::TriangleMesh;

/// Empty texels between neighbouring charts.
pub const GUTTER: u32 = 2;

/// Fill colour of texels no view covers.
pub const UNASSIGNED_COLOR: [u8; 3] = [255, 0, 255];

/// Side of the reserved block that unassigned triangles map onto.
const MARKER_CELL: u32 = 2 * GUTTER + 1;

/// Placement of one triangle's chart: a right triangle with legs `size` whose right-angle
/// corner sits at texel `origin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub triangle: usize,
    /// Frame whose image every texel of this chart was sampled from.
    pub view: usize,
    pub origin: [u32; 2],
    pub size: u32,
}

#[derive(Clone, Debug)]
pub struct TexturedMesh {
    pub mesh: TriangleMesh,
    /// Texture coordinates per triangle corner; `v` grows upwards.
    pub uvs: Vec<[Vector2<f64>; 3]>,
    pub atlas: RgbImage,
    pub assignments: ViewAssignment,
    pub charts: Vec<Chart>,
}

impl TexturedMesh {
    /// Atlas texel centre of barycentric point `(b1, b2)` in `chart`.
    pub fn chart_point(chart: &Chart, b1: f64, b2: f64) -> Vector2<f64> {
        Vector2::new(
            chart.origin[0] as f64 + b1 * chart.size as f64,
            chart.origin[1] as f64 + b2 * chart.size as f64,
        )
    }
}

/// Chart leg in texels for a triangle whose projection covers `area` pixels.
fn chart_size(area: f64, params: &TextureParams) -> u32 {
    let s = ((2.0 * area).sqrt() * params.texel_density).ceil();
    if s.is_finite() {
        (s as u32).clamp(1, params.max_chart)
    } else {
        1
    }
}

fn project(intr: &CameraIntrinsics, pose: &RigidPose, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    intr.project(&pose.transform(p)).ok()
}

/// Shelf packing of square cells, tallest first; returns cell origins and the atlas size.
fn pack(cells: &[u32]) -> (Vec<[u32; 2]>, u32, u32) {
    let total: u64 = cells.iter().map(|&c| c as u64 * c as u64).sum();
    let widest = cells.iter().copied().max().unwrap_or(1);
    let width = ((total as f64).sqrt().ceil() as u32).max(widest).next_multiple_of(4);
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| cells[b].cmp(&cells[a]).then(a.cmp(&b)));
    let mut origins = vec![[0u32; 2]; cells.len()];
    let (mut x, mut y, mut shelf) = (0u32, 0u32, 0u32);
    for i in order {
        if x + cells[i] > width {
            y += shelf;
            x = 0;
            shelf = 0;
        }
        origins[i] = [x, y];
        x += cells[i];
        shelf = shelf.max(cells[i]);
    }
    (origins, width, y + shelf)
}

/// Bakes one chart per assigned triangle by sampling its assigned frame.
///
/// `images` maps frame ids to the colour frames the poses in `frames` refer to.
pub fn bake_atlas(
    mesh: &TriangleMesh,
    assignments: &ViewAssignment,
    intr: &CameraIntrinsics,
    frames: &BTreeMap<usize, RigidPose>,
    images: &BTreeMap<usize, &RgbImage>,
    params: &TextureParams,
) -> Result<TexturedMesh> {
    params.validate()?;
    if assignments.views.len() != mesh.triangles.len() {
        return Err(Error::InvalidInput(
            "assignment count differs from triangle count".into(),
        ));
    }
    let mut sizes = Vec::new();
    let mut assigned = Vec::new();
    for (t, view) in assignments.views.iter().enumerate() {
        let Some(view) = *view else { continue };
        let (Some(pose), Some(image)) = (frames.get(&view), images.get(&view)) else {
            return Err(Error::InvalidInput(format!(
                "no pose or image for assigned frame {view}"
            )));
        };
        if image.dimensions() != (intr.width, intr.height) {
            return Err(Error::InvalidInput(format!(
                "frame {view} does not match the camera size"
            )));
        }
        let px: Vec<Vector2<f64>> = mesh
            .corners(t)
            .iter()
            .map(|v| project(intr, pose, v))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidInput(format!("triangle {t} does not project into frame {view}")))?;
        let area = 0.5 * ((px[1] - px[0]).perp(&(px[2] - px[0]))).abs();
        sizes.push(chart_size(area, params));
        assigned.push((t, view));
    }
    let mut cells: Vec<u32> = vec![MARKER_CELL];
    cells.extend(sizes.iter().map(|s| s + 2 * GUTTER));
    let (origins, width, height) = pack(&cells);
    let required = width.max(height);
    if required > params.texel_budget {
        return Err(Error::AtlasOverflow {
            budget: params.texel_budget,
            required,
        });
    }

    let charts: Vec<Chart> = assigned
        .iter()
        .zip(&sizes)
        .zip(&origins[1..])
        .map(|((&(triangle, view), &size), o)| Chart {
            triangle,
            view,
            origin: [o[0] + GUTTER, o[1] + GUTTER],
            size,
        })
        .collect();

    // Each chart fills its texels independently; the atlas is assembled afterwards in order.
    let blocks: Vec<Vec<([u32; 2], [u8; 3])>> = charts
        .par_iter()
        .map(|chart| {
            let pose = &frames[&chart.view];
            let image = images[&chart.view];
            let corners = mesh.corners(chart.triangle);
            let s = chart.size as f64;
            let mut texels = Vec::new();
            // One texel of dilation into the gutter keeps filtering from pulling in the background.
            let reach = chart.size + 1;
            for dy in 0..=reach {
                for dx in 0..=reach {
                    let (Some(x), Some(y)) = (
                        (chart.origin[0] + dx).checked_sub(1),
                        (chart.origin[1] + dy).checked_sub(1),
                    ) else {
                        continue;
                    };
                    let b1 = (x as f64 + 0.5 - chart.origin[0] as f64) / s;
                    let b2 = (y as f64 + 0.5 - chart.origin[1] as f64) / s;
                    if b1 + b2 > 1.0 + 1.0 / s || b1 < -1.0 / s || b2 < -1.0 / s {
                        continue;
                    }
                    let (b1, b2) = clamp_barycentric(b1, b2);
                    let p = corners[0] * (1.0 - b1 - b2) + corners[1] * b1 + corners[2] * b2;
                    let color = project(intr, pose, &p)
                        .map(|px| sample_clamped(image, &px))
                        .unwrap_or(UNASSIGNED_COLOR);
                    texels.push(([x, y], color));
                }
            }
            texels
        })
        .collect();

    let mut atlas = RgbImage::from_pixel(width, height, Rgb(UNASSIGNED_COLOR));
    for block in &blocks {
        for &([x, y], c) in block {
            atlas.put_pixel(x, y, Rgb(c));
        }
    }

    let to_uv = |p: Vector2<f64>| Vector2::new(p.x / width as f64, 1.0 - p.y / height as f64);
    let marker = to_uv(Vector2::new(
        origins[0][0] as f64 + MARKER_CELL as f64 / 2.0,
        origins[0][1] as f64 + MARKER_CELL as f64 / 2.0,
    ));
    let mut uvs = vec![[marker; 3]; mesh.triangles.len()];
    for chart in &charts {
        uvs[chart.triangle] =
            [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)].map(|(b1, b2)| to_uv(TexturedMesh::chart_point(chart, b1, b2)));
    }
    Ok(TexturedMesh {
        mesh: mesh.clone(),
        uvs,
        atlas,
        assignments: assignments.clone(),
        charts,
    })
}

/// Nearest point of the reference triangle `b1, b2 ≥ 0, b1 + b2 ≤ 1`.
fn clamp_barycentric(b1: f64, b2: f64) -> (f64, f64) {
    let (b1, b2) = (b1.max(0.0), b2.max(0.0));
    let sum = b1 + b2;
    if sum > 1.0 {
        (b1 / sum, b2 / sum)
    } else {
        (b1, b2)
    }
}

fn sample_clamped(image: &RgbImage, px: &Vector2<f64>) -> [u8; 3] {
    let (w, h) = image.dimensions();
    let at = Vector2::new(px.x.clamp(0.0, (w - 1) as f64), px.y.clamp(0.0, (h - 1) as f64));
    let v = sample_bilinear(image.as_raw(), w, h, 3, &at).expect("clamped inside the image");
    [0, 1, 2].map(|c| v[c].round().clamp(0.0, 255.0) as u8)
}

#[cfg(test)]
mod tests {
    use super::super::select_views;
    use super::super::tests::{camera, random_config};
    use super::*;

    fn frontal() -> (TriangleMesh, BTreeMap<usize, RigidPose>) {
        let mesh = TriangleMesh::new(
            vec![
                Vector3::new(-0.3, -0.3, 0.0),
                Vector3::new(0.3, -0.3, 0.0),
                Vector3::new(0.0, 0.3, 0.0),
            ],
            vec![[0, 1, 2]],
        );
        let pose = RigidPose::look_at(&Vector3::new(0.0, 0.0, 1.0), &Vector3::zeros(), &Vector3::y());
        (mesh, BTreeMap::from([(3, pose)]))
    }

    #[test]
    fn constant_white_chart() {
        let (mesh, frames) = frontal();
        let white = RgbImage::from_pixel(320, 240, Rgb([255, 255, 255]));
        let images = BTreeMap::from([(3, &white)]);
        let params = TextureParams::default();
        let sel = select_views(&mesh, &camera(), &frames, &params).unwrap();
        assert_eq!(sel.views, vec![Some(3)]);
        let tex = bake_atlas(&mesh, &sel, &camera(), &frames, &images, &params).unwrap();
        let chart = &tex.charts[0];
        assert_eq!(chart.view, 3);
        let s = chart.size;
        assert!(s > 4);
        for y in 0..s {
            for x in 0..s - y {
                let p = tex.atlas.get_pixel(chart.origin[0] + x, chart.origin[1] + y);
                assert_eq!(p.0, [255, 255, 255]);
            }
        }
        for uv in &tex.uvs[0] {
            assert!((0.0..=1.0).contains(&uv.x) && (0.0..=1.0).contains(&uv.y));
        }
    }

    #[test]
    fn no_assignments_give_magenta_atlas() {
        let (mesh, frames) = frontal();
        let sel = ViewAssignment {
            views: vec![None],
            scores: vec![0.0],
        };
        let tex = bake_atlas(
            &mesh,
            &sel,
            &camera(),
            &frames,
            &BTreeMap::new(),
            &TextureParams::default(),
        )
        .unwrap();
        assert!(tex.charts.is_empty());
        assert!(tex.atlas.pixels().all(|p| p.0 == UNASSIGNED_COLOR));
        let mut buf = std::io::Cursor::new(Vec::new());
        tex.atlas.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        assert!(!buf.into_inner().is_empty());
    }

    #[test]
    fn overflow_names_required_budget() {
        let (mesh, frames) = frontal();
        let white = RgbImage::from_pixel(320, 240, Rgb([255, 255, 255]));
        let images = BTreeMap::from([(3, &white)]);
        let params = TextureParams {
            texel_budget: 8,
            max_chart: 64,
            texel_density: 2.0,
            ..TextureParams::default()
        };
        let sel = select_views(&mesh, &camera(), &frames, &params).unwrap();
        match bake_atlas(&mesh, &sel, &camera(), &frames, &images, &params) {
            Err(Error::AtlasOverflow { budget: 8, required }) => assert!(required > 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn charts_do_not_overlap_and_sample_their_view() {
        let (mesh, frames) = random_config(11, 60, 6);
        let params = TextureParams {
            occlusion: false,
            ..TextureParams::default()
        };
        // Each frame is a flat colour keyed by its id, so every texel reveals its source.
        let owned: BTreeMap<usize, RgbImage> = frames
            .keys()
            .map(|&id| {
                (
                    id,
                    RgbImage::from_pixel(320, 240, Rgb([(id % 251) as u8, (id / 251) as u8, 7])),
                )
            })
            .collect();
        let images: BTreeMap<usize, &RgbImage> = owned.iter().map(|(k, v)| (*k, v)).collect();
        let sel = select_views(&mesh, &camera(), &frames, &params).unwrap();
        let tex = bake_atlas(&mesh, &sel, &camera(), &frames, &images, &params).unwrap();
        assert_eq!(tex.charts.len(), sel.assigned());
        let mut owner = vec![usize::MAX; (tex.atlas.width() * tex.atlas.height()) as usize];
        for (i, chart) in tex.charts.iter().enumerate() {
            let lo = [chart.origin[0] - GUTTER, chart.origin[1] - GUTTER];
            for y in lo[1]..lo[1] + chart.size + 2 * GUTTER {
                for x in lo[0]..lo[0] + chart.size + 2 * GUTTER {
                    let slot = &mut owner[(y * tex.atlas.width() + x) as usize];
                    assert_eq!(*slot, usize::MAX);
                    *slot = i;
                }
            }
            let expected = [(chart.view % 251) as u8, (chart.view / 251) as u8, 7];
            for y in 0..chart.size {
                for x in 0..chart.size - y {
                    assert_eq!(
                        tex.atlas.get_pixel(chart.origin[0] + x, chart.origin[1] + y).0,
                        expected
                    );
                }
            }
        }
    }
}
