//! Stage drivers with their on-disk layout, and the chained end-to-end run.
//!
//! A run writes everything below one output directory:
//!
//! ```text
//! preprocess/  frame_%06d.png (selected channel), manifest.json
//! sparse/      cloud.ply, cameras.json, reconstruction.json
//! mesh/        mesh.ply, mesh.obj, filter_report.json
//! texture/     textured.obj, textured.mtl, atlas.png, texture.json
//! viewer/      mesh.obj, mesh.mtl, atlas.png, cameras.json, texture.json, frames/
//! report.json, timings.tsv
//! ```

mod bundle;
mod config;

pub use bundle::{export_viewer_bundle, BUNDLE_FRAME_MAX_SIDE};
pub use config::{PathsConfig, PipelineConfig};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use image::{GrayImage, RgbImage};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::camera::{read_intrinsics, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::features::{detect_all, match_exhaustive, FeatureCache, FeatureSet};
use crate::geometry::{PoseRecord, RigidPose};
use crate::io::{
    read_file, read_json, read_obj, to_json, write_file, write_mtl, write_obj, write_ply, CamerasManifest, PlyData,
    ReconstructionFile, TextureTable,
};
use crate::meshgen::{mesh_from_cloud, FilterReport, MeshgenOutput, PointCloud, TriangleMesh};
use crate::preprocess::{
    dedup_indices, extract_plane, frame_file_name, list_frames, load_frames, FrameImage, FrameRecord,
    PreprocessManifest,
};
use crate::sfm::{compute_stats, IncrementalMapper, Reconstruction, ReconstructionStats};
use crate::synth::{evaluate, render_views, EvalReport, SceneSpec, SyntheticScene};
use crate::texturing::{bake_atlas, select_views, TexturedMesh, ViewAssignment};

pub const PREPROCESS_DIR: &str = "preprocess";
pub const SPARSE_DIR: &str = "sparse";
pub const MESH_DIR: &str = "mesh";
pub const TEXTURE_DIR: &str = "texture";
pub const VIEWER_DIR: &str = "viewer";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.tsv";
/// Scene description written by the synthetic renderer next to its frames.
pub const SCENE_FILE: &str = "scene.json";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
/// Ground-truth world-to-camera poses of a synthetic sequence, one per frame.
pub const POSES_FILE: &str = "poses.json";

/// Frames after channel extraction and duplicate removal.
pub struct Preprocessed {
    pub frames: Vec<FrameRecord>,
    pub manifest: PreprocessManifest,
}

impl Preprocessed {
    pub fn images(&self) -> Vec<GrayImage> {
        self.frames.iter().map(|f| f.image.to_gray()).collect()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.index).collect()
    }
}

/// Loads `input`, restricts it to `frame_range` (by file index), keeps the configured
/// channel and drops near-duplicates.
pub fn preprocess(input: &Path, cfg: &PipelineConfig) -> Result<Preprocessed> {
    let mut frames = load_frames(input)?;
    let input_count = frames.len();
    if let Some([begin, end]) = cfg.frame_range {
        frames.retain(|f| (begin..end).contains(&f.index));
    }
    if frames.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no frames selected from {}",
            input.display()
        )));
    }
    let plane = cfg
        .channel
        .plane_index()
        .ok_or_else(|| Error::Config("channel must be red, green or blue".into()))?;
    for f in &mut frames {
        if let FrameImage::Rgb(rgb) = &f.image {
            f.image = FrameImage::Gray(extract_plane(rgb, plane));
        }
        f.channel = cfg.channel;
    }
    let kept = dedup_indices(&frames, cfg.dedup_tau)?;
    let frames: Vec<FrameRecord> = kept.into_iter().map(|i| frames[i].clone()).collect();
    let manifest = PreprocessManifest {
        channel: cfg.channel,
        tau: cfg.dedup_tau,
        input_count,
        kept: frames.iter().map(|f| f.index).collect(),
    };
    Ok(Preprocessed { frames, manifest })
}

pub fn write_preprocessed(pre: &Preprocessed, dir: &Path) -> Result<()> {
    for f in &pre.frames {
        let path = dir.join(frame_file_name(f.index));
        write_file(&path, encode_png(&f.image.to_gray())?)?;
    }
    write_file(&dir.join("manifest.json"), to_json(&pre.manifest)?)
}

/// Reads a directory written by [`write_preprocessed`] (or any single-channel frame set).
pub fn read_preprocessed(dir: &Path) -> Result<(Vec<GrayImage>, Vec<usize>)> {
    let mut images = Vec::new();
    let mut ids = Vec::new();
    for (id, path) in list_frames(dir)? {
        images.push(image::open(&path)?.to_luma8());
        ids.push(id);
    }
    Ok((images, ids))
}

/// Renders a synthetic sequence into `dir` in the layout [`run_pipeline`] reads: colour
/// frames, intrinsics, ground-truth poses and the scene description.
pub fn render_synthetic(spec: &SceneSpec, dir: &Path) -> Result<SyntheticScene> {
    let scene = SyntheticScene::generate(spec)?;
    let intr = scene.intrinsics();
    let views = render_views(&scene, &intr)?;
    for (i, v) in views.iter().enumerate() {
        write_file(&dir.join(frame_file_name(i)), encode_rgb_png(&v.image)?)?;
    }
    let poses: Vec<PoseRecord> = scene.trajectory.iter().map(PoseRecord::from).collect();
    write_file(&dir.join(INTRINSICS_FILE), to_json(&intr)?)?;
    write_file(&dir.join(POSES_FILE), to_json(&poses)?)?;
    write_file(&dir.join(SCENE_FILE), to_json(spec)?)?;
    Ok(scene)
}

fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn detect_features(images: &[GrayImage], cfg: &PipelineConfig) -> Result<Vec<FeatureSet>> {
    match &cfg.paths.feature_cache {
        None => detect_all(images, &cfg.sift),
        Some(dir) => {
            let cache = FeatureCache::new(dir);
            images.iter().map(|img| cache.detect(img, &cfg.sift)).collect()
        }
    }
}

/// Incremental reconstruction of `images`, whose source frame indices are `ids`.
pub fn reconstruct(
    images: &[GrayImage],
    ids: &[usize],
    intr: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> Result<(Reconstruction, ReconstructionStats)> {
    if images.len() != ids.len() {
        return Err(Error::InvalidInput("one source id per image required".into()));
    }
    if images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "reconstruction needs at least 2 images, got {}",
            images.len()
        )));
    }
    let sfm = cfg.sfm();
    sfm.validate()?;
    intr.validate()?;
    let features = detect_features(images, cfg)?;
    let matches = match_exhaustive(&features, sfm.match_ratio);
    let mut recon = IncrementalMapper::new(*intr, &features, &matches, Some(images), &sfm).run()?;
    recon.input_image_ids = ids.to_vec();
    let stats = compute_stats(&recon);
    Ok((recon, stats))
}

pub fn write_sparse(recon: &Reconstruction, dir: &Path) -> Result<()> {
    let cloud = PointCloud::from_reconstruction(recon);
    let ply = PlyData {
        vertices: cloud.points,
        colors: cloud.colors,
        faces: Vec::new(),
    };
    write_file(&dir.join("cloud.ply"), write_ply(&ply)?)?;
    let cameras = CamerasManifest::from_reconstruction(recon, frame_file_name);
    write_file(&dir.join("cameras.json"), to_json(&cameras)?)?;
    write_file(
        &dir.join("reconstruction.json"),
        to_json(&ReconstructionFile::from(recon))?,
    )
}

pub fn read_reconstruction(path: &Path) -> Result<Reconstruction> {
    read_json::<ReconstructionFile>(path)?.to_reconstruction()
}

/// Sparse cloud to closed mesh, with normals oriented towards the registered cameras.
pub fn mesh(recon: &Reconstruction, cfg: &PipelineConfig) -> Result<MeshgenOutput> {
    let cloud = PointCloud::from_reconstruction(recon);
    let centers: Vec<_> = recon.frames.iter().map(|(&i, p)| (i, p.center())).collect();
    mesh_from_cloud(&cloud, &centers, &cfg.meshgen(), cfg.mesh_seed())
}

pub fn write_mesh(out: &MeshgenOutput, dir: &Path) -> Result<()> {
    let ply = PlyData {
        vertices: out.mesh.vertices.clone(),
        colors: None,
        faces: out.mesh.triangles.clone(),
    };
    write_file(&dir.join("mesh.ply"), write_ply(&ply)?)?;
    write_file(&dir.join("mesh.obj"), write_obj(&out.mesh, None, None)?)?;
    write_file(&dir.join("filter_report.json"), to_json(&out.report)?)
}

/// Reads a triangle mesh from PLY or OBJ, chosen by extension.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let bytes = read_file(path)?;
    let mesh = match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => {
            let ply = crate::io::read_ply(&bytes)?;
            TriangleMesh::new(ply.vertices, ply.faces)
        }
        Some("obj") => read_obj(&String::from_utf8_lossy(&bytes))?.to_mesh(),
        _ => {
            return Err(Error::InvalidInput(format!(
                "{}: expected a .ply or .obj mesh",
                path.display()
            )))
        }
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Registered poses keyed by source frame index.
pub fn source_poses(recon: &Reconstruction) -> BTreeMap<usize, RigidPose> {
    recon
        .frames
        .iter()
        .map(|(&i, p)| (recon.input_image_ids.get(i).copied().unwrap_or(i), *p))
        .collect()
}

/// Loads `frame_%06d.png` of each id as colour; single-channel frames are replicated.
/// Fails listing every id whose image is missing.
pub fn load_colour_frames(dir: &Path, ids: impl IntoIterator<Item = usize>) -> Result<BTreeMap<usize, RgbImage>> {
    let mut images = BTreeMap::new();
    let mut missing = Vec::new();
    for id in ids {
        let path = dir.join(frame_file_name(id));
        if !path.is_file() {
            missing.push(id);
            continue;
        }
        images.insert(id, image::open(&path)?.to_rgb8());
    }
    if !missing.is_empty() {
        return Err(Error::Export(format!(
            "missing frame images in {} for ids {missing:?}",
            dir.display()
        )));
    }
    Ok(images)
}

/// View selection and atlas baking from the colour frames in `frames_dir`.
pub fn texture(
    mesh: &TriangleMesh,
    recon: &Reconstruction,
    frames_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<TexturedMesh> {
    let poses = source_poses(recon);
    let assignments = select_views(mesh, &recon.intrinsics, &poses, &cfg.texture)?;
    let used: std::collections::BTreeSet<usize> = assignments.views.iter().flatten().copied().collect();
    let images = load_colour_frames(frames_dir, used)?;
    let refs: BTreeMap<usize, &RgbImage> = images.iter().map(|(&k, v)| (k, v)).collect();
    bake_atlas(mesh, &assignments, &recon.intrinsics, &poses, &refs, &cfg.texture)
}

pub const TEXTURED_OBJ: &str = "textured.obj";
pub const TEXTURED_MTL: &str = "textured.mtl";
pub const ATLAS_PNG: &str = "atlas.png";
pub const TEXTURE_TABLE: &str = "texture.json";
const MATERIAL: &str = "atlas";

/// Writes the OBJ/MTL/PNG triple plus the chart table under the given OBJ and MTL names.
pub(crate) fn write_textured_as(tex: &TexturedMesh, dir: &Path, obj: &str, mtl: &str) -> Result<()> {
    let text = write_obj(&tex.mesh, Some(&tex.uvs), Some((mtl, MATERIAL)))?;
    write_file(&dir.join(obj), text)?;
    write_file(&dir.join(mtl), write_mtl(MATERIAL, ATLAS_PNG))?;
    write_file(&dir.join(ATLAS_PNG), encode_rgb_png(&tex.atlas)?)?;
    write_file(&dir.join(TEXTURE_TABLE), to_json(&TextureTable::new(tex, ATLAS_PNG))?)
}

pub fn write_textured(tex: &TexturedMesh, dir: &Path) -> Result<()> {
    write_textured_as(tex, dir, TEXTURED_OBJ, TEXTURED_MTL)
}

/// Reads back a directory written by [`write_textured`]. Selection scores are not stored
/// and come back as zero.
pub fn read_textured(dir: &Path) -> Result<TexturedMesh> {
    let obj = read_obj(&String::from_utf8_lossy(&read_file(&dir.join(TEXTURED_OBJ))?))?;
    let table: TextureTable = read_json(&dir.join(TEXTURE_TABLE))?;
    let atlas = image::open(dir.join(&table.atlas))?.to_rgb8();
    let mut mesh = obj.to_mesh();
    mesh.validate()?;
    if obj.normals.len() == mesh.vertices.len() {
        mesh.normals = Some(obj.normals.clone());
    }
    let uvs = obj
        .faces
        .iter()
        .map(|f| {
            let mut corner = [Vector2::zeros(); 3];
            for (c, v) in corner.iter_mut().zip(f) {
                *c = *v
                    .uv
                    .and_then(|i| obj.uvs.get(i as usize))
                    .ok_or_else(|| Error::InvalidInput("textured OBJ face without texture coordinates".into()))?;
            }
            Ok(corner)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = mesh.triangles.len();
    let assigned = table.views.iter().flatten().count();
    if table.views.len() != n || table.charts.len() != assigned {
        return Err(Error::InvalidInput(format!(
            "texture table has {} views and {} charts for {n} triangles with {assigned} assigned",
            table.views.len(),
            table.charts.len()
        )));
    }
    Ok(TexturedMesh {
        mesh,
        uvs,
        atlas,
        assignments: ViewAssignment {
            views: table.views,
            scores: vec![0.0; n],
        },
        charts: table.charts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSummary {
    pub filter: FilterSummary,
    pub oriented_points: usize,
    pub vertices: usize,
    pub triangles: usize,
    pub closed_manifold: bool,
    pub euler_characteristic: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSummary {
    pub input_points: usize,
    pub global_mean: f64,
    pub global_std: f64,
    pub threshold: f64,
    pub inlier_count: usize,
}

impl FilterSummary {
    fn new(report: &FilterReport) -> Self {
        Self {
            input_points: report.mean_dist_per_point.len(),
            global_mean: report.global_mean,
            global_std: report.global_std,
            threshold: report.threshold,
            inlier_count: report.inlier_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSummary {
    pub atlas_width: u32,
    pub atlas_height: u32,
    pub triangles: usize,
    pub assigned: usize,
}

/// Machine-readable record of a run. Wall-clock timings live in a separate file so that the
/// report itself is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub input: PathBuf,
    pub seed: u64,
    /// Effective configuration; the output directory is omitted.
    pub config: PipelineConfig,
    pub preprocess: PreprocessManifest,
    pub stats: ReconstructionStats,
    pub mean_reprojection_error: f64,
    pub mesh: MeshSummary,
    pub texture: TextureSummary,
    /// Present when the input directory carries a synthetic scene description.
    pub evaluation: Option<EvalReport>,
}

/// Wall-clock duration per stage, in execution order.
#[derive(Clone, Debug, Default)]
pub struct Timings(pub Vec<(&'static str, Duration)>);

impl Timings {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        });
        self.0.push((stage, start.elapsed()));
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("stage\tseconds\n");
        for (stage, d) in &self.0 {
            s.push_str(&format!("{stage}\t{:.3}\n", d.as_secs_f64()));
        }
        s
    }
}

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("paths.{name} is required")))
}

/// preprocess → reconstruct → mesh → texture → viewer export, all under `paths.out`.
/// A failing stage surfaces as [`Error::Stage`] naming it.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(RunReport, Timings)> {
    cfg.validate()?;
    let input = required(&cfg.paths.input, "input")?;
    let intr_path = required(&cfg.paths.intrinsics, "intrinsics")?;
    let out = required(&cfg.paths.out, "out")?;
    let mut timings = Timings::default();

    let pre = timings.time("preprocess", || {
        let pre = preprocess(input, cfg)?;
        write_preprocessed(&pre, &out.join(PREPROCESS_DIR))?;
        Ok(pre)
    })?;
    let (recon, stats) = timings.time("reconstruct", || {
        let intr = read_intrinsics(intr_path)?;
        let (recon, stats) = reconstruct(&pre.images(), &pre.ids(), &intr, cfg)?;
        write_sparse(&recon, &out.join(SPARSE_DIR))?;
        Ok((recon, stats))
    })?;
    let meshed = timings.time("mesh", || {
        let m = mesh(&recon, cfg)?;
        write_mesh(&m, &out.join(MESH_DIR))?;
        Ok(m)
    })?;
    let tex = timings.time("texture", || {
        let tex = texture(&meshed.mesh, &recon, input, cfg)?;
        write_textured(&tex, &out.join(TEXTURE_DIR))?;
        Ok(tex)
    })?;
    timings.time("export-viewer", || {
        export_viewer_bundle(&recon, &tex, input, &out.join(VIEWER_DIR)).map(|_| ())
    })?;
    let scene_path = input.join(SCENE_FILE);
    let evaluation = if scene_path.is_file() {
        Some(timings.time("evaluate", || {
            let scene = SyntheticScene::generate(&read_json::<SceneSpec>(&scene_path)?)?;
            evaluate(&recon, Some(&meshed.mesh.vertices), &scene)
        })?)
    } else {
        None
    };

    let mut recorded = cfg.clone();
    recorded.paths.out = None;
    let report = RunReport {
        input: input.to_path_buf(),
        seed: cfg.ransac_seed,
        config: recorded,
        preprocess: pre.manifest,
        stats,
        mean_reprojection_error: recon.mean_reprojection_error(),
        mesh: MeshSummary {
            filter: FilterSummary::new(&meshed.report),
            oriented_points: meshed.oriented.len(),
            vertices: meshed.mesh.vertices.len(),
            triangles: meshed.mesh.triangles.len(),
            closed_manifold: meshed.mesh.is_closed_manifold(),
            euler_characteristic: meshed.mesh.euler_characteristic(),
        },
        texture: TextureSummary {
            atlas_width: tex.atlas.width(),
            atlas_height: tex.atlas.height(),
            triangles: tex.mesh.triangles.len(),
            assigned: tex.assignments.assigned(),
        },
        evaluation,
    };
    write_file(&out.join(REPORT_FILE), to_json(&report)?)?;
    write_file(&out.join(TIMINGS_FILE), timings.to_tsv())?;
    Ok((report, timings))
}
