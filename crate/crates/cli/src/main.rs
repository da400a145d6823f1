use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gastro_core::camera::{calibrate, load_calibration_dir, read_intrinsics};
use gastro_core::io::{read_json, to_json, write_file};
use gastro_core::pipeline::{self, PipelineConfig};
use gastro_core::preprocess::ChannelTag;
use gastro_core::synth::{evaluate, SceneSpec, SyntheticScene, TextureVariant};
use gastro_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "gastro", version, about = "Monocular endoscopy reconstruction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate fisheye intrinsics from board correspondence files.
    Calibrate {
        /// Directory of correspondence text files, one per view.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select a channel, restrict the range and drop near-duplicate frames.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Sparse reconstruction of preprocessed frames.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Directory of preprocessed single-channel frames.
        #[arg(long)]
        frames: PathBuf,
    },
    /// Filtered, oriented and Poisson-meshed cloud of a reconstruction.
    Mesh {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reconstruction: PathBuf,
    },
    /// View selection and atlas baking.
    Texture {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reconstruction: PathBuf,
        /// Mesh as .ply or .obj.
        #[arg(long)]
        mesh: PathBuf,
        /// Directory of colour frames; defaults to the input directory.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Render a synthetic sequence with ground truth.
    RenderSynthetic {
        /// TOML scene description; flags override its values.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// `high` or `low`.
        #[arg(long)]
        texture: Option<TextureVariant>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a reconstruction of a synthetic sequence with its ground truth.
    Evaluate {
        #[arg(long)]
        reconstruction: PathBuf,
        /// `scene.json` written by render-synthetic.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the static bundle read by the viewer.
    ExportViewer {
        #[arg(long)]
        reconstruction: PathBuf,
        /// Directory written by the texture stage.
        #[arg(long)]
        textured: PathBuf,
        /// Directory of colour frames.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from frames to viewer bundle.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

/// Configuration file plus flag overrides; flags win over the file, the file over defaults.
#[derive(Args)]
struct Common {
    /// Pipeline TOML; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of frame_NNNNNN.png frames.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for cached features, reused across runs.
    #[arg(long)]
    feature_cache: Option<PathBuf>,
    /// Plane used for reconstruction: red, green or blue.
    #[arg(long)]
    channel: Option<ChannelTag>,
    /// Mean absolute difference below which a frame counts as a duplicate.
    #[arg(long)]
    dedup_tau: Option<f64>,
    /// Lowe ratio for descriptor matching.
    #[arg(long)]
    ratio_threshold: Option<f32>,
    /// Largest reprojection error kept, in pixels.
    #[arg(long)]
    max_reproj: Option<f64>,
    /// RANSAC seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Half-open source frame index range `BEGIN:END`.
    #[arg(long, value_parser = parse_range)]
    range: Option<[usize; 2]>,
    /// Poisson grid depth.
    #[arg(long)]
    depth: Option<u32>,
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(':').ok_or("expected BEGIN:END")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([parse(a)?, parse(b)?])
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                PipelineConfig::from_toml(&text, &path.display().to_string())?
            }
            None => PipelineConfig::default(),
        };
        let paths = &mut cfg.paths;
        for (dst, src) in [
            (&mut paths.input, &self.input),
            (&mut paths.intrinsics, &self.intrinsics),
            (&mut paths.out, &self.out),
            (&mut paths.feature_cache, &self.feature_cache),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if let Some(v) = self.channel {
            cfg.channel = v;
        }
        if let Some(v) = self.dedup_tau {
            cfg.dedup_tau = v;
        }
        if let Some(v) = self.ratio_threshold {
            cfg.ratio_threshold = v;
        }
        if let Some(v) = self.max_reproj {
            cfg.max_reproj = v;
        }
        if let Some(v) = self.seed {
            cfg.ransac_seed = v;
        }
        if let Some(v) = self.range {
            cfg.frame_range = Some(v);
        }
        if let Some(v) = self.depth {
            cfg.poisson.depth = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Error> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} (or paths.{flag} in the config) is required")))
}

enum Failure {
    Config(Error),
    Stage(String, Error),
    Other(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e),
            Error::Stage { stage, source } => Failure::Stage(stage, *source),
            other => Failure::Other(other),
        }
    }
}

/// Runs `f` as stage `name`; configuration errors keep their category.
fn stage<T>(name: &str, f: impl FnOnce() -> Result<T, Error>) -> Result<T, Failure> {
    log::info!("{name}");
    f().map_err(|e| match e {
        Error::Config(_) => Failure::Config(e),
        other => Failure::Stage(name.to_string(), other),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Calibrate {
            input,
            width,
            height,
            out,
        } => stage("calibrate", || {
            let views = load_calibration_dir(&input)?;
            let cal = calibrate(&views, width, height)?;
            write_file(&out.join(pipeline::INTRINSICS_FILE), to_json(&cal.intrinsics)?)?;
            let summary = serde_json::json!({
                "views": views.len(),
                "rms": cal.rms,
                "iterations": cal.iterations,
            });
            write_file(&out.join("calibration.json"), to_json(&summary)?)?;
            println!("calibrated {} views, rms {:.4} px", views.len(), cal.rms);
            Ok(())
        }),
        Command::Preprocess { common } => {
            let cfg = common.load()?;
            let input = required(&cfg.paths.input, "input").map_err(Failure::Config)?;
            let out = required(&cfg.paths.out, "out").map_err(Failure::Config)?;
            stage("preprocess", || {
                let pre = pipeline::preprocess(input, &cfg)?;
                pipeline::write_preprocessed(&pre, out)?;
                println!(
                    "kept {} of {} frames",
                    pre.manifest.kept.len(),
                    pre.manifest.input_count
                );
                Ok(())
            })
        }
        Command::Reconstruct { common, frames } => {
            let cfg = common.load()?;
            let intr = required(&cfg.paths.intrinsics, "intrinsics").map_err(Failure::Config)?;
            let out = required(&cfg.paths.out, "out").map_err(Failure::Config)?;
            stage("reconstruct", || {
                let intr = read_intrinsics(intr)?;
                let (images, ids) = pipeline::read_preprocessed(&frames)?;
                let (recon, stats) = pipeline::reconstruct(&images, &ids, &intr, &cfg)?;
                pipeline::write_sparse(&recon, out)?;
                write_file(&out.join("stats.json"), to_json(&stats)?)?;
                println!(
                    "registered {}/{} images, {} points",
                    stats.reconstructed_images, stats.input_images, stats.points3d
                );
                Ok(())
            })
        }
        Command::Mesh { common, reconstruction } => {
            let cfg = common.load()?;
            let out = required(&cfg.paths.out, "out").map_err(Failure::Config)?;
            stage("mesh", || {
                let recon = pipeline::read_reconstruction(&reconstruction)?;
                let m = pipeline::mesh(&recon, &cfg)?;
                pipeline::write_mesh(&m, out)?;
                println!(
                    "{} vertices, {} triangles",
                    m.mesh.vertices.len(),
                    m.mesh.triangles.len()
                );
                Ok(())
            })
        }
        Command::Texture {
            common,
            reconstruction,
            mesh,
            frames,
        } => {
            let cfg = common.load()?;
            let out = required(&cfg.paths.out, "out").map_err(Failure::Config)?;
            let frames = match &frames {
                Some(f) => f.as_path(),
                None => required(&cfg.paths.input, "input").map_err(Failure::Config)?,
            };
            stage("texture", || {
                let recon = pipeline::read_reconstruction(&reconstruction)?;
                let mesh = pipeline::read_mesh(&mesh)?;
                let tex = pipeline::texture(&mesh, &recon, frames, &cfg)?;
                pipeline::write_textured(&tex, out)?;
                println!(
                    "{} of {} triangles textured, atlas {}×{}",
                    tex.assignments.assigned(),
                    tex.mesh.triangles.len(),
                    tex.atlas.width(),
                    tex.atlas.height()
                );
                Ok(())
            })
        }
        Command::RenderSynthetic {
            scene,
            seed,
            texture,
            frames,
            width,
            height,
            out,
        } => {
            let mut spec = match &scene {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Failure::Config(Error::Config(format!("{}: {e}", path.display()))))?;
                    toml::from_str::<SceneSpec>(&text)
                        .map_err(|e| Failure::Config(Error::Config(format!("{}: {e}", path.display()))))?
                }
                None => SceneSpec::default(),
            };
            spec.seed = seed.unwrap_or(spec.seed);
            spec.texture = texture.unwrap_or(spec.texture);
            spec.num_frames = frames.unwrap_or(spec.num_frames);
            spec.width = width.unwrap_or(spec.width);
            spec.height = height.unwrap_or(spec.height);
            stage("render-synthetic", || {
                let scene = pipeline::render_synthetic(&spec, &out)?;
                println!("rendered {} frames", scene.trajectory.len());
                Ok(())
            })
        }
        Command::Evaluate {
            reconstruction,
            scene,
            mesh,
            out,
        } => stage("evaluate", || {
            let recon = pipeline::read_reconstruction(&reconstruction)?;
            let scene = SyntheticScene::generate(&read_json::<SceneSpec>(&scene)?)?;
            let mesh = mesh.as_deref().map(pipeline::read_mesh).transpose()?;
            let report = evaluate(&recon, mesh.as_ref().map(|m| m.vertices.as_slice()), &scene)?;
            write_file(&out.join("evaluation.json"), to_json(&report)?)?;
            println!(
                "pose rmse {:.5}, rotation rmse {:.3} deg, registered {:.1}%",
                report.pose_rmse, report.rot_rmse, report.registered_pct
            );
            Ok(())
        }),
        Command::ExportViewer {
            reconstruction,
            textured,
            frames,
            out,
        } => stage("export-viewer", || {
            let recon = pipeline::read_reconstruction(&reconstruction)?;
            let tex = pipeline::read_textured(&textured)?;
            let manifest = pipeline::export_viewer_bundle(&recon, &tex, &frames, &out)?;
            println!("exported {} cameras", manifest.cameras.len());
            Ok(())
        }),
        Command::Pipeline { common } => {
            let cfg = common.load()?;
            let (report, timings) = pipeline::run_pipeline(&cfg)?;
            for (name, d) in &timings.0 {
                log::info!("{name}: {:.1} s", d.as_secs_f64());
            }
            println!(
                "registered {}/{} images, {} points, mesh {} triangles",
                report.stats.reconstructed_images,
                report.stats.input_images,
                report.stats.points3d,
                report.mesh.triangles
            );
            Ok(())
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("GASTRO_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("GASTRO_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().map_err(Failure::Config).and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(name, e)) => {
            eprintln!("error: stage {name} failed: {e}");
            ExitCode::from(EXIT_STAGE)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
