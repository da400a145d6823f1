use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use gastro_core::io::{read_json, read_obj, read_ply, CamerasManifest};
use gastro_core::pipeline::{RunReport, REPORT_FILE};
use gastro_core::sfm::registered_percent;

fn gastro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gastro"))
        .args(args)
        .output()
        .expect("run gastro")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic sequence shared by every test of this binary.
fn synthetic() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = gastro(&[
            "render-synthetic",
            "--frames",
            "24",
            "--width",
            "320",
            "--height",
            "240",
            "--out",
            path(dir.path()),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
    .path()
}

/// Output directory of one full pipeline run on [`synthetic`].
fn pipeline_run() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let input = synthetic();
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("demo.toml");
        std::fs::write(
            &config,
            format!(
                "ransac_seed = 11\n\n[paths]\ninput = {:?}\nintrinsics = {:?}\n",
                path(input),
                path(&input.join("intrinsics.json"))
            ),
        )
        .unwrap();
        let out = dir.path().join("run");
        let result = gastro(&["pipeline", "--config", path(&config), "--out", path(&out)]);
        assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
        dir
    })
    .path()
}

#[test]
fn pipeline_writes_every_artifact() {
    let run = pipeline_run().join("run");
    for file in [
        "sparse/cloud.ply",
        "sparse/cameras.json",
        "sparse/reconstruction.json",
        "mesh/mesh.ply",
        "mesh/mesh.obj",
        "texture/atlas.png",
        "texture/textured.obj",
        "viewer/mesh.obj",
        "viewer/mesh.mtl",
        "viewer/atlas.png",
        "viewer/cameras.json",
        REPORT_FILE,
        "timings.tsv",
    ] {
        assert!(run.join(file).is_file(), "missing {file}");
    }
    let timings = std::fs::read_to_string(run.join("timings.tsv")).unwrap();
    for stage in ["preprocess", "reconstruct", "mesh", "texture", "export-viewer"] {
        assert!(timings.contains(stage), "{timings}");
    }
}

#[test]
fn report_agrees_with_the_camera_manifest() {
    let run = pipeline_run().join("run");
    let report: RunReport = read_json(&run.join(REPORT_FILE)).unwrap();
    let cams: CamerasManifest = read_json(&run.join("sparse/cameras.json")).unwrap();
    let input = report.preprocess.kept.len();
    assert_eq!(report.stats.input_images, input);
    assert_eq!(
        report.stats.reconstructed_pct,
        registered_percent(cams.cameras.len(), input)
    );
    assert!(report.stats.reconstructed_pct >= 95.0, "{:?}", report.stats);
    assert_eq!(report.seed, 11);
    assert_eq!(report.input, synthetic());
    assert!(report.config.paths.out.is_none());
    assert!(report.evaluation.is_some());
}

#[test]
fn exported_files_reparse() {
    let run = pipeline_run().join("run");
    let report: RunReport = read_json(&run.join(REPORT_FILE)).unwrap();
    let cloud = read_ply(&std::fs::read(run.join("sparse/cloud.ply")).unwrap()).unwrap();
    assert_eq!(cloud.vertices.len(), report.stats.points3d);
    let mesh = read_ply(&std::fs::read(run.join("mesh/mesh.ply")).unwrap()).unwrap();
    assert_eq!(mesh.faces.len(), report.mesh.triangles);
    let obj = read_obj(&std::fs::read_to_string(run.join("mesh/mesh.obj")).unwrap()).unwrap();
    assert_eq!(obj.positions, mesh.vertices);
    let viewer: CamerasManifest = read_json(&run.join("viewer/cameras.json")).unwrap();
    viewer.validate().unwrap();
    assert_eq!(viewer.cameras.len(), report.stats.reconstructed_images);
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn stage_subcommands_chain_and_reconstruct_deterministically() {
    let input = synthetic();
    let intr = input.join("intrinsics.json");
    let tmp = tempfile::tempdir().unwrap();
    let pre = tmp.path().join("pre");
    let out = gastro(&[
        "preprocess",
        "--input",
        path(input),
        "--out",
        path(&pre),
        "--channel",
        "red",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut plys = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let args = [
            "reconstruct",
            "--frames",
            path(&pre),
            "--intrinsics",
            path(&intr),
            "--seed",
            "5",
            "--out",
            path(&dir),
        ];
        let out = gastro(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        plys.push(std::fs::read(dir.join("cloud.ply")).unwrap());
    }
    assert_eq!(plys[0], plys[1]);

    let recon = tmp.path().join("a/reconstruction.json");
    let mesh_dir = tmp.path().join("mesh");
    let out = gastro(&["mesh", "--reconstruction", path(&recon), "--out", path(&mesh_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tex_dir = tmp.path().join("tex");
    let out = gastro(&[
        "texture",
        "--reconstruction",
        path(&recon),
        "--mesh",
        path(&mesh_dir.join("mesh.ply")),
        "--frames",
        path(input),
        "--out",
        path(&tex_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let viewer = tmp.path().join("viewer");
    let out = gastro(&[
        "export-viewer",
        "--reconstruction",
        path(&recon),
        "--textured",
        path(&tex_dir),
        "--frames",
        path(input),
        "--out",
        path(&viewer),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = tmp.path().join("eval");
    let out = gastro(&[
        "evaluate",
        "--reconstruction",
        path(&recon),
        "--scene",
        path(&input.join("scene.json")),
        "--mesh",
        path(&mesh_dir.join("mesh.obj")),
        "--out",
        path(&eval),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = read_json(&eval.join("evaluation.json")).unwrap();
    assert!(report["pose_rmse"].as_f64().unwrap() < 0.016);
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let first = pipeline_run().join("run");
    let input = synthetic();
    let tmp = tempfile::tempdir().unwrap();
    let out = gastro(&[
        "pipeline",
        "--input",
        path(input),
        "--intrinsics",
        path(&input.join("intrinsics.json")),
        "--seed",
        "11",
        "--out",
        path(tmp.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        v.into_iter().filter(|(p, _)| p != Path::new("timings.tsv")).collect()
    };
    let a = strip(files(&first));
    let b = strip(files(tmp.path()));
    assert_eq!(a.len(), b.len());
    for ((pa, da), (pb, db)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(da == db, "{} differs", pa.display());
    }
}

#[test]
fn bad_config_exits_2_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "channel = \"red\"\n[filter]\nn = 100\nbogus = 1\n").unwrap();
    let out = gastro(&["pipeline", "--config", path(&config)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml:4:"), "{err}");

    std::fs::write(&config, "max_reproj = -1.0\n").unwrap();
    let out = gastro(&["pipeline", "--config", path(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml:1:"));

    let out = gastro(&["pipeline", "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.input"));
}

#[test]
fn stage_failure_exits_3_with_stage_name() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = gastro(&[
        "pipeline",
        "--input",
        path(&empty),
        "--intrinsics",
        path(&synthetic().join("intrinsics.json")),
        "--out",
        path(&tmp.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage preprocess failed"));

    let out = gastro(&[
        "pipeline",
        "--input",
        path(synthetic()),
        "--intrinsics",
        path(&tmp.path().join("missing.json")),
        "--out",
        path(&tmp.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage reconstruct failed"));
}

#[test]
fn thread_variable_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_gastro"))
        .args(["pipeline"])
        .env("GASTRO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("GASTRO_THREADS"));
}
