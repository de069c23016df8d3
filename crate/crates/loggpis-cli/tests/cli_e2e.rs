//! End-to-end tests driving the compiled binary through full pipelines.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use loggpis::evaluation::MetricsReport;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_loggpis")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("loggpis_e2e_{}_{}", name, std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_2D: &str = "\
dim = 2
method = loggpis
kernel = matern32
lambda = 10
sigma2 = 1
noise_y = 0.05
arena_min = -4 -4
arena_max = 4 4
scene.sphere = 0 0 1.5
seed = 3
scan.angle_min = -1.5
scan.angle_max = 1.5
scan.angle_step = 0.05
scan.range_noise = 0.01
poses.ring.count = 6
poses.ring.radius = 3.0
grid.origin = -2.5 -2.5
grid.cell = 0.25
grid.counts = 21 21
mesh_grid.origin = -2.03 -2.01
mesh_grid.cell = 0.05
mesh_grid.counts = 81 81
map.latent_floor = 1e-300
";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scenario.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_2d_pipeline_produces_consistent_artifacts() {
    let dir = temp_dir("pipeline2d");
    let cfg = write_config(&dir, TINY_2D);
    let cfg = cfg.to_str().unwrap();
    let out = dir.join("out");
    let out_s = out.to_str().unwrap();

    assert_ok(&run(&["--config", cfg, "--out", out_s, "simulate"]), "simulate");
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("loggpis-manifest 1\n"));
    assert_eq!(manifest.matches("\nframe ").count(), 6);
    assert!(out.join("frames/scan_005.csv").exists());

    assert_ok(&run(&["--config", cfg, "--out", out_s, "--threads", "2", "build"]), "build");
    assert!(out.join("map.txt").exists());

    assert_ok(&run(&["--config", cfg, "--out", out_s, "query"]), "query");
    let query = fs::read_to_string(out.join("query.csv")).unwrap();
    let mut lines = query.lines();
    assert_eq!(lines.next(), Some("x,y,distance,gx,gy,variance,sign,clamped,latent_mean"));
    assert_eq!(lines.count(), 21 * 21);

    assert_ok(&run(&["--config", cfg, "--out", out_s, "mesh"]), "mesh");
    let contour = fs::read_to_string(out.join("contour.csv")).unwrap();
    assert!(contour.starts_with("polyline,x,y\n"));
    assert!(contour.lines().count() > 50);

    assert_ok(&run(&["--config", cfg, "--out", out_s, "eval"]), "eval");
    let report: MetricsReport =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(report.rmse.is_finite() && report.rmse < 1.0, "rmse {}", report.rmse);
    assert!(report.evaluated_nodes > 0);
    assert!(out.join("eval_nodes.csv").exists());

    assert_ok(&run(&["--config", cfg, "--out", out_s, "eval", "--baseline"]), "eval --baseline");
    let baseline: MetricsReport =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(baseline.rmse.is_finite());
    assert!(baseline.build_seconds > 0.0, "baseline eval should time its build");

    assert_ok(&run(&["--config", cfg, "--out", out_s, "compare"]), "compare");
    let compare = fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<&str> = compare.lines().skip(1).collect();
    assert_eq!(rows.len(), 16, "2 methods x 2 kernels x 4 lambdas");
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 11);
        let rmse: f64 = fields[3].parse().unwrap();
        assert!(rmse.is_finite());
    }
    assert_eq!(rows.iter().filter(|r| r.starts_with("loggpis,matern32,")).count(), 4);
    assert_eq!(rows.iter().filter(|r| r.starts_with("gpis,whittle,")).count(), 4);
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let dir = temp_dir("determinism");
    let cfg = write_config(&dir, TINY_2D);
    let cfg = cfg.to_str().unwrap();
    let (a, b, c) = (dir.join("a"), dir.join("b"), dir.join("c"));

    assert_ok(&run(&["--config", cfg, "--out", a.to_str().unwrap(), "simulate"]), "run a");
    assert_ok(&run(&["--config", cfg, "--out", b.to_str().unwrap(), "simulate"]), "run b");
    assert_ok(
        &run(&["--config", cfg, "--out", c.to_str().unwrap(), "--seed", "99", "simulate"]),
        "run c",
    );

    for name in ["manifest.txt", "poses.csv", "frames/scan_000.csv", "frames/scan_005.csv"] {
        let left = fs::read(a.join(name)).unwrap();
        let right = fs::read(b.join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between identical runs");
    }
    assert_ne!(
        fs::read(a.join("frames/scan_000.csv")).unwrap(),
        fs::read(c.join("frames/scan_000.csv")).unwrap(),
        "a different seed must change the ranges"
    );

    assert_ok(&run(&["--config", cfg, "--out", a.to_str().unwrap(), "build"]), "build a");
    assert_ok(&run(&["--config", cfg, "--out", b.to_str().unwrap(), "build"]), "build b");
    assert_eq!(
        fs::read(a.join("map.txt")).unwrap(),
        fs::read(b.join("map.txt")).unwrap(),
        "maps differ between identical runs"
    );
}

#[test]
fn build_reports_corrupt_frames_and_continues() {
    let dir = temp_dir("corrupt");
    let cfg = write_config(&dir, TINY_2D);
    let cfg = cfg.to_str().unwrap();
    let out = dir.join("out");
    let out_s = out.to_str().unwrap();

    assert_ok(&run(&["--config", cfg, "--out", out_s, "simulate"]), "simulate");
    fs::write(out.join("frames/scan_002.csv"), "not,a,scan\n").unwrap();

    let build = run(&["--config", cfg, "--out", out_s, "build"]);
    assert_ok(&build, "build with one corrupt frame");
    let stderr = String::from_utf8_lossy(&build.stderr);
    assert!(stderr.contains("scan_002.csv"), "stderr should name the bad frame: {stderr}");
    assert!(out.join("map.txt").exists());

    assert_ok(&run(&["--config", cfg, "--out", out_s, "query"]), "query after skip");
}

#[test]
fn query_reads_a_points_file_and_tolerates_empty_input() {
    let dir = temp_dir("points");
    let cfg = write_config(&dir, TINY_2D);
    let cfg = cfg.to_str().unwrap();
    let out = dir.join("out");
    let out_s = out.to_str().unwrap();

    assert_ok(&run(&["--config", cfg, "--out", out_s, "simulate"]), "simulate");
    assert_ok(&run(&["--config", cfg, "--out", out_s, "build"]), "build");

    let pts = dir.join("pts.csv");
    fs::write(&pts, "0 0\n2.5,0\n# just a comment\n").unwrap();
    assert_ok(
        &run(&["--config", cfg, "--out", out_s, "query", "--points", pts.to_str().unwrap()]),
        "query --points",
    );
    let rows: Vec<String> =
        fs::read_to_string(out.join("query.csv")).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 3, "header plus two points");
    assert_eq!(rows[1].split(',').count(), 9);

    let empty = dir.join("empty.csv");
    fs::write(&empty, "# nothing here\n").unwrap();
    assert_ok(
        &run(&["--config", cfg, "--out", out_s, "query", "--points", empty.to_str().unwrap()]),
        "query on empty input",
    );
    let rows = fs::read_to_string(out.join("query.csv")).unwrap();
    assert_eq!(rows.trim_end(), "x,y,distance,gx,gy,variance,sign,clamped,latent_mean");
}

#[test]
fn full_3d_pipeline_meshes_a_box() {
    let dir = temp_dir("pipeline3d");
    let cfg = write_config(
        &dir,
        "\
dim = 3
lambda = 10
noise_y = 0.05
arena_min = -2 -2 -1
arena_max = 2 2 2
scene.box = 0 0 0.15 0.15 0.1 0.15
seed = 5
depth.fx = 40
depth.fy = 40
depth.cx = 23.5
depth.cy = 17.5
depth.width = 48
depth.height = 36
depth.depth_noise = 0.005
depth.stride = 2
poses.orbit.count = 6
poses.orbit.radius = 1.2
poses.orbit.height = 0.5
poses.orbit.center = 0 0 0.15
grid.origin = -0.8 -0.8 0.15
grid.cell = 0.05
grid.counts = 33 33 1
mesh_grid.origin = -0.43 -0.41 -0.12
mesh_grid.cell = 0.03
mesh_grid.counts = 29 28 21
map.latent_floor = 1e-300
",
    );
    let cfg = cfg.to_str().unwrap();
    let out = dir.join("out");
    let out_s = out.to_str().unwrap();

    assert_ok(&run(&["--config", cfg, "--out", out_s, "simulate"]), "simulate 3d");
    assert!(out.join("frames/depth_005.csv").exists());
    assert_ok(&run(&["--config", cfg, "--out", out_s, "build"]), "build 3d");
    assert_ok(&run(&["--config", cfg, "--out", out_s, "mesh"]), "mesh 3d");

    let ply = fs::read(out.join("mesh.ply")).unwrap();
    let header = String::from_utf8_lossy(&ply[..ply.len().min(400)]).to_string();
    assert!(header.starts_with("ply\nformat binary_little_endian 1.0\n"), "{header}");
    assert!(header.contains("element face"), "{header}");

    assert_ok(&run(&["--config", cfg, "--out", out_s, "eval"]), "eval 3d");
    let report: MetricsReport =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(report.rmse.is_finite() && report.evaluated_nodes > 0);
}

#[test]
fn missing_config_and_bad_values_exit_nonzero() {
    let out = run(&["simulate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--config"), "{stderr}");

    let dir = temp_dir("badcfg");
    let cfg = write_config(&dir, "dim = 2\narena_min = -1 -1\narena_max = 1 1\nlambda = -3\n");
    let out = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lambda"), "{stderr}");

    // A scenario without scene primitives cannot simulate.
    let cfg2 = dir.join("noscene.cfg");
    fs::write(
        &cfg2,
        "dim = 2\narena_min = -1 -1\narena_max = 1 1\n\
         scan.angle_min = -1\nscan.angle_max = 1\nscan.angle_step = 0.5\n\
         poses.ring.count = 2\nposes.ring.radius = 0.5\n",
    )
    .unwrap();
    let out = run(&["--config", cfg2.to_str().unwrap(), "simulate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("scene"), "{stderr}");
}
