//! Command implementations behind the CLI verbs.
//!
//! Every verb reads the same scenario file, so a full experiment is
//! `simulate` (render frames), `build` (ingest them into a map), then any of
//! `query`, `mesh`, `eval` or `compare` against that map. All outputs land in
//! one directory and are deterministic for a fixed seed; the only fields that
//! vary between runs are the wall-clock timings inside metrics reports.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::SVector;

use loggpis::evaluation::{evaluate_slice, standard_gpis_baseline, MetricsReport, Truth};
use loggpis::ingestion::{
    depth_to_points, load_depth_csv, load_poses_2d, load_poses_3d, load_scan_csv, save_depth_csv,
    save_poses_2d, save_poses_3d, save_scan_csv, scan_to_points, simulate_depth, simulate_scan,
    AnalyticScene, Pose, Primitive,
};
use loggpis::surface::{
    extract_iso_2d, extract_iso_3d, save_contour_csv, save_mesh_ply, GridSpec, Mesh,
};
use loggpis::{ClusterMap, KernelFamily, KernelParams, MapConfig, Method, SurfacePoint};

use crate::scenario::{orbit_poses_3d, ring_poses_2d, GridSpecConfig, ScenarioConfig};

/// First line of a frame manifest; bump the number on format changes.
const MANIFEST_MAGIC: &str = "loggpis-manifest 1";

fn svec<const D: usize>(v: &[f64]) -> SVector<f64, D> {
    SVector::from_fn(|i, _| v[i])
}

/// List of rendered frames plus the trajectory they were taken from,
/// written by `simulate` and consumed by `build` and `eval --baseline`.
/// Paths are stored relative to the manifest file.
pub struct Manifest {
    pub dim: usize,
    pub seed: u64,
    pub poses: PathBuf,
    pub frames: Vec<PathBuf>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "{MANIFEST_MAGIC}");
        let _ = writeln!(text, "dim {}", self.dim);
        let _ = writeln!(text, "seed {}", self.seed);
        let _ = writeln!(text, "poses {}", self.poses.display());
        for frame in &self.frames {
            let _ = writeln!(text, "frame {}", frame.display());
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Reads a manifest; relative paths stay relative, [`Manifest::resolve`]
    /// joins them onto the manifest's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim() == MANIFEST_MAGIC => {}
            _ => bail!("{}:1: not a frame manifest", path.display()),
        }
        let mut dim = None;
        let mut seed = 0;
        let mut poses = None;
        let mut frames = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| anyhow!("{}:{lineno}: expected `key value`", path.display()))?;
            match key {
                "dim" => dim = Some(value.trim().parse::<usize>()?),
                "seed" => seed = value.trim().parse::<u64>()?,
                "poses" => poses = Some(PathBuf::from(value.trim())),
                "frame" => frames.push(PathBuf::from(value.trim())),
                other => bail!("{}:{lineno}: unknown manifest key {other:?}", path.display()),
            }
        }
        Ok(Manifest {
            dim: dim.ok_or_else(|| anyhow!("{}: manifest has no dim line", path.display()))?,
            seed,
            poses: poses
                .ok_or_else(|| anyhow!("{}: manifest has no poses line", path.display()))?,
            frames,
        })
    }

    fn resolve(&self, manifest_path: &Path, relative: &Path) -> PathBuf {
        manifest_path.parent().unwrap_or(Path::new(".")).join(relative)
    }
}

/// Builds the analytic scene the simulator and the evaluation oracle share.
fn scene_of<const D: usize>(cfg: &ScenarioConfig) -> Result<AnalyticScene<D>> {
    let mut primitives = Vec::new();
    for s in &cfg.spheres {
        primitives.push(Primitive::Sphere { center: svec(&s.center), radius: s.radius });
    }
    for b in &cfg.boxes {
        primitives.push(Primitive::Cuboid {
            center: svec(&b.center),
            half_extents: svec(&b.half_extents),
        });
    }
    if primitives.is_empty() {
        bail!("the scenario defines no scene primitives (scene.sphere / scene.box)");
    }
    Ok(AnalyticScene::new(primitives)?)
}

fn poses_2d(cfg: &ScenarioConfig) -> Result<Vec<Pose<2>>> {
    if let Some(path) = &cfg.poses_file {
        return Ok(load_poses_2d(path)?);
    }
    if let Some(ring) = &cfg.ring {
        return Ok(ring_poses_2d(ring));
    }
    bail!("a 2D scenario needs poses_file or poses.ring.*");
}

fn poses_3d(cfg: &ScenarioConfig) -> Result<Vec<Pose<3>>> {
    if let Some(path) = &cfg.poses_file {
        return Ok(load_poses_3d(path)?);
    }
    if let Some(orbit) = &cfg.orbit {
        return orbit_poses_3d(orbit);
    }
    bail!("a 3D scenario needs poses_file or poses.orbit.*");
}

/// Sensor positions along the trajectory, used for sign recovery. Commands
/// that can run without poses fall back to an empty track, which leaves
/// signs unknown.
fn track_2d(cfg: &ScenarioConfig) -> Vec<SVector<f64, 2>> {
    poses_2d(cfg).map(|ps| ps.iter().map(|p| p.translation).collect()).unwrap_or_default()
}

fn track_3d(cfg: &ScenarioConfig) -> Vec<SVector<f64, 3>> {
    poses_3d(cfg).map(|ps| ps.iter().map(|p| p.translation).collect()).unwrap_or_default()
}

fn grid_of<const D: usize>(g: &GridSpecConfig) -> Result<GridSpec<D>> {
    let counts: [usize; D] = g
        .counts
        .clone()
        .try_into()
        .map_err(|_| anyhow!("grid counts must have {D} entries"))?;
    Ok(GridSpec::new(svec(&g.origin), g.cell, counts)?)
}

fn eval_grid<const D: usize>(cfg: &ScenarioConfig) -> Result<GridSpec<D>> {
    let g = cfg.grid.as_ref().ok_or_else(|| anyhow!("the scenario defines no grid.*"))?;
    grid_of(g)
}

/// Meshing prefers the finer `mesh_grid.*` block and falls back to `grid.*`.
fn mesh_grid<const D: usize>(cfg: &ScenarioConfig) -> Result<GridSpec<D>> {
    match (&cfg.mesh_grid, &cfg.grid) {
        (Some(g), _) | (None, Some(g)) => grid_of(g),
        (None, None) => bail!("the scenario defines neither mesh_grid.* nor grid.*"),
    }
}

/// Map construction settings: library defaults for the scenario's method,
/// then the scenario's explicit overrides on top.
fn map_config<const D: usize>(cfg: &ScenarioConfig) -> Result<MapConfig<D>> {
    let mut mc = MapConfig::new(
        svec(&cfg.arena_min),
        svec(&cfg.arena_max),
        cfg.params.clone(),
        cfg.method,
    )?;
    if let Some(v) = cfg.map.leaf_capacity {
        mc.leaf_capacity = v;
    }
    if let Some(v) = cfg.map.support_margin {
        mc.support_margin = v;
    }
    if let Some(v) = cfg.map.fuse_radius {
        mc.fuse_radius = v;
    }
    if let Some(v) = cfg.map.latent_floor {
        mc.latent_floor = v;
    }
    if let Some(v) = cfg.map.max_depth {
        mc.max_depth = v;
    }
    if let Some(v) = cfg.map.gradient_observations {
        mc.gradient_observations = v;
    }
    mc.validate()?;
    Ok(mc)
}

fn nearest_sensor<'a, const D: usize>(
    track: &'a [SVector<f64, D>],
    q: &SVector<f64, D>,
) -> Option<&'a SVector<f64, D>> {
    track.iter().min_by(|a, b| {
        (*a - q).norm_squared().total_cmp(&(*b - q).norm_squared())
    })
}

// ---------------------------------------------------------------------------
// simulate

/// Renders one range frame per pose into `out/frames/` and writes the pose
/// file and the manifest next to them. Frame `i` uses seed `base + i`, so a
/// rerun with the same scenario and seed reproduces every file byte for byte.
pub fn cmd_simulate(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir)
        .with_context(|| format!("creating {}", frames_dir.display()))?;
    let count = match cfg.dim {
        2 => simulate_2d(cfg, out)?,
        _ => simulate_3d(cfg, out)?,
    };
    println!(
        "simulated {count} frames into {} (manifest {})",
        frames_dir.display(),
        out.join("manifest.txt").display()
    );
    Ok(())
}

fn simulate_2d(cfg: &ScenarioConfig, out: &Path) -> Result<usize> {
    let scene = scene_of::<2>(cfg)?;
    let poses = poses_2d(cfg)?;
    let template = cfg
        .scan
        .clone()
        .ok_or_else(|| anyhow!("a 2D scenario needs scan.* settings to simulate"))?;
    save_poses_2d(&out.join("poses.csv"), &poses)?;
    let mut frames = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let scan = simulate_scan(&scene, pose, &template, cfg.seed.wrapping_add(i as u64))?;
        let rel = PathBuf::from(format!("frames/scan_{i:03}.csv"));
        save_scan_csv(&out.join(&rel), &scan)?;
        frames.push(rel);
    }
    let manifest =
        Manifest { dim: 2, seed: cfg.seed, poses: PathBuf::from("poses.csv"), frames };
    manifest.save(&out.join("manifest.txt"))?;
    Ok(manifest.frames.len())
}

fn simulate_3d(cfg: &ScenarioConfig, out: &Path) -> Result<usize> {
    let scene = scene_of::<3>(cfg)?;
    let poses = poses_3d(cfg)?;
    let template = cfg
        .depth
        .clone()
        .ok_or_else(|| anyhow!("a 3D scenario needs depth.* settings to simulate"))?;
    save_poses_3d(&out.join("poses.csv"), &poses)?;
    let mut frames = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let frame = simulate_depth(&scene, pose, &template, cfg.seed.wrapping_add(i as u64))?;
        let rel = PathBuf::from(format!("frames/depth_{i:03}.csv"));
        save_depth_csv(&out.join(&rel), &frame)?;
        frames.push(rel);
    }
    let manifest =
        Manifest { dim: 3, seed: cfg.seed, poses: PathBuf::from("poses.csv"), frames };
    manifest.save(&out.join("manifest.txt"))?;
    Ok(manifest.frames.len())
}

// ---------------------------------------------------------------------------
// build

/// Loads every frame listed in the manifest and feeds it to the map in
/// order, refitting after each frame the way a live sensor stream would.
/// Frames that fail to parse are reported and skipped; the build continues.
pub fn cmd_build(
    cfg: &ScenarioConfig,
    out: &Path,
    frames: Option<&Path>,
    map_out: Option<&Path>,
) -> Result<()> {
    let manifest_path = frames.map(Path::to_path_buf).unwrap_or_else(|| out.join("manifest.txt"));
    let manifest = Manifest::load(&manifest_path)?;
    if manifest.dim != cfg.dim {
        bail!("manifest is {}-dimensional but the scenario says dim = {}", manifest.dim, cfg.dim);
    }
    let map_path = map_out.map(Path::to_path_buf).unwrap_or_else(|| out.join("map.txt"));
    match cfg.dim {
        2 => build_dim::<2>(cfg, &manifest, &manifest_path, &map_path, frame_points_2d),
        _ => build_dim::<3>(cfg, &manifest, &manifest_path, &map_path, |cfg, path| {
            frame_points_3d(cfg, path)
        }),
    }
}

fn frame_points_2d(_cfg: &ScenarioConfig, path: &Path) -> Result<Vec<SurfacePoint<2>>> {
    Ok(scan_to_points(&load_scan_csv(path)?)?)
}

fn frame_points_3d(cfg: &ScenarioConfig, path: &Path) -> Result<Vec<SurfacePoint<3>>> {
    Ok(depth_to_points(&load_depth_csv(path)?, cfg.depth_stride)?)
}

fn build_dim<const D: usize>(
    cfg: &ScenarioConfig,
    manifest: &Manifest,
    manifest_path: &Path,
    map_path: &Path,
    frame_points: impl Fn(&ScenarioConfig, &Path) -> Result<Vec<SurfacePoint<D>>>,
) -> Result<()> {
    let mut map = ClusterMap::new(map_config::<D>(cfg)?)?;
    if manifest.frames.is_empty() {
        log::warn!("manifest lists no frames; writing an empty map");
    }
    let mut failed = 0usize;
    for (i, rel) in manifest.frames.iter().enumerate() {
        let path = manifest.resolve(manifest_path, rel);
        let points = match frame_points(cfg, &path) {
            Ok(points) => points,
            Err(e) => {
                log::error!("frame {i} ({}): {e}", path.display());
                failed += 1;
                continue;
            }
        };
        let ins = map.insert_points(&points);
        let refit = map.refit_dirty();
        log::info!(
            "frame {i}: {} points in, {} fused, {} rejected, {} leaves refit",
            points.len(),
            ins.fused,
            ins.rejected,
            refit.refit
        );
    }
    if failed > 0 {
        log::warn!("{failed} of {} frames failed to parse", manifest.frames.len());
    }
    map.save_to_path(map_path)?;
    let health = map.health();
    println!(
        "built map: {} points in {} leaves ({} models) -> {}",
        health.points,
        health.leaves,
        health.fitted_models,
        map_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// query

/// Evaluates the field at explicit points (one row per line of `--points`)
/// or at every node of the scenario grid, and writes one CSV row per query.
pub fn cmd_query(
    cfg: &ScenarioConfig,
    out: &Path,
    map: Option<&Path>,
    points: Option<&Path>,
    csv_out: Option<&Path>,
) -> Result<()> {
    let map_path = map.map(Path::to_path_buf).unwrap_or_else(|| out.join("map.txt"));
    let csv_path = csv_out.map(Path::to_path_buf).unwrap_or_else(|| out.join("query.csv"));
    let rows = match cfg.dim {
        2 => query_dim::<2>(cfg, &map_path, points, &csv_path, &track_2d(cfg))?,
        _ => query_dim::<3>(cfg, &map_path, points, &csv_path, &track_3d(cfg))?,
    };
    println!("wrote {rows} query rows -> {}", csv_path.display());
    Ok(())
}

fn query_dim<const D: usize>(
    cfg: &ScenarioConfig,
    map_path: &Path,
    points: Option<&Path>,
    csv_path: &Path,
    track: &[SVector<f64, D>],
) -> Result<usize> {
    let map = ClusterMap::<D>::load_from_path(map_path)?;
    let queries: Vec<SVector<f64, D>> = match points {
        Some(path) => load_points_csv(path)?,
        None => {
            let grid = eval_grid::<D>(cfg)?;
            (0..grid.node_count()).map(|l| grid.position(grid.node(l))).collect()
        }
    };
    let mut w = BufWriter::new(
        fs::File::create(csv_path).with_context(|| format!("creating {}", csv_path.display()))?,
    );
    writeln!(w, "{}", query_header::<D>())?;
    for q in &queries {
        let est = map.query(q, nearest_sensor(track, q))?;
        let mut row = String::new();
        for a in 0..D {
            let _ = write!(row, "{},", q[a]);
        }
        let _ = write!(row, "{},", est.distance);
        match est.gradient {
            Some(g) => {
                for a in 0..D {
                    let _ = write!(row, "{},", g[a]);
                }
            }
            None => {
                for _ in 0..D {
                    let _ = write!(row, "NaN,");
                }
            }
        }
        let _ = write!(
            row,
            "{},{},{},{}",
            est.variance,
            est.sign.to_f64(),
            u8::from(est.clamped),
            est.latent_mean
        );
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(queries.len())
}

fn query_header<const D: usize>() -> String {
    let mut h = String::new();
    for a in 0..D {
        let _ = write!(h, "{},", ["x", "y", "z"][a]);
    }
    h.push_str("distance,");
    for a in 0..D {
        let _ = write!(h, "g{},", ["x", "y", "z"][a]);
    }
    h.push_str("variance,sign,clamped,latent_mean");
    h
}

/// Query coordinates, one point per row, comma or whitespace separated,
/// `#` comments allowed.
fn load_points_csv<const D: usize>(path: &Path) -> Result<Vec<SVector<f64, D>>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> =
            line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        if fields.len() != D {
            bail!("{}:{}: expected {D} coordinates, got {}", path.display(), idx + 1, fields.len());
        }
        let mut p = SVector::<f64, D>::zeros();
        for (a, field) in fields.iter().enumerate() {
            p[a] = field
                .parse::<f64>()
                .map_err(|e| anyhow!("{}:{}: bad number {field:?}: {e}", path.display(), idx + 1))?;
        }
        points.push(p);
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// mesh

/// Extracts the zero isosurface of the mapped field: a contour CSV in 2D, a
/// PLY triangle mesh with per-vertex variance in 3D.
pub fn cmd_mesh(
    cfg: &ScenarioConfig,
    out: &Path,
    map: Option<&Path>,
    mesh_out: Option<&Path>,
    ascii: bool,
) -> Result<()> {
    let map_path = map.map(Path::to_path_buf).unwrap_or_else(|| out.join("map.txt"));
    match cfg.dim {
        2 => {
            let map = ClusterMap::<2>::load_from_path(&map_path)?;
            let grid = mesh_grid::<2>(cfg)?;
            let contour: Mesh<2> = extract_iso_2d(&map, &grid, &track_2d(cfg))?;
            let path =
                mesh_out.map(Path::to_path_buf).unwrap_or_else(|| out.join("contour.csv"));
            save_contour_csv(&path, &contour)?;
            println!(
                "contour: {} vertices, {} segments -> {}",
                contour.vertices.len(),
                contour.faces.len(),
                path.display()
            );
        }
        _ => {
            let map = ClusterMap::<3>::load_from_path(&map_path)?;
            let grid = mesh_grid::<3>(cfg)?;
            let mesh: Mesh<3> = extract_iso_3d(&map, &grid, &track_3d(cfg))?;
            let path = mesh_out.map(Path::to_path_buf).unwrap_or_else(|| out.join("mesh.ply"));
            save_mesh_ply(&path, &mesh, !ascii)?;
            println!(
                "mesh: {} vertices, {} triangles -> {}",
                mesh.vertices.len(),
                mesh.faces.len(),
                path.display()
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

/// Scores a map (or the plain GPIS baseline rebuilt from the frames) against
/// the scenario's analytic scene on the evaluation grid. Writes the metrics
/// as JSON plus one CSV row per grid node.
pub fn cmd_eval(cfg: &ScenarioConfig, out: &Path, map: Option<&Path>, baseline: bool) -> Result<()> {
    let report = match cfg.dim {
        2 => eval_dim::<2>(cfg, out, map, baseline, &track_2d(cfg), frame_points_2d)?,
        _ => eval_dim::<3>(cfg, out, map, baseline, &track_3d(cfg), |cfg, path| {
            frame_points_3d(cfg, path)
        })?,
    };
    let json_path = out.join("metrics.json");
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&json_path, json).with_context(|| format!("writing {}", json_path.display()))?;
    println!(
        "rmse {:.4} m over {} nodes ({:.1}% clamped), eikonal p95 {:.3} -> {}",
        report.rmse,
        report.evaluated_nodes,
        100.0 * report.clamp_fraction,
        report.eikonal_p95,
        json_path.display()
    );
    Ok(())
}

fn eval_dim<const D: usize>(
    cfg: &ScenarioConfig,
    out: &Path,
    map: Option<&Path>,
    baseline: bool,
    track: &[SVector<f64, D>],
    frame_points: impl Fn(&ScenarioConfig, &Path) -> Result<Vec<SurfacePoint<D>>>,
) -> Result<MetricsReport> {
    let truth = Truth::Scene(scene_of::<D>(cfg)?);
    let grid = eval_grid::<D>(cfg)?;
    let csv_path = out.join("eval_nodes.csv");

    let (map, build_seconds) = if baseline {
        let manifest_path = out.join("manifest.txt");
        let manifest = Manifest::load(&manifest_path)?;
        let started = Instant::now();
        let mut points = Vec::new();
        for rel in &manifest.frames {
            points.extend(frame_points(cfg, &manifest.resolve(&manifest_path, rel))?);
        }
        let map = standard_gpis_baseline(
            &points,
            &cfg.params,
            svec(&cfg.arena_min),
            svec(&cfg.arena_max),
        )?;
        (map, started.elapsed().as_secs_f64())
    } else {
        let map_path = map.map(Path::to_path_buf).unwrap_or_else(|| out.join("map.txt"));
        (ClusterMap::<D>::load_from_path(&map_path)?, 0.0)
    };

    let mut report = evaluate_slice(&map, &truth, &grid, track, Some(&csv_path))?;
    report.build_seconds = build_seconds;
    Ok(report)
}

// ---------------------------------------------------------------------------
// compare

/// One metrics row per (method, kernel, length-scale) combination, all built
/// from the same simulated frames and scored on the same grid. The ν = 1
/// kernel has no usable derivative rows, so its builds always use value-only
/// observations; with the signed-distance baseline that leaves the all-zero
/// targets and the row is a reference point, not a contender.
pub fn cmd_compare(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let csv_path = out.join("compare.csv");
    let rows = match cfg.dim {
        2 => {
            let scene = scene_of::<2>(cfg)?;
            let poses = poses_2d(cfg)?;
            let template = cfg
                .scan
                .clone()
                .ok_or_else(|| anyhow!("compare needs scan.* settings in 2D"))?;
            let frames: Vec<Vec<SurfacePoint<2>>> = poses
                .iter()
                .enumerate()
                .map(|(i, pose)| {
                    let scan =
                        simulate_scan(&scene, pose, &template, cfg.seed.wrapping_add(i as u64))?;
                    Ok(scan_to_points(&scan)?)
                })
                .collect::<Result<_>>()?;
            let track: Vec<_> = poses.iter().map(|p| p.translation).collect();
            compare_rows(cfg, &Truth::Scene(scene), &frames, &track)?
        }
        _ => {
            let scene = scene_of::<3>(cfg)?;
            let poses = poses_3d(cfg)?;
            let template = cfg
                .depth
                .clone()
                .ok_or_else(|| anyhow!("compare needs depth.* settings in 3D"))?;
            let frames: Vec<Vec<SurfacePoint<3>>> = poses
                .iter()
                .enumerate()
                .map(|(i, pose)| {
                    let frame =
                        simulate_depth(&scene, pose, &template, cfg.seed.wrapping_add(i as u64))?;
                    Ok(depth_to_points(&frame, cfg.depth_stride)?)
                })
                .collect::<Result<_>>()?;
            let track: Vec<_> = poses.iter().map(|p| p.translation).collect();
            compare_rows(cfg, &Truth::Scene(scene), &frames, &track)?
        }
    };

    let mut w = BufWriter::new(
        fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?,
    );
    writeln!(
        w,
        "method,kernel,lambda,rmse,mean_abs_err,eikonal_p95,clamp_fraction,\
         evaluated_nodes,clamped_nodes,build_seconds,query_micros_per_point"
    )?;
    println!("{:<8} {:<9} {:>7} {:>10} {:>10}", "method", "kernel", "lambda", "rmse", "clamped");
    for (method, family, lambda, report) in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            method,
            family,
            lambda,
            report.rmse,
            report.mean_abs_err,
            report.eikonal_p95,
            report.clamp_fraction,
            report.evaluated_nodes,
            report.clamped_nodes,
            report.build_seconds,
            report.query_micros_per_point
        )?;
        println!(
            "{:<8} {:<9} {:>7} {:>10.4} {:>9.1}%",
            method,
            family,
            lambda,
            report.rmse,
            100.0 * report.clamp_fraction
        );
    }
    w.flush()?;
    println!("wrote {} rows -> {}", rows.len(), csv_path.display());
    Ok(())
}

fn compare_rows<const D: usize>(
    cfg: &ScenarioConfig,
    truth: &Truth<D>,
    frames: &[Vec<SurfacePoint<D>>],
    track: &[SVector<f64, D>],
) -> Result<Vec<(&'static str, KernelFamily, f64, MetricsReport)>> {
    let grid = eval_grid::<D>(cfg)?;
    let mut rows = Vec::new();
    for method in [Method::LogGpis, Method::Gpis] {
        for family in [KernelFamily::Matern32, KernelFamily::Whittle] {
            for &lambda in &cfg.lambda_sweep {
                let mut params: KernelParams = cfg.params.clone();
                params.family = family;
                params.lambda = lambda;
                let mut mc = MapConfig::new(
                    svec(&cfg.arena_min),
                    svec(&cfg.arena_max),
                    params,
                    method,
                )?;
                if let Some(v) = cfg.map.leaf_capacity {
                    mc.leaf_capacity = v;
                }
                if let Some(v) = cfg.map.fuse_radius {
                    mc.fuse_radius = v;
                }
                if let Some(v) = cfg.map.latent_floor {
                    mc.latent_floor = v;
                }
                if family == KernelFamily::Whittle {
                    mc.gradient_observations = false;
                }
                let started = Instant::now();
                let mut map = ClusterMap::new(mc)?;
                for points in frames {
                    map.insert_points(points);
                    map.refit_dirty();
                }
                let build_seconds = started.elapsed().as_secs_f64();
                let mut report = evaluate_slice(&map, truth, &grid, track, None)?;
                report.build_seconds = build_seconds;
                log::info!(
                    "{} {} lambda {}: rmse {:.4} m, {:.1}% clamped",
                    method.name(),
                    family,
                    lambda,
                    report.rmse,
                    100.0 * report.clamp_fraction
                );
                rows.push((method.name(), family, lambda, report));
            }
        }
    }
    Ok(rows)
}
