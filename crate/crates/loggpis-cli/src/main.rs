//! Command-line front end for Log-GPIS mapping.
//!
//! One scenario file describes an experiment; the verbs walk it through the
//! pipeline: `simulate` renders range frames from the analytic scene,
//! `build` ingests them into a distance-field map, `query`/`mesh` read the
//! field back out, and `eval`/`compare` score it against the scene. Outputs
//! are plain CSV, PLY and JSON files in one directory.

mod pipeline;
mod scenario;

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use loggpis::{KernelFamily, Method};
use scenario::ScenarioConfig;

#[derive(Parser)]
#[command(
    name = "loggpis",
    about = "Probabilistic Euclidean distance fields from range data",
    version
)]
struct Cli {
    /// Scenario file; every verb reads the same one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the scenario's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Simulation seed, overriding the scenario's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for field queries (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Length-scale override.
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Covariance family override: whittle or matern32.
    #[arg(long, global = true)]
    kernel: Option<String>,

    /// Regression method override: loggpis or gpis.
    #[arg(long, global = true)]
    method: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render noisy range frames from the scenario's analytic scene.
    Simulate,
    /// Ingest frames into a distance-field map, one refit per frame.
    Build {
        /// Frame manifest to ingest (default: OUT/manifest.txt).
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Where to write the map (default: OUT/map.txt).
        #[arg(long)]
        map_out: Option<PathBuf>,
    },
    /// Evaluate distance, gradient and variance at points or grid nodes.
    Query {
        /// Map file to query (default: OUT/map.txt).
        #[arg(long)]
        map: Option<PathBuf>,
        /// CSV of query coordinates, one point per row; without it the
        /// scenario grid is queried node by node.
        #[arg(long)]
        points: Option<PathBuf>,
        /// Where to write the rows (default: OUT/query.csv).
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Extract the zero isosurface: contour CSV in 2D, PLY mesh in 3D.
    Mesh {
        /// Map file to mesh (default: OUT/map.txt).
        #[arg(long)]
        map: Option<PathBuf>,
        /// Where to write the contour or mesh.
        #[arg(long)]
        mesh_out: Option<PathBuf>,
        /// Write ASCII PLY instead of binary.
        #[arg(long)]
        ascii: bool,
    },
    /// Score a map against the analytic scene on the evaluation grid.
    Eval {
        /// Map file to score (default: OUT/map.txt).
        #[arg(long)]
        map: Option<PathBuf>,
        /// Score the plain signed-distance baseline rebuilt from the frames
        /// instead of a saved map.
        #[arg(long)]
        baseline: bool,
    },
    /// Build and score every (method, kernel, length-scale) combination.
    Compare,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Some(threads) = cli.threads {
        if threads == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }

    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config <scenario file> is required"))?;
    let mut cfg = ScenarioConfig::load(config_path)?;
    apply_overrides(&mut cfg, &cli)?;

    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    match &cli.command {
        Command::Simulate => pipeline::cmd_simulate(&cfg, &out),
        Command::Build { frames, map_out } => {
            pipeline::cmd_build(&cfg, &out, frames.as_deref(), map_out.as_deref())
        }
        Command::Query { map, points, csv_out } => {
            pipeline::cmd_query(&cfg, &out, map.as_deref(), points.as_deref(), csv_out.as_deref())
        }
        Command::Mesh { map, mesh_out, ascii } => {
            pipeline::cmd_mesh(&cfg, &out, map.as_deref(), mesh_out.as_deref(), *ascii)
        }
        Command::Eval { map, baseline } => {
            pipeline::cmd_eval(&cfg, &out, map.as_deref(), *baseline)
        }
        Command::Compare => pipeline::cmd_compare(&cfg, &out),
    }
}

/// Command-line flags win over the scenario file. The method override also
/// resets the gradient-observation default to the new method's unless the
/// scenario pinned it explicitly.
fn apply_overrides(cfg: &mut ScenarioConfig, cli: &Cli) -> Result<()> {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(lambda) = cli.lambda {
        if !(lambda > 0.0 && lambda <= 1000.0) {
            bail!("--lambda must lie in (0, 1000]");
        }
        cfg.params.lambda = lambda;
    }
    if let Some(kernel) = &cli.kernel {
        cfg.params.family = kernel.parse::<KernelFamily>().map_err(|e| anyhow!(e))?;
    }
    if let Some(method) = &cli.method {
        cfg.method = method.parse::<Method>().map_err(|e| anyhow!(e))?;
    }
    Ok(())
}
