//! Scenario configuration files.
//!
//! A scenario file is a flat list of `key = value` lines that describes one
//! reconstruction experiment end to end: the analytic scene used by the
//! simulator, the sensor, the trajectory, the kernel, the arena, and the
//! evaluation grids. The same file drives every verb, so a pipeline run is
//! reproducible from a single artifact plus a seed.
//!
//! Syntax rules:
//!
//! * `#` starts a comment, blank lines are skipped;
//! * a line is `key = value`, split at the first `=`;
//! * vector values are whitespace-separated numbers (`arena_min = -10 -10`);
//! * `include = other.cfg` splices another file in place, relative to the
//!   including file, so shared scene blocks can be reused (depth limited,
//!   cycles rejected);
//! * `scene.sphere` and `scene.box` accumulate, one primitive per line;
//!   every other key keeps its last occurrence, so later lines (and files
//!   including other files) override earlier ones.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{SMatrix, SVector, Vector3};

use loggpis::ingestion::{CameraIntrinsics, DepthTemplate, Pose, ScanTemplate};
use loggpis::{KernelFamily, KernelParams, Method};

/// Maximum include nesting before the parser assumes a mistake.
const MAX_INCLUDE_DEPTH: usize = 8;

/// One `key = value` line, tagged with its origin for error messages.
#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    path: PathBuf,
    line: usize,
}

impl Entry {
    fn at(&self) -> String {
        format!("{}:{}", self.path.display(), self.line)
    }
}

/// Include-expanded key/value list, before typed extraction.
#[derive(Debug, Default)]
pub struct RawConfig {
    entries: Vec<Entry>,
}

impl RawConfig {
    /// Reads `path` and every file it includes into one flat entry list.
    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut visiting = HashSet::new();
        raw.load_into(path, 0, &mut visiting)?;
        Ok(raw)
    }

    fn load_into(
        &mut self,
        path: &Path,
        depth: usize,
        visiting: &mut HashSet<PathBuf>,
    ) -> Result<()> {
        if depth > MAX_INCLUDE_DEPTH {
            bail!("include depth exceeds {MAX_INCLUDE_DEPTH} at {}", path.display());
        }
        let canonical = path
            .canonicalize()
            .with_context(|| format!("reading config {}", path.display()))?;
        if !visiting.insert(canonical.clone()) {
            bail!("include cycle through {}", path.display());
        }
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{lineno}: expected `key = value`, got {line:?}", path.display());
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key == "include" {
                let target = path.parent().unwrap_or(Path::new(".")).join(&value);
                self.load_into(&target, depth + 1, visiting)?;
                continue;
            }
            self.entries.push(Entry { key, value, path: path.to_path_buf(), line: lineno });
        }
        visiting.remove(&canonical);
        Ok(())
    }

    /// Last entry for `key`, if any.
    fn last(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    /// Every entry for `key`, in file order.
    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    fn string(&self, key: &str) -> Option<String> {
        self.last(key).map(|e| e.value.clone())
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.last(key).map(parse_scalar::<f64>).transpose()
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.last(key).map(parse_scalar::<usize>).transpose()
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.last(key).map(parse_scalar::<u64>).transpose()
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        self.last(key).map(parse_scalar::<bool>).transpose()
    }

    fn vec_f64(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.last(key).map(parse_numbers).transpose()
    }

    fn vec_usize(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some(entry) = self.last(key) else { return Ok(None) };
        entry
            .value
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|e| anyhow!("{}: bad count {tok:?}: {e}", entry.at()))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

fn parse_scalar<T: std::str::FromStr>(entry: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    entry
        .value
        .parse::<T>()
        .map_err(|e| anyhow!("{}: bad value for {}: {e}", entry.at(), entry.key))
}

fn parse_numbers(entry: &Entry) -> Result<Vec<f64>> {
    entry
        .value
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| anyhow!("{}: bad number {tok:?}: {e}", entry.at(), ))
        })
        .collect()
}

/// Sphere primitive as read from a config line: center coordinates then radius.
#[derive(Debug, Clone)]
pub struct SphereSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Axis-aligned box primitive: center coordinates then half extents.
#[derive(Debug, Clone)]
pub struct BoxSpec {
    pub center: Vec<f64>,
    pub half_extents: Vec<f64>,
}

/// Evaluation or meshing lattice.
#[derive(Debug, Clone)]
pub struct GridSpecConfig {
    pub origin: Vec<f64>,
    pub cell: f64,
    pub counts: Vec<usize>,
}

/// Circular 2D trajectory, headings facing the ring center.
#[derive(Debug, Clone)]
pub struct RingSpec {
    pub count: usize,
    pub radius: f64,
    pub center: [f64; 2],
}

/// Circular 3D camera orbit at fixed height, optical axes aimed at the center.
#[derive(Debug, Clone)]
pub struct OrbitSpec {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub center: [f64; 3],
}

/// Map construction knobs that override the library defaults.
#[derive(Debug, Clone, Default)]
pub struct MapOverrides {
    pub leaf_capacity: Option<usize>,
    pub support_margin: Option<f64>,
    pub fuse_radius: Option<f64>,
    pub latent_floor: Option<f64>,
    pub max_depth: Option<usize>,
    pub gradient_observations: Option<bool>,
}

/// Fully typed scenario, validated against its own dimension.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub dim: usize,
    pub method: Method,
    pub params: KernelParams,
    pub arena_min: Vec<f64>,
    pub arena_max: Vec<f64>,
    pub spheres: Vec<SphereSpec>,
    pub boxes: Vec<BoxSpec>,
    pub seed: u64,
    pub scan: Option<ScanTemplate>,
    pub depth: Option<DepthTemplate>,
    pub depth_stride: usize,
    pub poses_file: Option<PathBuf>,
    pub ring: Option<RingSpec>,
    pub orbit: Option<OrbitSpec>,
    pub grid: Option<GridSpecConfig>,
    pub mesh_grid: Option<GridSpecConfig>,
    pub map: MapOverrides,
    pub lambda_sweep: Vec<f64>,
    pub out_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// Loads and type-checks a scenario file.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = RawConfig::load(path)?;
        Self::from_raw(&raw, path.parent().unwrap_or(Path::new(".")))
    }

    /// Extracts typed fields from a raw entry list. Paths in the config are
    /// resolved relative to `base`, the directory of the top-level file.
    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self> {
        let dim = raw.usize("dim")?.unwrap_or(2);
        if dim != 2 && dim != 3 {
            bail!("dim must be 2 or 3, got {dim}");
        }

        let method = match raw.string("method").as_deref() {
            None | Some("loggpis") => Method::LogGpis,
            Some("gpis") => Method::Gpis,
            Some(other) => bail!("method must be loggpis or gpis, got {other:?}"),
        };

        let mut params = KernelParams::default();
        if let Some(name) = raw.string("kernel") {
            params.family = name.parse::<KernelFamily>().map_err(|e| anyhow!(e))?;
        }
        if let Some(v) = raw.f64("lambda")? {
            params.lambda = v;
        }
        if let Some(v) = raw.f64("sigma2")? {
            params.sigma2 = v;
        }
        if let Some(v) = raw.f64("noise_y")? {
            params.noise_y = v;
        }
        if let Some(v) = raw.f64("noise_grad")? {
            params.noise_grad = v;
        }
        if !(params.lambda > 0.0 && params.lambda <= 1000.0) {
            bail!("lambda must lie in (0, 1000], got {}", params.lambda);
        }
        params.validate().map_err(|e| anyhow!("kernel parameters: {e}"))?;

        let arena_min = raw
            .vec_f64("arena_min")?
            .ok_or_else(|| anyhow!("missing required key arena_min"))?;
        let arena_max = raw
            .vec_f64("arena_max")?
            .ok_or_else(|| anyhow!("missing required key arena_max"))?;
        expect_len("arena_min", &arena_min, dim)?;
        expect_len("arena_max", &arena_max, dim)?;
        for a in 0..dim {
            if !(arena_min[a] < arena_max[a]) {
                bail!("arena_min must be strictly below arena_max on every axis");
            }
        }

        let mut spheres = Vec::new();
        for entry in raw.all("scene.sphere") {
            let nums = parse_numbers(entry)?;
            if nums.len() != dim + 1 {
                bail!("{}: scene.sphere needs {} numbers (center then radius)", entry.at(), dim + 1);
            }
            spheres.push(SphereSpec { center: nums[..dim].to_vec(), radius: nums[dim] });
        }
        let mut boxes = Vec::new();
        for entry in raw.all("scene.box") {
            let nums = parse_numbers(entry)?;
            if nums.len() != 2 * dim {
                bail!(
                    "{}: scene.box needs {} numbers (center then half extents)",
                    entry.at(),
                    2 * dim
                );
            }
            boxes.push(BoxSpec {
                center: nums[..dim].to_vec(),
                half_extents: nums[dim..].to_vec(),
            });
        }

        let seed = raw.u64("seed")?.unwrap_or(0);

        let scan = match (
            raw.f64("scan.angle_min")?,
            raw.f64("scan.angle_max")?,
            raw.f64("scan.angle_step")?,
        ) {
            (None, None, None) => None,
            (Some(angle_min), Some(angle_max), Some(angle_step)) => {
                let range_noise = raw.f64("scan.range_noise")?.unwrap_or(0.0);
                let template = ScanTemplate { angle_min, angle_max, angle_step, range_noise };
                template.validate().map_err(|e| anyhow!("scan template: {e}"))?;
                Some(template)
            }
            _ => bail!("scan.* needs angle_min, angle_max and angle_step together"),
        };

        let depth = match (raw.f64("depth.fx")?, raw.f64("depth.fy")?) {
            (None, None) => None,
            (Some(fx), Some(fy)) => {
                let cx = raw
                    .f64("depth.cx")?
                    .ok_or_else(|| anyhow!("depth.* needs cx"))?;
                let cy = raw
                    .f64("depth.cy")?
                    .ok_or_else(|| anyhow!("depth.* needs cy"))?;
                let width = raw
                    .usize("depth.width")?
                    .ok_or_else(|| anyhow!("depth.* needs width"))?;
                let height = raw
                    .usize("depth.height")?
                    .ok_or_else(|| anyhow!("depth.* needs height"))?;
                let depth_noise = raw.f64("depth.depth_noise")?.unwrap_or(0.0);
                if width == 0 || height == 0 {
                    bail!("depth image must have nonzero width and height");
                }
                if fx <= 0.0 || fy <= 0.0 {
                    bail!("depth focal lengths must be positive");
                }
                Some(DepthTemplate {
                    intrinsics: CameraIntrinsics { fx, fy, cx, cy },
                    width,
                    height,
                    depth_noise,
                })
            }
            _ => bail!("depth.* needs fx and fy together"),
        };
        let depth_stride = raw.usize("depth.stride")?.unwrap_or(1);
        if depth_stride == 0 {
            bail!("depth.stride must be at least 1");
        }

        let poses_file = raw.string("poses_file").map(|p| base.join(p));
        let ring = match raw.usize("poses.ring.count")? {
            None => None,
            Some(count) => {
                if count == 0 {
                    bail!("poses.ring.count must be positive");
                }
                let radius = raw
                    .f64("poses.ring.radius")?
                    .ok_or_else(|| anyhow!("poses.ring needs radius"))?;
                if radius <= 0.0 {
                    bail!("poses.ring.radius must be positive");
                }
                let center = raw.vec_f64("poses.ring.center")?.unwrap_or_else(|| vec![0.0, 0.0]);
                expect_len("poses.ring.center", &center, 2)?;
                Some(RingSpec { count, radius, center: [center[0], center[1]] })
            }
        };
        let orbit = match raw.usize("poses.orbit.count")? {
            None => None,
            Some(count) => {
                if count == 0 {
                    bail!("poses.orbit.count must be positive");
                }
                let radius = raw
                    .f64("poses.orbit.radius")?
                    .ok_or_else(|| anyhow!("poses.orbit needs radius"))?;
                if radius <= 0.0 {
                    bail!("poses.orbit.radius must be positive");
                }
                let height = raw.f64("poses.orbit.height")?.unwrap_or(0.0);
                let center =
                    raw.vec_f64("poses.orbit.center")?.unwrap_or_else(|| vec![0.0, 0.0, 0.0]);
                expect_len("poses.orbit.center", &center, 3)?;
                Some(OrbitSpec {
                    count,
                    radius,
                    height,
                    center: [center[0], center[1], center[2]],
                })
            }
        };

        let grid = load_grid(raw, "grid", dim)?;
        let mesh_grid = load_grid(raw, "mesh_grid", dim)?;

        let map = MapOverrides {
            leaf_capacity: raw.usize("map.leaf_capacity")?,
            support_margin: raw.f64("map.support_margin")?,
            fuse_radius: raw.f64("map.fuse_radius")?,
            latent_floor: raw.f64("map.latent_floor")?,
            max_depth: raw.usize("map.max_depth")?,
            gradient_observations: raw.bool("map.gradient_observations")?,
        };

        let lambda_sweep = raw
            .vec_f64("lambda_sweep")?
            .unwrap_or_else(|| vec![5.0, 10.0, 20.0, 40.0]);
        if lambda_sweep.is_empty() || lambda_sweep.iter().any(|&l| l <= 0.0 || l > 1000.0) {
            bail!("lambda_sweep values must lie in (0, 1000]");
        }

        let out_dir = raw.string("out_dir").map(|p| base.join(p));

        Ok(ScenarioConfig {
            dim,
            method,
            params,
            arena_min,
            arena_max,
            spheres,
            boxes,
            seed,
            scan,
            depth,
            depth_stride,
            poses_file,
            ring,
            orbit,
            grid,
            mesh_grid,
            map,
            lambda_sweep,
            out_dir,
        })
    }
}

fn expect_len(key: &str, v: &[f64], want: usize) -> Result<()> {
    if v.len() != want {
        bail!("{key} needs {want} numbers, got {}", v.len());
    }
    Ok(())
}

fn load_grid(raw: &RawConfig, prefix: &str, dim: usize) -> Result<Option<GridSpecConfig>> {
    let origin_key = format!("{prefix}.origin");
    let cell_key = format!("{prefix}.cell");
    let counts_key = format!("{prefix}.counts");
    match (raw.vec_f64(&origin_key)?, raw.f64(&cell_key)?, raw.vec_usize(&counts_key)?) {
        (None, None, None) => Ok(None),
        (Some(origin), Some(cell), Some(counts)) => {
            expect_len(&origin_key, &origin, dim)?;
            if counts.len() != dim {
                bail!("{counts_key} needs {dim} counts, got {}", counts.len());
            }
            if cell <= 0.0 {
                bail!("{cell_key} must be positive");
            }
            if counts.iter().any(|&c| c == 0) {
                bail!("{counts_key} entries must be positive");
            }
            Ok(Some(GridSpecConfig { origin, cell, counts }))
        }
        _ => bail!("{prefix}.* needs origin, cell and counts together"),
    }
}

/// Evenly spaced poses on a circle, each heading aimed at the ring center.
///
/// Pose `i` sits at angle `2 pi i / count` and looks inward, which is the
/// natural trajectory for scanning a closed object from outside.
pub fn ring_poses_2d(spec: &RingSpec) -> Vec<Pose<2>> {
    let center = SVector::<f64, 2>::new(spec.center[0], spec.center[1]);
    (0..spec.count)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.count as f64;
            let offset = SVector::<f64, 2>::new(theta.cos(), theta.sin()) * spec.radius;
            Pose::from_heading(theta + std::f64::consts::PI, center + offset)
        })
        .collect()
}

/// Evenly spaced camera poses orbiting a point at fixed height.
///
/// The camera convention is x right, y down, z forward; each pose's optical
/// axis points from the camera position toward the orbit center.
pub fn orbit_poses_3d(spec: &OrbitSpec) -> Result<Vec<Pose<3>>> {
    let center = Vector3::new(spec.center[0], spec.center[1], spec.center[2]);
    (0..spec.count)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.count as f64;
            let position = center
                + Vector3::new(
                    spec.radius * theta.cos(),
                    spec.radius * theta.sin(),
                    spec.height,
                );
            look_at(position, center)
        })
        .collect()
}

/// Builds a camera pose at `position` whose optical axis points at `target`.
fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> Result<Pose<3>> {
    let forward = (target - position)
        .try_normalize(1e-12)
        .ok_or_else(|| anyhow!("camera position coincides with its target"))?;
    let mut up = Vector3::new(0.0, 0.0, 1.0);
    if forward.cross(&up).norm() < 1e-9 {
        up = Vector3::new(0.0, 1.0, 0.0);
    }
    let x_cam = forward.cross(&up).normalize();
    let y_cam = forward.cross(&x_cam);
    let rotation = SMatrix::<f64, 3, 3>::from_columns(&[x_cam, y_cam, forward]);
    Pose::new(rotation, position).map_err(|e| anyhow!("look-at pose: {e}"))
}
