//! Ground truth, baselines, and metrics: exact distance oracles against
//! analytic scenes or dense point clouds, the standard implicit-surface GP
//! baseline, slice evaluation of a reconstructed field, and per-vertex mesh
//! error with its variance correlation.

use std::path::Path;
use std::time::Instant;

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::covariance::KernelParams;
use crate::error::{Error, Result};
use crate::ingestion::AnalyticScene;
use crate::map::{ClusterMap, MapConfig, Method, SurfacePoint};
use crate::surface::{sample_signed_grid, FieldSource, GridSpec};

/// Width of the mesh-error histogram bins, in meters.
pub const HISTOGRAM_BIN: f64 = 0.001;

/// A kd-tree over points, used for exact nearest-neighbor distances to
/// dense clouds. Splits on the widest-spread axis rule of cycling by depth;
/// queries prune by splitting-plane distance, so results equal a pairwise
/// scan exactly.
#[derive(Clone, Debug)]
pub struct KdTree<const D: usize> {
    points: Vec<SVector<f64, D>>,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

#[derive(Clone, Debug)]
struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: Vec<SVector<f64, D>>) -> Self {
        let mut tree = KdTree {
            points,
            nodes: Vec::new(),
            root: None,
        };
        let mut order: Vec<usize> = (0..tree.points.len()).collect();
        tree.root = tree.build_node(&mut order, 0);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, order: &mut [usize], depth: usize) -> Option<usize> {
        if order.is_empty() {
            return None;
        }
        let axis = depth % D;
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |a, b| {
            self.points[*a][axis]
                .total_cmp(&self.points[*b][axis])
                .then(a.cmp(b))
        });
        let point = order[mid];
        let id = self.nodes.len();
        self.nodes.push(KdNode {
            point,
            axis,
            left: None,
            right: None,
        });
        let (lo, hi) = order.split_at_mut(mid);
        let left = self.build_node(lo, depth + 1);
        let right = self.build_node(&mut hi[1..], depth + 1);
        self.nodes[id].left = left;
        self.nodes[id].right = right;
        Some(id)
    }

    /// Distance to, and index of, the nearest stored point.
    pub fn nearest(&self, q: &SVector<f64, D>) -> Option<(f64, usize)> {
        let root = self.root?;
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(root, q, &mut best);
        Some((best.0.sqrt(), best.1))
    }

    fn search(&self, id: usize, q: &SVector<f64, D>, best: &mut (f64, usize)) {
        let node = &self.nodes[id];
        let p = &self.points[node.point];
        let d2 = (p - q).norm_squared();
        if d2 < best.0 {
            *best = (d2, node.point);
        }
        let delta = q[node.axis] - p[node.axis];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.search(n, q, best);
        }
        if let Some(f) = far {
            if delta * delta < best.0 {
                self.search(f, q, best);
            }
        }
    }
}

/// Ground truth to measure against: a closed-form scene or a dense cloud.
pub enum Truth<const D: usize> {
    Scene(AnalyticScene<D>),
    Cloud(KdTree<D>),
}

impl<const D: usize> Truth<D> {
    pub fn from_cloud(points: Vec<SVector<f64, D>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("truth cloud must be non-empty"));
        }
        Ok(Truth::Cloud(KdTree::build(points)))
    }

    /// Unsigned distance to the truth surface.
    pub fn edf(&self, q: &SVector<f64, D>) -> f64 {
        match self {
            Truth::Scene(scene) => scene.edf(q),
            Truth::Cloud(tree) => tree.nearest(q).map(|(d, _)| d).unwrap_or(f64::INFINITY),
        }
    }
}

/// Exact unsigned distances for a batch of queries.
pub fn oracle_edf<const D: usize>(truth: &Truth<D>, queries: &[SVector<f64, D>]) -> Vec<f64> {
    queries.iter().map(|q| truth.edf(q)).collect()
}

/// The standard implicit-surface GP baseline: the same cluster machinery
/// with on-surface targets 0 and normal gradient targets, no log transform,
/// and the raw predictive mean read as distance. Fusion is disabled so the
/// baseline sees every observation as given.
pub fn standard_gpis_baseline<const D: usize>(
    points: &[SurfacePoint<D>],
    params: &KernelParams,
    arena_min: SVector<f64, D>,
    arena_max: SVector<f64, D>,
) -> Result<ClusterMap<D>> {
    let mut config = MapConfig::new(arena_min, arena_max, params.clone(), Method::Gpis)?;
    config.fuse_radius = 0.0;
    let mut map = ClusterMap::new(config)?;
    map.insert_points(points);
    map.refit_dirty();
    Ok(map)
}

/// Field-vs-oracle metrics over one evaluation grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Root mean square of |distance| - EDF over non-clamped nodes, m.
    pub rmse: f64,
    /// Mean absolute error over non-clamped nodes, m.
    pub mean_abs_err: f64,
    /// 95th percentile of the eikonal residual abs(|grad d| - 1), from
    /// central differences over non-clamped interior nodes.
    pub eikonal_p95: f64,
    /// Fraction of nodes whose estimate was clamped.
    pub clamp_fraction: f64,
    pub evaluated_nodes: usize,
    pub clamped_nodes: usize,
    /// Where the per-node rows were written, when requested.
    pub per_query_csv: Option<String>,
    /// Wall-clock build time, filled by the caller that timed the build.
    pub build_seconds: f64,
    /// Mean field query cost over this grid.
    pub query_micros_per_point: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Queries every grid node, compares absolute distances against the truth,
/// and reports RMSE (non-clamped nodes only), clamp fraction, and the
/// eikonal residual. Optionally writes one CSV row per node.
pub fn evaluate_slice<S: FieldSource<D>, const D: usize>(
    source: &S,
    truth: &Truth<D>,
    grid: &GridSpec<D>,
    track: &[SVector<f64, D>],
    csv_path: Option<&Path>,
) -> Result<MetricsReport> {
    let started = Instant::now();
    let sampled = sample_signed_grid(source, grid, track)?;
    let query_micros = started.elapsed().as_secs_f64() * 1e6 / grid.node_count() as f64;

    let mut sq_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut evaluated = 0usize;
    let mut clamped = 0usize;
    let mut rows = Vec::new();
    for l in 0..grid.node_count() {
        let est = &sampled.estimates[l];
        let pos = grid.position(grid.node(l));
        let oracle = truth.edf(&pos);
        let err = est.distance - oracle;
        if est.clamped {
            clamped += 1;
        } else {
            sq_sum += err * err;
            abs_sum += err.abs();
            evaluated += 1;
        }
        if csv_path.is_some() {
            let coords: Vec<String> = pos.iter().map(|v| v.to_string()).collect();
            rows.push(format!(
                "{},{},{},{},{},{},{}",
                coords.join(","),
                est.distance,
                oracle,
                err.abs(),
                est.variance,
                est.sign.to_f64(),
                u8::from(est.clamped),
            ));
        }
    }
    if evaluated == 0 {
        return Err(Error::invalid(
            "no non-clamped nodes to evaluate on this grid",
        ));
    }

    // Eikonal residual from central differences of the signed samples,
    // using only stencils whose nodes are all non-clamped.
    let mut residuals = Vec::new();
    'node: for l in 0..grid.node_count() {
        if sampled.estimates[l].clamped {
            continue;
        }
        let idx = grid.node(l);
        let mut grad_sq = 0.0;
        let mut measured_axes = 0usize;
        for a in 0..D {
            if grid.counts[a] < 3 {
                continue;
            }
            if idx[a] == 0 || idx[a] + 1 >= grid.counts[a] {
                continue 'node;
            }
            let mut lo = idx;
            let mut hi = idx;
            lo[a] -= 1;
            hi[a] += 1;
            let (ll, lh) = (grid.linear(lo), grid.linear(hi));
            if sampled.estimates[ll].clamped || sampled.estimates[lh].clamped {
                continue 'node;
            }
            let g = (sampled.signed_value(lh) - sampled.signed_value(ll)) / (2.0 * grid.cell_size);
            grad_sq += g * g;
            measured_axes += 1;
        }
        if measured_axes > 0 {
            residuals.push((grad_sq.sqrt() - 1.0).abs());
        }
    }
    residuals.sort_unstable_by(f64::total_cmp);
    let eikonal_p95 = percentile(&residuals, 0.95);

    let per_query_csv = if let Some(path) = csv_path {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let axes = ["x", "y", "z"];
        let coord_header: Vec<&str> = axes[..D].to_vec();
        writeln!(
            w,
            "{},distance,oracle_edf,abs_error,variance,sign,clamped",
            coord_header.join(",")
        )?;
        for row in &rows {
            writeln!(w, "{row}")?;
        }
        w.flush()?;
        Some(path.display().to_string())
    } else {
        None
    };

    Ok(MetricsReport {
        rmse: (sq_sum / evaluated as f64).sqrt(),
        mean_abs_err: abs_sum / evaluated as f64,
        eikonal_p95,
        clamp_fraction: clamped as f64 / grid.node_count() as f64,
        evaluated_nodes: evaluated,
        clamped_nodes: clamped,
        per_query_csv,
        build_seconds: 0.0,
        query_micros_per_point: query_micros,
    })
}

/// Per-vertex mesh error against the truth, with 1 mm histogram bins and
/// the rank correlation between vertex variance and vertex error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeshErrorReport {
    pub median: f64,
    pub p95: f64,
    pub per_vertex: Vec<f64>,
    /// Counts per `HISTOGRAM_BIN`-wide bin starting at zero error.
    pub histogram: Vec<usize>,
    /// Spearman rank correlation of (vertex variance, vertex error); absent
    /// when either side has no variation to rank.
    pub variance_error_spearman: Option<f64>,
}

pub fn mesh_error<const D: usize>(
    mesh: &crate::surface::Mesh<D>,
    truth: &Truth<D>,
) -> Result<MeshErrorReport> {
    if mesh.vertices.is_empty() {
        return Err(Error::invalid("mesh has no vertices to evaluate"));
    }
    let per_vertex: Vec<f64> = mesh.vertices.iter().map(|v| truth.edf(v)).collect();
    let mut sorted = per_vertex.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let p95 = percentile(&sorted, 0.95);

    let bins = (sorted[sorted.len() - 1] / HISTOGRAM_BIN).floor() as usize + 1;
    let mut histogram = vec![0usize; bins];
    for e in &per_vertex {
        histogram[(e / HISTOGRAM_BIN).floor() as usize] += 1;
    }

    let variance_error_spearman = spearman(&mesh.vertex_variance, &per_vertex);
    Ok(MeshErrorReport {
        median,
        p95,
        per_vertex,
        histogram,
        variance_error_spearman,
    })
}

/// Writes histogram rows `bin_lower_m,count`.
pub fn save_histogram_csv(path: &Path, report: &MeshErrorReport) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "bin_lower_m,count")?;
    for (i, count) in report.histogram.iter().enumerate() {
        writeln!(w, "{},{}", i as f64 * HISTOGRAM_BIN, count)?;
    }
    w.flush()?;
    Ok(())
}

/// Average ranks, ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0;
        for k in i..=j {
            out[order[k]] = mean_rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; None when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() - 1) as f64 / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return None;
    }
    Some(cov / (var_a * var_b).sqrt())
}
