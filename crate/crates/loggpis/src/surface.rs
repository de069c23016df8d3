//! Zero-level surface extraction from the queried field: signed grid
//! sampling with neighbor sign propagation, marching squares for 2D
//! contours, and a face-consistent marching-cubes variant for 3D meshes.
//!
//! Both extractors share the same square case table: in 3D every cube face
//! is cut with the 2D rules (including the bilinear saddle decider for the
//! ambiguous diagonal cases), the face segments are linked into closed
//! loops around each cell, and the loops are fanned into triangles. Because
//! a face's cut depends only on its own corner values, the two cells
//! sharing a face always agree on it and the mesh is watertight wherever
//! the surface closes inside the grid.
//!
//! Edge vertices are placed by one Newton step along the edge using the
//! queried gradient (falling back to linear interpolation), and each vertex
//! carries the field variance at its final position. Vertices landing on
//! the same position are welded to one index: mapped fields clamp to
//! distance exactly zero where the latent overshoots one, so grid nodes can
//! sit exactly on the zero level and several edges then place their vertex
//! at the same node.

use std::collections::HashMap;

use nalgebra::SVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{FieldEstimate, Sign};
use crate::ingestion::AnalyticScene;
use crate::map::ClusterMap;


/// Gradient slopes below this give up on Newton refinement.
const SLOPE_EPS: f64 = 1e-12;

/// Step used for the oracle's finite-difference gradient.
const ORACLE_GRAD_STEP: f64 = 1e-6;

/// A regular node grid: `counts[a]` nodes along axis `a` spaced `cell_size`
/// apart starting at `origin`. Linear node order is x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec<const D: usize> {
    pub origin: SVector<f64, D>,
    pub cell_size: f64,
    pub counts: [usize; D],
}

impl<const D: usize> GridSpec<D> {
    /// A single-node axis is allowed so slice grids can be expressed as
    /// degenerate 3D grids.
    pub fn new(origin: SVector<f64, D>, cell_size: f64, counts: [usize; D]) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid("cell_size must be positive"));
        }
        if counts.iter().any(|c| *c == 0) {
            return Err(Error::invalid("grid needs at least one node per axis"));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(GridSpec {
            origin,
            cell_size,
            counts,
        })
    }

    pub fn node_count(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn position(&self, idx: [usize; D]) -> SVector<f64, D> {
        let mut p = self.origin;
        for a in 0..D {
            p[a] += idx[a] as f64 * self.cell_size;
        }
        p
    }

    pub fn linear(&self, idx: [usize; D]) -> usize {
        let mut l = 0usize;
        for a in (0..D).rev() {
            l = l * self.counts[a] + idx[a];
        }
        l
    }

    pub fn node(&self, mut linear: usize) -> [usize; D] {
        let mut idx = [0usize; D];
        for a in 0..D {
            idx[a] = linear % self.counts[a];
            linear /= self.counts[a];
        }
        idx
    }

    /// Number of cells along each axis (one less than nodes, or zero).
    fn cell_counts(&self) -> [usize; D] {
        let mut c = [0usize; D];
        for a in 0..D {
            c[a] = self.counts[a].saturating_sub(1);
        }
        c
    }
}

/// Anything that can answer field queries over a grid: the cluster map, or
/// an exact oracle wrapped around an analytic scene for calibration runs.
pub trait FieldSource<const D: usize>: Sync {
    fn field_estimate(
        &self,
        query: &SVector<f64, D>,
        sensor: Option<&SVector<f64, D>>,
    ) -> Result<FieldEstimate<D>>;
}

impl<const D: usize> FieldSource<D> for ClusterMap<D> {
    fn field_estimate(
        &self,
        query: &SVector<f64, D>,
        sensor: Option<&SVector<f64, D>>,
    ) -> Result<FieldEstimate<D>> {
        self.query(query, sensor)
    }
}

/// Exact field backed by an analytic scene: true distances, zero variance,
/// finite-difference gradients. Lets the extraction machinery be exercised
/// and calibrated independently of the regression.
pub struct OracleField<const D: usize> {
    pub scene: AnalyticScene<D>,
}

impl<const D: usize> FieldSource<D> for OracleField<D> {
    fn field_estimate(
        &self,
        query: &SVector<f64, D>,
        _sensor: Option<&SVector<f64, D>>,
    ) -> Result<FieldEstimate<D>> {
        let sd = self.scene.signed_distance(query);
        let mut grad = SVector::<f64, D>::zeros();
        for a in 0..D {
            let mut hi = *query;
            let mut lo = *query;
            hi[a] += ORACLE_GRAD_STEP;
            lo[a] -= ORACLE_GRAD_STEP;
            grad[a] = (self.scene.edf(&hi) - self.scene.edf(&lo)) / (2.0 * ORACLE_GRAD_STEP);
        }
        let gradient = if grad.norm() > 1e-9 {
            Some(grad.normalize())
        } else {
            None
        };
        Ok(FieldEstimate {
            latent_mean: 0.0,
            distance: sd.abs(),
            gradient,
            variance: 0.0,
            sign: if sd >= 0.0 { Sign::Outside } else { Sign::Inside },
            clamped: false,
        })
    }
}

/// A sampled grid of field estimates with a fully resolved sign per node.
#[derive(Clone, Debug)]
pub struct SignedGrid<const D: usize> {
    pub spec: GridSpec<D>,
    /// +1 or -1 per node after propagation.
    pub signs: Vec<i8>,
    pub estimates: Vec<FieldEstimate<D>>,
}

impl<const D: usize> SignedGrid<D> {
    /// Signed distance at a node (negative inside).
    pub fn signed_value(&self, linear: usize) -> f64 {
        self.signs[linear] as f64 * self.estimates[linear].distance
    }
}

/// The track pose closest to a query, used to orient sign recovery.
fn nearest_sensor<'a, const D: usize>(
    track: &'a [SVector<f64, D>],
    query: &SVector<f64, D>,
) -> Option<&'a SVector<f64, D>> {
    track
        .iter()
        .min_by(|a, b| (*a - query).norm_squared().total_cmp(&(*b - query).norm_squared()))
}

/// Queries every grid node and resolves a sign everywhere: nodes whose sign
/// recovery was inconclusive take the majority sign of their defined axis
/// neighbors, iterated synchronously to a fixpoint; any node still unknown
/// (for example a grid with no surface data at all) is set positive.
pub fn sample_signed_grid<S: FieldSource<D>, const D: usize>(
    source: &S,
    spec: &GridSpec<D>,
    track: &[SVector<f64, D>],
) -> Result<SignedGrid<D>> {
    let n = spec.node_count();
    let estimates: Vec<FieldEstimate<D>> = (0..n)
        .into_par_iter()
        .map(|l| {
            let pos = spec.position(spec.node(l));
            source.field_estimate(&pos, nearest_sensor(track, &pos))
        })
        .collect::<Result<_>>()?;

    let mut signs: Vec<i8> = estimates
        .iter()
        .map(|e| match e.sign {
            Sign::Outside => 1,
            Sign::Inside => -1,
            Sign::Unknown => 0,
        })
        .collect();

    // Synchronous majority propagation: deterministic and independent of
    // node traversal order.
    loop {
        let mut next = signs.clone();
        let mut changed = false;
        for l in 0..n {
            if signs[l] != 0 {
                continue;
            }
            let idx = spec.node(l);
            let mut tally = 0i32;
            for a in 0..D {
                if idx[a] > 0 {
                    let mut j = idx;
                    j[a] -= 1;
                    tally += signs[spec.linear(j)] as i32;
                }
                if idx[a] + 1 < spec.counts[a] {
                    let mut j = idx;
                    j[a] += 1;
                    tally += signs[spec.linear(j)] as i32;
                }
            }
            if tally > 0 {
                next[l] = 1;
                changed = true;
            } else if tally < 0 {
                next[l] = -1;
                changed = true;
            }
        }
        signs = next;
        if !changed {
            break;
        }
    }
    for s in &mut signs {
        if *s == 0 {
            *s = 1;
        }
    }

    Ok(SignedGrid {
        spec: spec.clone(),
        signs,
        estimates,
    })
}

/// Extracted zero-level geometry: segments in 2D, triangles in 3D, with a
/// posterior variance per vertex.
#[derive(Clone, Debug, Default)]
pub struct Mesh<const D: usize> {
    pub vertices: Vec<SVector<f64, D>>,
    pub faces: Vec<[usize; D]>,
    pub vertex_variance: Vec<f64>,
}

impl<const D: usize> Mesh<D> {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

/// Zero-contour segments of a bilinear square with corner values
/// `[s00, s10, s11, s01]` (inside = negative). Local edge ids: 0 bottom
/// (00-10), 1 right (10-11), 2 top (01-11), 3 left (00-01). The two
/// diagonal cases are resolved by the sign of the bilinear interpolant at
/// its saddle point, so both cells sharing a 3D face cut it identically.
fn square_segments(s: [f64; 4]) -> Vec<(u8, u8)> {
    let inside = |v: f64| v < 0.0;
    let case = inside(s[0]) as usize
        | (inside(s[1]) as usize) << 1
        | (inside(s[2]) as usize) << 2
        | (inside(s[3]) as usize) << 3;
    let saddle_inside = || {
        let denom = s[0] + s[2] - s[1] - s[3];
        denom.abs() > f64::MIN_POSITIVE && (s[0] * s[2] - s[1] * s[3]) / denom < 0.0
    };
    match case {
        0 | 15 => vec![],
        1 => vec![(3, 0)],
        2 => vec![(0, 1)],
        3 => vec![(3, 1)],
        4 => vec![(1, 2)],
        5 => {
            if saddle_inside() {
                vec![(0, 1), (2, 3)]
            } else {
                vec![(3, 0), (1, 2)]
            }
        }
        6 | 9 => vec![(0, 2)],
        7 => vec![(3, 2)],
        8 => vec![(2, 3)],
        10 => {
            if saddle_inside() {
                vec![(3, 0), (1, 2)]
            } else {
                vec![(0, 1), (2, 3)]
            }
        }
        11 => vec![(1, 2)],
        12 => vec![(3, 1)],
        13 => vec![(0, 1)],
        14 => vec![(3, 0)],
        _ => unreachable!(),
    }
}

/// A grid edge, identified by its lower node (linear index) and axis.
type EdgeKey = (usize, u8);

/// Places one vertex on a sign-changing grid edge: linear interpolation of
/// the endpoint values, then one Newton step using the queried signed
/// gradient, kept only when it stays on the edge. Returns the vertex and
/// the field variance queried at it.
fn refine_edge_vertex<S: FieldSource<D>, const D: usize>(
    source: &S,
    track: &[SVector<f64, D>],
    a: &SVector<f64, D>,
    b: &SVector<f64, D>,
    va: f64,
    vb: f64,
) -> Result<(SVector<f64, D>, f64)> {
    let t0 = (va / (va - vb)).clamp(0.0, 1.0);
    let p0 = a + (b - a) * t0;
    let est = source.field_estimate(&p0, nearest_sensor(track, &p0))?;

    let mut t1 = t0;
    if let (Some(d0), Some(grad)) = (est.signed_distance(), est.gradient) {
        let slope = est.sign.to_f64() * grad.dot(&(b - a));
        if slope.abs() > SLOPE_EPS {
            let candidate = t0 - d0 / slope;
            if candidate.is_finite() && (0.0..=1.0).contains(&candidate) {
                t1 = candidate;
            }
        }
    }
    let p1 = a + (b - a) * t1;
    if t1 == t0 {
        return Ok((p1, est.variance));
    }
    let refined = source.field_estimate(&p1, nearest_sensor(track, &p1))?;
    Ok((p1, refined.variance))
}

/// Deduplicated vertex construction keyed by grid edge. Vertices that land
/// on the same position bit for bit are welded to one index: when a grid
/// node sits exactly on the zero level (the latent clamp produces such
/// plateaus), several crossing edges place their vertex exactly at that
/// node, and sharing the index keeps contours and meshes connected there.
struct VertexPool<const D: usize> {
    by_edge: HashMap<EdgeKey, usize>,
    by_position: HashMap<[u64; D], usize>,
    vertices: Vec<SVector<f64, D>>,
    variance: Vec<f64>,
}

impl<const D: usize> VertexPool<D> {
    fn new() -> Self {
        VertexPool {
            by_edge: HashMap::new(),
            by_position: HashMap::new(),
            vertices: Vec::new(),
            variance: Vec::new(),
        }
    }

    fn vertex<S: FieldSource<D>>(
        &mut self,
        source: &S,
        track: &[SVector<f64, D>],
        grid: &SignedGrid<D>,
        key: EdgeKey,
    ) -> Result<usize> {
        if let Some(&i) = self.by_edge.get(&key) {
            return Ok(i);
        }
        let (node, axis) = key;
        let idx = grid.spec.node(node);
        let mut other = idx;
        other[axis as usize] += 1;
        let a = grid.spec.position(idx);
        let b = grid.spec.position(other);
        let va = grid.signed_value(node);
        let vb = grid.signed_value(grid.spec.linear(other));
        let (p, var) = refine_edge_vertex(source, track, &a, &b, va, vb)?;
        // Adding 0.0 folds -0.0 onto +0.0 so the weld key is unambiguous.
        let position_key: [u64; D] = std::array::from_fn(|i| (p[i] + 0.0).to_bits());
        let i = match self.by_position.get(&position_key) {
            Some(&existing) => existing,
            None => {
                let i = self.vertices.len();
                self.vertices.push(p);
                self.variance.push(var);
                self.by_position.insert(position_key, i);
                i
            }
        };
        self.by_edge.insert(key, i);
        Ok(i)
    }

    fn push_free(&mut self, p: SVector<f64, D>, var: f64) -> usize {
        let i = self.vertices.len();
        self.vertices.push(p);
        self.variance.push(var);
        i
    }
}

/// Marching squares over a sampled signed grid.
pub fn extract_iso_2d<S: FieldSource<2>>(
    source: &S,
    spec: &GridSpec<2>,
    track: &[SVector<f64, 2>],
) -> Result<Mesh<2>> {
    let grid = sample_signed_grid(source, spec, track)?;
    contour_from_grid(source, track, &grid, false)
}

fn contour_from_grid<S: FieldSource<2>>(
    source: &S,
    track: &[SVector<f64, 2>],
    grid: &SignedGrid<2>,
    reverse_order: bool,
) -> Result<Mesh<2>> {
    let cells = grid.spec.cell_counts();
    let mut pool = VertexPool::new();
    let mut faces: Vec<[usize; 2]> = Vec::new();

    let mut order: Vec<(usize, usize)> = (0..cells[1])
        .flat_map(|j| (0..cells[0]).map(move |i| (i, j)))
        .collect();
    if reverse_order {
        order.reverse();
    }

    for (i, j) in order {
        let n00 = grid.spec.linear([i, j]);
        let n10 = grid.spec.linear([i + 1, j]);
        let n11 = grid.spec.linear([i + 1, j + 1]);
        let n01 = grid.spec.linear([i, j + 1]);
        let s = [
            grid.signed_value(n00),
            grid.signed_value(n10),
            grid.signed_value(n11),
            grid.signed_value(n01),
        ];
        // Local edges to grid edges: 0 bottom, 1 right, 2 top, 3 left.
        let edge_keys: [EdgeKey; 4] = [(n00, 0), (n10, 1), (n01, 0), (n00, 1)];
        for (ea, eb) in square_segments(s) {
            let va = pool.vertex(source, track, grid, edge_keys[ea as usize])?;
            let vb = pool.vertex(source, track, grid, edge_keys[eb as usize])?;
            // Welded endpoints collapse the segment to a point; the chain
            // continues through the shared vertex.
            if va != vb {
                faces.push([va, vb]);
            }
        }
    }
    if faces.is_empty() {
        log::info!("no zero crossing inside the grid; contour is empty");
    }
    Ok(Mesh {
        vertices: pool.vertices,
        faces,
        vertex_variance: pool.variance,
    })
}

/// Face-consistent marching cubes over a sampled signed grid.
pub fn extract_iso_3d<S: FieldSource<3>>(
    source: &S,
    spec: &GridSpec<3>,
    track: &[SVector<f64, 3>],
) -> Result<Mesh<3>> {
    let grid = sample_signed_grid(source, spec, track)?;
    mesh_from_grid(source, track, &grid, false)
}

fn mesh_from_grid<S: FieldSource<3>>(
    source: &S,
    track: &[SVector<f64, 3>],
    grid: &SignedGrid<3>,
    reverse_order: bool,
) -> Result<Mesh<3>> {
    let cells = grid.spec.cell_counts();
    let mut pool = VertexPool::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    let mut order: Vec<[usize; 3]> = Vec::with_capacity(cells.iter().product());
    for k in 0..cells[2] {
        for j in 0..cells[1] {
            for i in 0..cells[0] {
                order.push([i, j, k]);
            }
        }
    }
    if reverse_order {
        order.reverse();
    }

    for cell in order {
        polygonize_cell(source, track, grid, cell, &mut pool, &mut faces)?;
    }
    if faces.is_empty() {
        log::info!("no zero crossing inside the grid; mesh is empty");
    }
    Ok(Mesh {
        vertices: pool.vertices,
        faces,
        vertex_variance: pool.variance,
    })
}

/// Cuts one cell: runs the square rules on each of the six faces, links the
/// resulting segments into closed loops around the cell, and fans each loop
/// into triangles oriented along the local gradient (inside to outside).
fn polygonize_cell<S: FieldSource<3>>(
    source: &S,
    track: &[SVector<f64, 3>],
    grid: &SignedGrid<3>,
    cell: [usize; 3],
    pool: &mut VertexPool<3>,
    faces: &mut Vec<[usize; 3]>,
) -> Result<()> {
    // Corner c has offset bit a of c along axis a.
    let corner_linear = |c: usize| {
        let idx = [
            cell[0] + (c & 1),
            cell[1] + ((c >> 1) & 1),
            cell[2] + ((c >> 2) & 1),
        ];
        grid.spec.linear(idx)
    };
    let values: [f64; 8] = std::array::from_fn(|c| grid.signed_value(corner_linear(c)));
    let inside_count = values.iter().filter(|v| **v < 0.0).count();
    if inside_count == 0 || inside_count == 8 {
        return Ok(());
    }

    // Face segments as pairs of cube-edge keys; insertion order kept for
    // deterministic loop starts.
    let mut adjacency: Vec<(EdgeKey, Vec<EdgeKey>)> = Vec::new();
    let link = |from: EdgeKey, to: EdgeKey, adjacency: &mut Vec<(EdgeKey, Vec<EdgeKey>)>| {
        match adjacency.iter_mut().find(|(k, _)| *k == from) {
            Some((_, n)) => n.push(to),
            None => adjacency.push((from, vec![to])),
        }
    };

    for axis in 0..3usize {
        let u = (axis + 1) % 3;
        let v = (axis + 2) % 3;
        for side in 0..2usize {
            // Face corner c00 sits at the cell corner with offset `side`
            // along `axis`; the face is spanned by u then v.
            let corner = |du: usize, dv: usize| {
                let mut bits = side << axis;
                bits |= du << u;
                bits |= dv << v;
                bits
            };
            let c00 = corner(0, 0);
            let c10 = corner(1, 0);
            let c11 = corner(1, 1);
            let c01 = corner(0, 1);
            let s = [values[c00], values[c10], values[c11], values[c01]];
            let edge_keys: [EdgeKey; 4] = [
                (corner_linear(c00), u as u8),
                (corner_linear(c10), v as u8),
                (corner_linear(c01), u as u8),
                (corner_linear(c00), v as u8),
            ];
            for (ea, eb) in square_segments(s) {
                let ka = edge_keys[ea as usize];
                let kb = edge_keys[eb as usize];
                link(ka, kb, &mut adjacency);
                link(kb, ka, &mut adjacency);
            }
        }
    }

    // Every crossing edge lies on exactly two faces of the cell and gets
    // one segment endpoint from each, so the graph decomposes into closed
    // loops.
    let mut visited: Vec<bool> = vec![false; adjacency.len()];
    let neighbor_of = |key: EdgeKey, adjacency: &[(EdgeKey, Vec<EdgeKey>)]| {
        adjacency.iter().find(|(k, _)| *k == key).map(|(_, n)| n.clone())
    };
    for start in 0..adjacency.len() {
        if visited[start] {
            continue;
        }
        let start_key = adjacency[start].0;
        let mut loop_keys = vec![start_key];
        visited[start] = true;
        let mut prev = start_key;
        let mut cur = adjacency[start].1[0];
        while cur != start_key {
            let pos = adjacency.iter().position(|(k, _)| *k == cur);
            let Some(pos) = pos else { break };
            if visited[pos] {
                break;
            }
            visited[pos] = true;
            loop_keys.push(cur);
            let neighbors = neighbor_of(cur, &adjacency).unwrap_or_default();
            if neighbors.len() != 2 {
                log::warn!("open contour loop in cell {cell:?}; skipping");
                loop_keys.clear();
                break;
            }
            let next = if neighbors[0] == prev { neighbors[1] } else { neighbors[0] };
            prev = cur;
            cur = next;
        }
        if loop_keys.len() < 3 {
            continue;
        }

        let mut loop_vertices = Vec::with_capacity(loop_keys.len());
        for key in &loop_keys {
            loop_vertices.push(pool.vertex(source, track, grid, *key)?);
        }
        // Welding can map neighboring crossing edges to one vertex; collapse
        // the repeats (including across the wrap-around) before fanning.
        loop_vertices.dedup();
        while loop_vertices.len() > 1 && loop_vertices.first() == loop_vertices.last() {
            loop_vertices.pop();
        }
        if loop_vertices.len() < 3 {
            continue;
        }

        // Orient the loop so triangle normals point from inside toward
        // outside, matching the trilinear gradient at the cell center.
        let mut gradient = SVector::<f64, 3>::zeros();
        for c in 0..8usize {
            for a in 0..3usize {
                if c & (1 << a) != 0 {
                    gradient[a] += values[c];
                } else {
                    gradient[a] -= values[c];
                }
            }
        }
        let centroid: SVector<f64, 3> = loop_vertices
            .iter()
            .map(|&i| pool.vertices[i])
            .sum::<SVector<f64, 3>>()
            / loop_vertices.len() as f64;
        let mut newell = SVector::<f64, 3>::zeros();
        for w in 0..loop_vertices.len() {
            let p = pool.vertices[loop_vertices[w]] - centroid;
            let q = pool.vertices[loop_vertices[(w + 1) % loop_vertices.len()]] - centroid;
            newell += p.cross(&q);
        }
        if newell.dot(&gradient) < 0.0 {
            loop_vertices.reverse();
        }

        // Only triangles with a repeated index are dropped: their boundary
        // edges cancel in pairs, so adjacent cells still match up edge for
        // edge and the mesh stays closed.
        let emit = |tri: [usize; 3], faces: &mut Vec<[usize; 3]>| {
            if tri[0] != tri[1] && tri[1] != tri[2] && tri[2] != tri[0] {
                faces.push(tri);
            }
        };
        if loop_vertices.len() == 3 {
            emit([loop_vertices[0], loop_vertices[1], loop_vertices[2]], faces);
        } else {
            // Fan around the loop centroid; safe for the non-convex loops
            // the diagonal cases produce.
            let est = source.field_estimate(&centroid, nearest_sensor(track, &centroid))?;
            let center = pool.push_free(centroid, est.variance);
            for w in 0..loop_vertices.len() {
                emit(
                    [center, loop_vertices[w], loop_vertices[(w + 1) % loop_vertices.len()]],
                    faces,
                );
            }
        }
    }
    Ok(())
}

/// Chains contour segments into polylines: open chains first (walked from
/// their lowest-indexed endpoint), then closed loops. Deterministic for a
/// given mesh.
pub fn chain_polylines(mesh: &Mesh<2>) -> Vec<Vec<usize>> {
    let mut incident: HashMap<usize, Vec<usize>> = HashMap::new();
    for (f, seg) in mesh.faces.iter().enumerate() {
        incident.entry(seg[0]).or_default().push(f);
        incident.entry(seg[1]).or_default().push(f);
    }
    let mut used = vec![false; mesh.faces.len()];
    let mut polylines = Vec::new();

    let walk = |start_vertex: usize, used: &mut Vec<bool>| -> Vec<usize> {
        let mut line = vec![start_vertex];
        let mut cur = start_vertex;
        loop {
            let Some(next_face) = incident
                .get(&cur)
                .and_then(|fs| fs.iter().find(|f| !used[**f]).copied())
            else {
                break;
            };
            used[next_face] = true;
            let seg = mesh.faces[next_face];
            cur = if seg[0] == cur { seg[1] } else { seg[0] };
            line.push(cur);
        }
        line
    };

    // Endpoints (odd incidence) seed open chains.
    let mut endpoints: Vec<usize> = incident
        .iter()
        .filter(|(_, fs)| fs.len() % 2 == 1)
        .map(|(v, _)| *v)
        .collect();
    endpoints.sort_unstable();
    for v in endpoints {
        if incident[&v].iter().any(|f| !used[*f]) {
            polylines.push(walk(v, &mut used));
        }
    }
    // Remaining segments form loops.
    for f in 0..mesh.faces.len() {
        if !used[f] {
            used[f] = true;
            let mut line = vec![mesh.faces[f][0], mesh.faces[f][1]];
            let rest = walk(mesh.faces[f][1], &mut used);
            line.extend(rest.into_iter().skip(1));
            polylines.push(line);
        }
    }
    polylines
}

/// Writes a 2D contour as CSV rows `polyline,x,y`, one vertex per row,
/// polylines chained and numbered.
pub fn save_contour_csv(path: &std::path::Path, mesh: &Mesh<2>) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "polyline,x,y")?;
    for (id, line) in chain_polylines(mesh).iter().enumerate() {
        for &v in line {
            writeln!(w, "{},{},{}", id, mesh.vertices[v].x, mesh.vertices[v].y)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a 3D mesh as PLY with per-vertex variance in the quality channel.
pub fn save_mesh_ply(path: &std::path::Path, mesh: &Mesh<3>, binary: bool) -> Result<()> {
    crate::ingestion::ply::save_ply_mesh(
        path,
        &mesh.vertices,
        &mesh.faces,
        Some(&mesh.vertex_variance),
        binary,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::Primitive;
    use nalgebra::{Vector2, Vector3};
    use std::collections::HashMap;

    fn circle_oracle(radius: f64) -> OracleField<2> {
        OracleField {
            scene: AnalyticScene::new(vec![Primitive::Sphere {
                center: Vector2::zeros(),
                radius,
            }])
            .unwrap(),
        }
    }

    fn sphere_oracle(radius: f64) -> OracleField<3> {
        OracleField {
            scene: AnalyticScene::new(vec![Primitive::Sphere {
                center: Vector3::zeros(),
                radius,
            }])
            .unwrap(),
        }
    }

    #[test]
    fn grid_indexing_round_trips_x_fastest() {
        let spec = GridSpec::new(Vector3::new(-1.0, -2.0, 0.5), 0.25, [4, 3, 2]).unwrap();
        assert_eq!(spec.node_count(), 24);
        assert_eq!(spec.linear([1, 0, 0]), 1);
        assert_eq!(spec.linear([0, 1, 0]), 4);
        assert_eq!(spec.linear([0, 0, 1]), 12);
        for l in 0..spec.node_count() {
            assert_eq!(spec.linear(spec.node(l)), l);
        }
        assert_eq!(
            spec.position([1, 2, 1]),
            Vector3::new(-0.75, -1.5, 0.75)
        );
        assert!(GridSpec::new(Vector2::zeros(), 0.0, [2, 2]).is_err());
        assert!(GridSpec::new(Vector2::zeros(), 0.1, [0, 2]).is_err());
    }

    #[test]
    fn square_cases_cover_single_corners_and_rows() {
        // All outside / all inside.
        assert!(square_segments([1.0, 1.0, 1.0, 1.0]).is_empty());
        assert!(square_segments([-1.0, -1.0, -1.0, -1.0]).is_empty());
        // One inside corner cuts its two adjacent edges.
        assert_eq!(square_segments([-1.0, 1.0, 1.0, 1.0]), vec![(3, 0)]);
        assert_eq!(square_segments([1.0, -1.0, 1.0, 1.0]), vec![(0, 1)]);
        assert_eq!(square_segments([1.0, 1.0, -1.0, 1.0]), vec![(1, 2)]);
        assert_eq!(square_segments([1.0, 1.0, 1.0, -1.0]), vec![(2, 3)]);
        // Rows and columns cut opposite edges.
        assert_eq!(square_segments([-1.0, -1.0, 1.0, 1.0]), vec![(3, 1)]);
        assert_eq!(square_segments([1.0, -1.0, -1.0, 1.0]), vec![(0, 2)]);
    }

    #[test]
    fn diagonal_cases_follow_the_saddle_sign() {
        // Corners 00 and 11 inside. Saddle value (s00 s11 - s10 s01)/denom:
        // with weak positives the saddle is inside and the insides connect.
        let connected = square_segments([-1.0, 0.1, -1.0, 0.1]);
        assert_eq!(connected, vec![(0, 1), (2, 3)]);
        // With strong positives the saddle is outside and they separate.
        let separated = square_segments([-0.1, 1.0, -0.1, 1.0]);
        assert_eq!(separated, vec![(3, 0), (1, 2)]);
        // The mirrored diagonal.
        let connected = square_segments([0.1, -1.0, 0.1, -1.0]);
        assert_eq!(connected, vec![(3, 0), (1, 2)]);
        let separated = square_segments([1.0, -0.1, 1.0, -0.1]);
        assert_eq!(separated, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn signed_grid_matches_analytic_inside_test() {
        let oracle = circle_oracle(1.0);
        let spec = GridSpec::new(Vector2::new(-2.0, -2.0), 0.1, [41, 41]).unwrap();
        let grid = sample_signed_grid(&oracle, &spec, &[]).unwrap();
        let mut checked = 0;
        let mut correct = 0;
        for l in 0..spec.node_count() {
            let p = spec.position(spec.node(l));
            let sd = p.norm() - 1.0;
            if sd.abs() < spec.cell_size {
                continue;
            }
            checked += 1;
            if (grid.signed_value(l) < 0.0) == (sd < 0.0) {
                correct += 1;
            }
        }
        assert!(checked > 1000);
        assert_eq!(correct, checked);

        // Determinism.
        let again = sample_signed_grid(&oracle, &spec, &[]).unwrap();
        assert_eq!(grid.signs, again.signs);
    }

    #[test]
    fn fully_positive_grids_give_empty_meshes() {
        let oracle = circle_oracle(1.0);
        let spec = GridSpec::new(Vector2::new(5.0, 5.0), 0.1, [8, 8]).unwrap();
        let grid = sample_signed_grid(&oracle, &spec, &[]).unwrap();
        assert!(grid.signs.iter().all(|s| *s == 1));
        let mesh = extract_iso_2d(&oracle, &spec, &[]).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn circle_contour_vertices_sit_on_the_circle() {
        let oracle = circle_oracle(1.0);
        let cell = 0.05;
        // Generic origin so no lattice node lands exactly on the circle.
        let spec = GridSpec::new(Vector2::new(-1.6071, -1.6093), cell, [65, 65]).unwrap();
        let mesh = extract_iso_2d(&oracle, &spec, &[]).unwrap();
        assert!(mesh.faces.len() > 50);
        for v in &mesh.vertices {
            assert!(
                (v.norm() - 1.0).abs() < 0.1 * cell,
                "vertex radius {} too far from 1",
                v.norm()
            );
        }
        // The contour closes: every vertex borders exactly two segments.
        let mut degree = HashMap::new();
        for seg in &mesh.faces {
            *degree.entry(seg[0]).or_insert(0usize) += 1;
            *degree.entry(seg[1]).or_insert(0usize) += 1;
        }
        assert!(degree.values().all(|d| *d == 2));
        let polylines = chain_polylines(&mesh);
        assert_eq!(polylines.len(), 1);
        let line = &polylines[0];
        assert_eq!(line.first(), line.last());
        assert_eq!(line.len() - 1, mesh.faces.len());
    }

    #[test]
    fn sphere_mesh_is_accurate_and_watertight() {
        let oracle = sphere_oracle(1.0);
        let cell = 0.1;
        let spec = GridSpec::new(Vector3::new(-1.55, -1.55, -1.55), cell, [32, 32, 32]).unwrap();
        let mesh = extract_iso_3d(&oracle, &spec, &[]).unwrap();
        assert!(mesh.faces.len() > 100);
        for v in &mesh.vertices {
            assert!(
                (v.norm() - 1.0).abs() < 0.1 * cell,
                "vertex radius {} too far from 1",
                v.norm()
            );
        }
        // Watertight: every undirected edge borders exactly two triangles.
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &mesh.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|c| *c == 2), "open or non-manifold edges");
        // Triangles are oriented outward (normal along position).
        let mut outward = 0usize;
        for f in &mesh.faces {
            let n = (mesh.vertices[f[1]] - mesh.vertices[f[0]])
                .cross(&(mesh.vertices[f[2]] - mesh.vertices[f[0]]));
            let c = (mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0;
            if n.dot(&c) > 0.0 {
                outward += 1;
            }
        }
        assert_eq!(outward, mesh.faces.len());
    }

    /// Field with a plateau of exact zeros around the surface, the shape a
    /// clamped latent produces: distance 0 inside the band, growing outside
    /// it, no gradient inside the band.
    struct BandedField<const D: usize> {
        center: SVector<f64, D>,
        radius: f64,
        band: f64,
    }

    impl<const D: usize> FieldSource<D> for BandedField<D> {
        fn field_estimate(
            &self,
            q: &SVector<f64, D>,
            _sensor: Option<&SVector<f64, D>>,
        ) -> Result<FieldEstimate<D>> {
            let delta = q - self.center;
            let sdf = delta.norm() - self.radius;
            let in_band = sdf.abs() <= self.band;
            let gradient = if in_band {
                None
            } else {
                delta.try_normalize(1e-12).map(|dir| dir * sdf.signum())
            };
            Ok(FieldEstimate {
                latent_mean: 0.0,
                distance: if in_band { 0.0 } else { sdf.abs() - self.band },
                gradient,
                variance: 0.0,
                sign: if sdf < 0.0 { Sign::Inside } else { Sign::Outside },
                clamped: in_band,
            })
        }
    }

    #[test]
    fn contours_stay_closed_across_exact_zero_plateaus() {
        let field = BandedField::<2> { center: Vector2::zeros(), radius: 1.0, band: 0.06 };
        let spec = GridSpec::new(Vector2::new(-1.6071, -1.6093), 0.05, [65, 65]).unwrap();

        let grid = sample_signed_grid(&field, &spec, &[]).unwrap();
        let zero_nodes =
            (0..spec.node_count()).filter(|&l| grid.signed_value(l) == 0.0).count();
        assert!(zero_nodes > 10, "the band should pin nodes to exactly zero, got {zero_nodes}");

        let mesh = extract_iso_2d(&field, &spec, &[]).unwrap();
        assert!(!mesh.faces.is_empty());
        // Welding leaves no two indices at the same position.
        let positions: std::collections::HashSet<[u64; 2]> = mesh
            .vertices
            .iter()
            .map(|v| [v.x.to_bits(), v.y.to_bits()])
            .collect();
        assert_eq!(positions.len(), mesh.vertices.len(), "duplicate vertex positions");
        // Closed: no vertex with an odd segment count.
        let mut degree = HashMap::new();
        for seg in &mesh.faces {
            *degree.entry(seg[0]).or_insert(0usize) += 1;
            *degree.entry(seg[1]).or_insert(0usize) += 1;
        }
        assert!(degree.values().all(|d| d % 2 == 0), "open chain endpoints");
        for line in chain_polylines(&mesh) {
            assert_eq!(line.first(), line.last(), "open polyline");
        }
    }

    #[test]
    fn meshes_stay_watertight_across_exact_zero_plateaus() {
        let field = BandedField::<3> { center: Vector3::zeros(), radius: 1.0, band: 0.06 };
        let spec = GridSpec::new(Vector3::new(-1.55, -1.55, -1.55), 0.1, [32, 32, 32]).unwrap();

        let grid = sample_signed_grid(&field, &spec, &[]).unwrap();
        let zero_nodes =
            (0..spec.node_count()).filter(|&l| grid.signed_value(l) == 0.0).count();
        assert!(zero_nodes > 100, "the band should pin nodes to exactly zero, got {zero_nodes}");

        let mesh = extract_iso_3d(&field, &spec, &[]).unwrap();
        assert!(mesh.faces.len() > 100);
        // Every undirected edge borders exactly two triangles, once in each
        // direction, so the surface is closed and consistently oriented.
        let mut edges: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for f in &mesh.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let slot = edges.entry((a.min(b), a.max(b))).or_insert((0, 0));
                if a < b {
                    slot.0 += 1;
                } else {
                    slot.1 += 1;
                }
            }
        }
        assert!(
            edges.values().all(|&(fwd, rev)| fwd == 1 && rev == 1),
            "open, non-manifold, or inconsistently wound edges"
        );
    }

    #[test]
    fn meshes_are_invariant_to_cell_traversal_order() {
        let oracle = sphere_oracle(0.8);
        let spec = GridSpec::new(Vector3::new(-1.3, -1.3, -1.3), 0.13, [21, 21, 21]).unwrap();
        let grid = sample_signed_grid(&oracle, &spec, &[]).unwrap();
        let forward = mesh_from_grid(&oracle, &[], &grid, false).unwrap();
        let backward = mesh_from_grid(&oracle, &[], &grid, true).unwrap();
        assert_eq!(forward.faces.len(), backward.faces.len());
        assert_eq!(forward.vertices.len(), backward.vertices.len());

        let canon = |mesh: &Mesh<3>| {
            let mut tris: Vec<[[u64; 3]; 3]> = mesh
                .faces
                .iter()
                .map(|f| {
                    let mut t: [[u64; 3]; 3] = std::array::from_fn(|k| {
                        let v = mesh.vertices[f[k]];
                        [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()]
                    });
                    // Rotate so the lexicographically smallest corner leads,
                    // preserving winding.
                    let lead = (0..3).min_by_key(|&k| t[k]).unwrap();
                    t.rotate_left(lead);
                    t
                })
                .collect();
            tris.sort_unstable();
            tris
        };
        assert_eq!(canon(&forward), canon(&backward));
    }

    #[test]
    fn newton_refinement_does_not_worsen_linear_placement() {
        // Bypass refinement by zeroing gradients through a wrapper oracle.
        struct NoGradient(OracleField<3>);
        impl FieldSource<3> for NoGradient {
            fn field_estimate(
                &self,
                q: &Vector3<f64>,
                s: Option<&Vector3<f64>>,
            ) -> Result<FieldEstimate<3>> {
                let mut est = self.0.field_estimate(q, s)?;
                est.gradient = None;
                Ok(est)
            }
        }

        let spec = GridSpec::new(Vector3::new(-1.33, -1.29, -1.31), 0.11, [25, 25, 25]).unwrap();
        let refined = extract_iso_3d(&sphere_oracle(1.0), &spec, &[]).unwrap();
        let linear = extract_iso_3d(&NoGradient(sphere_oracle(1.0)), &spec, &[]).unwrap();

        let median_error = |mesh: &Mesh<3>| {
            let mut errs: Vec<f64> = mesh.vertices.iter().map(|v| (v.norm() - 1.0).abs()).collect();
            errs.sort_unstable_by(f64::total_cmp);
            errs[errs.len() / 2]
        };
        assert!(median_error(&refined) <= median_error(&linear) + 1e-12);
        // One Newton step with the exact gradient cuts the linear placement
        // error by far more than the quadratic-convergence factor alone.
        assert!(median_error(&refined) < median_error(&linear) / 10.0);
        assert!(median_error(&refined) < 1e-4);
    }

    #[test]
    fn contours_write_csv_polylines() {
        let oracle = circle_oracle(0.5);
        let spec = GridSpec::new(Vector2::new(-0.9063, -0.9081), 0.05, [37, 37]).unwrap();
        let mesh = extract_iso_2d(&oracle, &spec, &[]).unwrap();
        let polylines = chain_polylines(&mesh);
        assert_eq!(polylines.len(), 1);
        let dir = std::env::temp_dir().join("loggpis-surface-csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("contour.csv");
        save_contour_csv(&path, &mesh).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("polyline,x,y"));
        assert_eq!(lines.count(), polylines[0].len());
        std::fs::remove_dir_all(&dir).ok();
    }
}
