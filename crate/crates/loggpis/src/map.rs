//! Incremental world model: a spatial tree of local GP clusters over a
//! fixed arena, Bayesian fusion of repeated surface observations,
//! dirty-cluster refitting, and query routing with prediction blending.
//!
//! The tree is a quadtree (D = 2) or octree (D = 3) whose leaves own
//! disjoint sets of surface points. Each leaf fits a local GP on its
//! support set: its own points plus every point inside the leaf box
//! inflated by `support_margin`. Insertions mark every leaf whose support
//! could contain the new point dirty; [`ClusterMap::refit_dirty`] then
//! refits those leaves (in parallel) before the next queries.
//!
//! A query blends the latent predictions of all clusters whose inflated box
//! contains the query point, weighting each by inverse latent variance
//! (a product of experts), and applies the distance transforms once to the
//! blended latent. Far from every cluster the nearest leaf (by stored-point
//! distance) answers alone, which keeps the field continuous across the
//! boundary where candidate sets change.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::SVector;
use rayon::prelude::*;

use crate::covariance::{KernelFamily, KernelParams};
use crate::error::{Error, Result};
use crate::field::{
    recover_sign, to_distance_with_floor, to_gradient, to_variance_with_floor, FieldEstimate,
    Sign, DEFAULT_LATENT_FLOOR, SIGN_DEAD_ZONE,
};
use crate::gp::{fit, GpModel, TrainingBlock};

/// Latent variances below this floor count as exact in the blending
/// weights, which avoids dividing by a clamped zero.
const BLEND_VAR_FLOOR: f64 = 1e-12;

/// One fused surface observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePoint<const D: usize> {
    pub position: SVector<f64, D>,
    /// Unit outward normal.
    pub normal: SVector<f64, D>,
    /// Position std in meters, > 0.
    pub pos_noise: f64,
    /// Number of raw observations fused into this point.
    pub obs_count: u32,
}

impl<const D: usize> SurfacePoint<D> {
    /// A fresh single observation. The normal is renormalized; degenerate
    /// normals and non-positive noise are rejected.
    pub fn new(position: SVector<f64, D>, normal: SVector<f64, D>, pos_noise: f64) -> Result<Self> {
        Self::with_count(position, normal, pos_noise, 1)
    }

    pub fn with_count(
        position: SVector<f64, D>,
        normal: SVector<f64, D>,
        pos_noise: f64,
        obs_count: u32,
    ) -> Result<Self> {
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("surface point position must be finite"));
        }
        let norm = normal.norm();
        if !norm.is_finite() || norm < 1e-9 {
            return Err(Error::invalid("surface point normal is degenerate"));
        }
        if !(pos_noise.is_finite() && pos_noise > 0.0) {
            return Err(Error::invalid("surface point pos_noise must be > 0"));
        }
        if obs_count == 0 {
            return Err(Error::invalid("surface point obs_count must be >= 1"));
        }
        Ok(SurfacePoint {
            position,
            normal: normal / norm,
            pos_noise,
            obs_count,
        })
    }
}

/// Which field the map regresses: the log-transformed distance field or a
/// standard GPIS baseline that regresses signed distance directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    LogGpis,
    Gpis,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::LogGpis => "loggpis",
            Method::Gpis => "gpis",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loggpis" => Ok(Method::LogGpis),
            "gpis" => Ok(Method::Gpis),
            other => Err(Error::invalid(format!(
                "unknown method '{other}' (expected 'loggpis' or 'gpis')"
            ))),
        }
    }
}

/// Map construction parameters. Arena bounds are fixed for the life of the
/// map.
#[derive(Clone, Debug)]
pub struct MapConfig<const D: usize> {
    pub arena_min: SVector<f64, D>,
    pub arena_max: SVector<f64, D>,
    pub params: KernelParams,
    pub method: Method,
    /// Points per leaf before it splits.
    pub leaf_capacity: usize,
    /// How far beyond its box a leaf's training support reaches, in meters.
    pub support_margin: f64,
    /// Incoming points within this distance of a stored point fuse with it;
    /// zero disables fusion.
    pub fuse_radius: f64,
    /// Latent-mean floor for the distance transform; caps representable
    /// distance at `-ln(floor)/lambda`.
    pub latent_floor: f64,
    /// Tree depth limit; leaves at this depth may exceed capacity.
    pub max_depth: usize,
    /// Fusion is rejected when stored and incoming normals differ by more
    /// than this angle.
    pub normal_fuse_max_angle_deg: f64,
    /// Feed normal-derived gradient targets to the cluster fits (Matérn 3/2
    /// only). On for the GPIS baseline, whose signed-distance latent is
    /// smooth across the surface. Off by default for the log transform: its
    /// latent has a ridge on the surface, and one-sided gradient targets
    /// drive the posterior mean negative outside the data, which saturates
    /// the recovered distance there.
    pub gradient_observations: bool,
}

impl<const D: usize> MapConfig<D> {
    /// Defaults sized for handheld-scale scenes: capacity 40, support three
    /// length scales, fusion radius 1.5 times a 0.01 m sensor noise.
    pub fn new(
        arena_min: SVector<f64, D>,
        arena_max: SVector<f64, D>,
        params: KernelParams,
        method: Method,
    ) -> Result<Self> {
        let config = MapConfig {
            arena_min,
            arena_max,
            support_margin: 3.0 / params.lambda,
            params,
            method,
            leaf_capacity: 40,
            fuse_radius: 0.015,
            latent_floor: DEFAULT_LATENT_FLOOR,
            max_depth: 12,
            normal_fuse_max_angle_deg: 60.0,
            gradient_observations: method == Method::Gpis,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for a in 0..D {
            if !(self.arena_min[a] < self.arena_max[a]) {
                return Err(Error::invalid(format!(
                    "arena is empty on axis {a}: [{}, {}]",
                    self.arena_min[a], self.arena_max[a]
                )));
            }
        }
        if self.leaf_capacity == 0 {
            return Err(Error::invalid("leaf_capacity must be >= 1"));
        }
        if !(self.support_margin > 0.0 && self.support_margin.is_finite()) {
            return Err(Error::invalid("support_margin must be positive"));
        }
        if !(self.fuse_radius >= 0.0 && self.fuse_radius.is_finite()) {
            return Err(Error::invalid("fuse_radius must be >= 0"));
        }
        if !(self.latent_floor > 0.0 && self.latent_floor < 1.0) {
            return Err(Error::invalid("latent_floor must lie in (0, 1)"));
        }
        if !(self.normal_fuse_max_angle_deg > 0.0 && self.normal_fuse_max_angle_deg <= 180.0) {
            return Err(Error::invalid("normal_fuse_max_angle_deg must lie in (0, 180]"));
        }
        Ok(())
    }
}

/// Outcome counts of one [`ClusterMap::insert_points`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InsertStats {
    pub inserted: usize,
    pub fused: usize,
    /// Points outside the arena, dropped.
    pub rejected: usize,
}

/// Outcome counts of one [`ClusterMap::refit_dirty`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RefitStats {
    pub refit: usize,
    pub unusable: usize,
}

/// Aggregate map state for diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MapHealth {
    pub leaves: usize,
    pub points: usize,
    pub dirty_leaves: usize,
    /// Leaves whose last fit failed; they answer no queries.
    pub unusable_leaves: usize,
    pub fitted_models: usize,
    pub deepest_leaf: usize,
}

#[derive(Clone, Debug)]
struct LeafData<const D: usize> {
    points: Vec<SurfacePoint<D>>,
    model: Option<GpModel<D>>,
    dirty: bool,
    usable: bool,
}

impl<const D: usize> LeafData<D> {
    fn empty() -> Self {
        LeafData {
            points: Vec::new(),
            model: None,
            dirty: false,
            usable: true,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<const D: usize> {
    center: SVector<f64, D>,
    half: SVector<f64, D>,
    depth: usize,
    /// Child node ids; empty for leaves.
    children: Vec<usize>,
    /// Present exactly on leaves.
    leaf: Option<LeafData<D>>,
}

impl<const D: usize> Node<D> {
    /// Distance from `x` to this node's box, zero inside.
    fn box_dist(&self, x: &SVector<f64, D>) -> f64 {
        let mut sq = 0.0;
        for a in 0..D {
            let d = (x[a] - self.center[a]).abs() - self.half[a];
            if d > 0.0 {
                sq += d * d;
            }
        }
        sq.sqrt()
    }

    /// Which child box `x` falls into, by per-axis comparison against the
    /// center. Routing always uses this test so membership never depends on
    /// recomputed box corners.
    fn child_slot(&self, x: &SVector<f64, D>) -> usize {
        let mut slot = 0;
        for a in 0..D {
            if x[a] >= self.center[a] {
                slot |= 1 << a;
            }
        }
        slot
    }
}

enum InsertFate {
    Inserted,
    Fused,
    Rejected,
}

/// Fuse two observations of the same surface patch: inverse-variance
/// weighted position, renormalized weighted normal, summed observation
/// count. Returns `None` when the normals differ by more than
/// `max_angle_deg`, in which case the caller keeps both points.
pub fn fuse_point<const D: usize>(
    existing: &SurfacePoint<D>,
    incoming: &SurfacePoint<D>,
    max_angle_deg: f64,
) -> Option<SurfacePoint<D>> {
    let cos_limit = max_angle_deg.to_radians().cos();
    if existing.normal.dot(&incoming.normal) < cos_limit {
        return None;
    }
    let w1 = weight_of(existing.pos_noise);
    let w2 = weight_of(incoming.pos_noise);
    if w1 + w2 <= 0.0 {
        return None;
    }
    let position = (existing.position * w1 + incoming.position * w2) / (w1 + w2);
    let normal = existing.normal * w1 + incoming.normal * w2;
    let norm = normal.norm();
    if norm < 1e-9 {
        return None;
    }
    Some(SurfacePoint {
        position,
        normal: normal / norm,
        pos_noise: (1.0 / (w1 + w2)).sqrt(),
        obs_count: existing.obs_count.saturating_add(incoming.obs_count),
    })
}

fn weight_of(noise: f64) -> f64 {
    if noise.is_finite() && noise > 0.0 {
        1.0 / (noise * noise)
    } else {
        0.0
    }
}

/// The incremental map. See the module docs for the data layout.
#[derive(Clone, Debug)]
pub struct ClusterMap<const D: usize> {
    config: MapConfig<D>,
    nodes: Vec<Node<D>>,
}

impl<const D: usize> ClusterMap<D> {
    pub fn new(config: MapConfig<D>) -> Result<Self> {
        config.validate()?;
        let root = Node {
            center: (config.arena_min + config.arena_max) * 0.5,
            half: (config.arena_max - config.arena_min) * 0.5,
            depth: 0,
            children: Vec::new(),
            leaf: Some(LeafData::empty()),
        };
        Ok(ClusterMap {
            config,
            nodes: vec![root],
        })
    }

    pub fn config(&self) -> &MapConfig<D> {
        &self.config
    }

    fn in_arena(&self, x: &SVector<f64, D>) -> bool {
        (0..D).all(|a| x[a] >= self.config.arena_min[a] && x[a] <= self.config.arena_max[a])
    }

    fn locate_leaf(&self, x: &SVector<f64, D>) -> usize {
        let mut id = 0;
        while !self.nodes[id].children.is_empty() {
            let slot = self.nodes[id].child_slot(x);
            id = self.nodes[id].children[slot];
        }
        id
    }

    /// Insert a batch, fusing with stored points where possible.
    pub fn insert_points(&mut self, points: &[SurfacePoint<D>]) -> InsertStats {
        let mut stats = InsertStats::default();
        for p in points {
            match self.insert_one(p.clone(), true) {
                InsertFate::Inserted => stats.inserted += 1,
                InsertFate::Fused => stats.fused += 1,
                InsertFate::Rejected => stats.rejected += 1,
            }
        }
        if stats.rejected > 0 {
            log::warn!("{} points fell outside the arena and were dropped", stats.rejected);
        }
        stats
    }

    fn insert_one(&mut self, point: SurfacePoint<D>, fuse: bool) -> InsertFate {
        if !self.in_arena(&point.position) {
            return InsertFate::Rejected;
        }
        let leaf_id = self.locate_leaf(&point.position);
        if fuse && self.config.fuse_radius > 0.0 {
            if let Some(slot) = self.fusion_partner(leaf_id, &point.position) {
                let existing = &self.nodes[leaf_id].leaf.as_ref().expect("leaf").points[slot];
                if let Some(fused) =
                    fuse_point(existing, &point, self.config.normal_fuse_max_angle_deg)
                {
                    let old_pos = existing.position;
                    let new_pos = fused.position;
                    let home = self.locate_leaf(&new_pos);
                    let leaf = self.nodes[leaf_id].leaf.as_mut().expect("leaf");
                    if home == leaf_id {
                        leaf.points[slot] = fused;
                    } else {
                        // The fused position drifted across the leaf border;
                        // move the point to the leaf that owns it.
                        leaf.points.remove(slot);
                        self.place(home, fused);
                    }
                    self.mark_support_dirty(&old_pos);
                    self.mark_support_dirty(&new_pos);
                    return InsertFate::Fused;
                }
            }
        }
        self.place(leaf_id, point);
        InsertFate::Inserted
    }

    /// Closest stored point within the fusion radius, if any.
    fn fusion_partner(&self, leaf_id: usize, pos: &SVector<f64, D>) -> Option<usize> {
        let leaf = self.nodes[leaf_id].leaf.as_ref().expect("leaf");
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in leaf.points.iter().enumerate() {
            let d = (p.position - pos).norm();
            if d <= self.config.fuse_radius && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| i)
    }

    /// Append a point to a leaf, splitting while over capacity.
    fn place(&mut self, leaf_id: usize, point: SurfacePoint<D>) {
        let pos = point.position;
        {
            let leaf = self.nodes[leaf_id].leaf.as_mut().expect("leaf");
            leaf.points.push(point);
        }
        self.mark_support_dirty(&pos);
        let mut id = leaf_id;
        loop {
            let node = &self.nodes[id];
            let leaf = node.leaf.as_ref().expect("leaf");
            if leaf.points.len() <= self.config.leaf_capacity || node.depth >= self.config.max_depth
            {
                break;
            }
            self.split(id);
            id = self.nodes[id].children[self.nodes[id].child_slot(&pos)];
        }
    }

    fn split(&mut self, id: usize) {
        let leaf = self.nodes[id].leaf.take().expect("split target is a leaf");
        let center = self.nodes[id].center;
        let half = self.nodes[id].half;
        let depth = self.nodes[id].depth;
        let first_child = self.nodes.len();
        for slot in 0..(1usize << D) {
            let mut c = center;
            for a in 0..D {
                let off = half[a] * 0.5;
                c[a] += if slot & (1 << a) != 0 { off } else { -off };
            }
            self.nodes.push(Node {
                center: c,
                half: half * 0.5,
                depth: depth + 1,
                children: Vec::new(),
                leaf: Some(LeafData {
                    points: Vec::new(),
                    model: None,
                    dirty: leaf.dirty,
                    usable: true,
                }),
            });
        }
        self.nodes[id].children = (first_child..first_child + (1 << D)).collect();
        for p in leaf.points {
            let slot = self.nodes[id].child_slot(&p.position);
            let child = self.nodes[id].children[slot];
            self.nodes[child]
                .leaf
                .as_mut()
                .expect("fresh child")
                .points
                .push(p);
        }
    }

    /// Mark every leaf whose support region reaches `pos` dirty.
    fn mark_support_dirty(&mut self, pos: &SVector<f64, D>) {
        let margin = self.config.support_margin;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if self.nodes[id].box_dist(pos) > margin {
                continue;
            }
            if self.nodes[id].children.is_empty() {
                self.nodes[id].leaf.as_mut().expect("leaf").dirty = true;
            } else {
                stack.extend_from_slice(&self.nodes[id].children);
            }
        }
    }

    fn leaf_ids(&self) -> Vec<usize> {
        // Preorder traversal so ids are stable for a given tree shape.
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if self.nodes[id].children.is_empty() {
                out.push(id);
            } else {
                for &c in self.nodes[id].children.iter().rev() {
                    stack.push(c);
                }
            }
        }
        out
    }

    /// All stored points in traversal order.
    pub fn points(&self) -> Vec<SurfacePoint<D>> {
        let mut out = Vec::new();
        for id in self.leaf_ids() {
            out.extend(self.nodes[id].leaf.as_ref().expect("leaf").points.iter().cloned());
        }
        out
    }

    /// Support set of a leaf: every stored point within the leaf box
    /// inflated by `support_margin`, in a canonical order so refits are
    /// reproducible regardless of insertion history.
    fn collect_support(&self, leaf_id: usize) -> Vec<SurfacePoint<D>> {
        let target = &self.nodes[leaf_id];
        let margin = self.config.support_margin;
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            // Overlap test between the inflated target box and this box.
            let overlaps = (0..D).all(|a| {
                (node.center[a] - target.center[a]).abs()
                    <= node.half[a] + target.half[a] + margin
            });
            if !overlaps {
                continue;
            }
            if node.children.is_empty() {
                for p in &node.leaf.as_ref().expect("leaf").points {
                    let inside = (0..D)
                        .all(|a| (p.position[a] - target.center[a]).abs() <= target.half[a] + margin);
                    if inside {
                        out.push(p.clone());
                    }
                }
            } else {
                stack.extend_from_slice(&node.children);
            }
        }
        canonical_sort(&mut out);
        out
    }

    /// Refit every dirty leaf on its current support set. Fits run in
    /// parallel; results apply in a fixed leaf order so the outcome does not
    /// depend on thread scheduling. A leaf whose fit fails is flagged
    /// unusable and excluded from queries until new data arrives.
    pub fn refit_dirty(&mut self) -> RefitStats {
        let dirty: Vec<usize> = self
            .leaf_ids()
            .into_iter()
            .filter(|&id| self.nodes[id].leaf.as_ref().expect("leaf").dirty)
            .collect();
        let jobs: Vec<(usize, Vec<SurfacePoint<D>>)> = dirty
            .iter()
            .map(|&id| (id, self.collect_support(id)))
            .collect();
        let config = &self.config;
        let results: Vec<(usize, Option<Result<GpModel<D>>>)> = jobs
            .into_par_iter()
            .map(|(id, support)| {
                if support.is_empty() {
                    (id, None)
                } else {
                    let block = training_block(&support, config);
                    (id, Some(block.and_then(|b| fit(b, config.params))))
                }
            })
            .collect();

        let mut stats = RefitStats::default();
        for (id, outcome) in results {
            let leaf = self.nodes[id].leaf.as_mut().expect("leaf");
            leaf.dirty = false;
            match outcome {
                None => {
                    leaf.model = None;
                    leaf.usable = true;
                }
                Some(Ok(model)) => {
                    leaf.model = Some(model);
                    leaf.usable = true;
                    stats.refit += 1;
                }
                Some(Err(err)) => {
                    log::warn!("cluster refit failed for leaf {id}: {err}");
                    leaf.model = None;
                    leaf.usable = false;
                    stats.unusable += 1;
                }
            }
        }
        stats
    }

    /// Field estimate at one query point. Candidate clusters are the leaves
    /// whose inflated box contains the query, plus always the leaf with the
    /// closest stored point. The sign is attached when a sensor position is
    /// given (the GPIS baseline signs from its latent mean instead and
    /// needs no sensor).
    pub fn query(
        &self,
        x: &SVector<f64, D>,
        sensor_pos: Option<&SVector<f64, D>>,
    ) -> Result<FieldEstimate<D>> {
        let mut candidates = Vec::new();
        let margin = self.config.support_margin;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.box_dist(x) > margin {
                continue;
            }
            if node.children.is_empty() {
                let leaf = node.leaf.as_ref().expect("leaf");
                if leaf.model.is_some() {
                    candidates.push(id);
                }
            } else {
                for &c in node.children.iter().rev() {
                    stack.push(c);
                }
            }
        }
        // The box walk alone can come back with only a cluster whose cell
        // happens to contain the query while its points sit far away
        // (coarse cells cover empty space). Guaranteeing the nearest fitted
        // cluster keeps the estimate anchored to the closest data: the
        // blend runs in latent space, where a far cluster's contribution
        // decays exponentially, so the union acts as a soft minimum over
        // cluster distances.
        match self.nearest_model_leaf(x) {
            Some(id) => {
                if !candidates.contains(&id) {
                    candidates.push(id);
                }
            }
            None => return Err(Error::EmptyMap),
        }

        let mut w_sum = 0.0;
        let mut mean = 0.0;
        let mut grad = SVector::<f64, D>::zeros();
        for &id in &candidates {
            let model = self.nodes[id]
                .leaf
                .as_ref()
                .expect("leaf")
                .model
                .as_ref()
                .expect("candidate has a model");
            let pred = model.predict(x);
            let w = 1.0 / pred.var.max(BLEND_VAR_FLOOR);
            w_sum += w;
            mean += w * pred.mean;
            grad += pred.grad * w;
        }
        mean /= w_sum;
        grad /= w_sum;
        let var = 1.0 / w_sum;

        Ok(self.transform(x, mean, &grad, var, sensor_pos))
    }

    fn transform(
        &self,
        x: &SVector<f64, D>,
        latent_mean: f64,
        latent_grad: &SVector<f64, D>,
        latent_var: f64,
        sensor_pos: Option<&SVector<f64, D>>,
    ) -> FieldEstimate<D> {
        let lambda = self.config.params.lambda;
        match self.config.method {
            Method::LogGpis => {
                let floor = self.config.latent_floor;
                let (distance, clamped) = to_distance_with_floor(latent_mean, lambda, floor);
                let gradient = to_gradient(latent_grad);
                let variance = to_variance_with_floor(latent_mean, latent_var, lambda, floor);
                let sign = match (&gradient, sensor_pos) {
                    (Some(g), Some(s)) => recover_sign(x, g, s),
                    _ => Sign::Unknown,
                };
                FieldEstimate {
                    latent_mean,
                    distance,
                    gradient,
                    variance,
                    sign,
                    clamped,
                }
            }
            Method::Gpis => {
                // The latent is the signed distance itself: magnitude,
                // outward direction, and side all read off the latent mean.
                let sign = if latent_mean > SIGN_DEAD_ZONE {
                    Sign::Outside
                } else if latent_mean < -SIGN_DEAD_ZONE {
                    Sign::Inside
                } else {
                    Sign::Unknown
                };
                let side = if latent_mean < 0.0 { -1.0 } else { 1.0 };
                let norm = latent_grad.norm();
                let gradient = if norm > crate::field::GRADIENT_EPS && norm.is_finite() {
                    Some(latent_grad * (side / norm))
                } else {
                    None
                };
                FieldEstimate {
                    latent_mean,
                    distance: latent_mean.abs(),
                    gradient,
                    variance: latent_var.max(0.0),
                    sign,
                    clamped: false,
                }
            }
        }
    }

    /// Elementwise [`ClusterMap::query`] over a batch, in parallel. Results
    /// keep the input order.
    pub fn query_batch(
        &self,
        xs: &[SVector<f64, D>],
        sensor_pos: Option<&SVector<f64, D>>,
    ) -> Result<Vec<FieldEstimate<D>>> {
        xs.par_iter().map(|x| self.query(x, sensor_pos)).collect()
    }

    /// Best-first search for the fitted leaf with the closest stored point.
    fn nearest_model_leaf(&self, x: &SVector<f64, D>) -> Option<usize> {
        #[derive(PartialEq)]
        struct Entry(f64, usize);
        impl Eq for Entry {}
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
            }
        }

        let mut best: Option<(f64, usize)> = None;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse(Entry(self.nodes[0].box_dist(x), 0)));
        while let Some(Reverse(Entry(bound, id))) = heap.pop() {
            if best.map_or(false, |(bd, _)| bound >= bd) {
                break;
            }
            let node = &self.nodes[id];
            if node.children.is_empty() {
                let leaf = node.leaf.as_ref().expect("leaf");
                if leaf.model.is_none() {
                    continue;
                }
                for p in &leaf.points {
                    let d = (p.position - x).norm();
                    if best.map_or(true, |(bd, bid)| d < bd || (d == bd && id < bid)) {
                        best = Some((d, id));
                    }
                }
            } else {
                for &c in &node.children {
                    heap.push(Reverse(Entry(self.nodes[c].box_dist(x), c)));
                }
            }
        }
        best.map(|(_, id)| id)
    }

    pub fn health(&self) -> MapHealth {
        let mut health = MapHealth::default();
        for id in self.leaf_ids() {
            let node = &self.nodes[id];
            let leaf = node.leaf.as_ref().expect("leaf");
            health.leaves += 1;
            health.points += leaf.points.len();
            health.dirty_leaves += leaf.dirty as usize;
            health.unusable_leaves += !leaf.usable as usize;
            health.fitted_models += leaf.model.is_some() as usize;
            health.deepest_leaf = health.deepest_leaf.max(node.depth);
        }
        health
    }

    /// Rebuild from the stored points alone: fresh tree, no fusion (the
    /// points are already fused), full refit. Query outputs match the
    /// original map up to refit reproducibility.
    pub fn rebuild(&self) -> Result<ClusterMap<D>> {
        let mut map = ClusterMap::new(self.config.clone())?;
        for p in self.points() {
            map.insert_one(p, false);
        }
        map.refit_dirty();
        Ok(map)
    }

    /// Write the map as a text header plus one record per stored point.
    /// Models are refit on load, not serialized. Floats use the shortest
    /// round-trip decimal form, so save/load/save is byte-stable.
    pub fn save<W: Write>(&self, mut w: W) -> io::Result<()> {
        let c = &self.config;
        writeln!(w, "loggpis-map 1")?;
        writeln!(w, "dim {D}")?;
        writeln!(w, "method {}", c.method)?;
        writeln!(w, "family {}", c.params.family)?;
        writeln!(w, "lambda {}", c.params.lambda)?;
        writeln!(w, "sigma2 {}", c.params.sigma2)?;
        writeln!(w, "noise_y {}", c.params.noise_y)?;
        writeln!(w, "noise_grad {}", c.params.noise_grad)?;
        writeln!(w, "arena_min {}", join_coords(&c.arena_min))?;
        writeln!(w, "arena_max {}", join_coords(&c.arena_max))?;
        writeln!(w, "leaf_capacity {}", c.leaf_capacity)?;
        writeln!(w, "support_margin {}", c.support_margin)?;
        writeln!(w, "fuse_radius {}", c.fuse_radius)?;
        writeln!(w, "latent_floor {}", c.latent_floor)?;
        writeln!(w, "max_depth {}", c.max_depth)?;
        writeln!(w, "normal_fuse_max_angle_deg {}", c.normal_fuse_max_angle_deg)?;
        writeln!(w, "gradient_observations {}", c.gradient_observations)?;
        let points = self.points();
        writeln!(w, "points {}", points.len())?;
        for p in &points {
            writeln!(
                w,
                "{} {} {} {}",
                join_coords(&p.position),
                join_coords(&p.normal),
                p.pos_noise,
                p.obs_count
            )?;
        }
        Ok(())
    }

    pub fn save_to_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut buf = io::BufWriter::new(file);
        self.save(&mut buf)?;
        buf.flush()?;
        Ok(())
    }

    /// Read a map written by [`ClusterMap::save`]. Points are inserted
    /// without fusion (they are already fused) and every cluster is refit.
    pub fn load<R: BufRead>(reader: R, path: &str) -> Result<ClusterMap<D>> {
        let mut lines = Vec::new();
        for line in reader.lines() {
            lines.push(line?);
        }
        let mut cursor = HeaderCursor { path, lines: &lines, next: 0 };

        let magic = cursor.line()?;
        if magic.trim() != "loggpis-map 1" {
            return Err(cursor.err_at(1, "expected 'loggpis-map 1' header"));
        }
        let dim: usize = cursor.field("dim")?;
        if dim != D {
            return Err(cursor.err_at(2, format!("map is {dim}-dimensional, expected {D}")));
        }
        let method: Method = cursor.field("method")?;
        let family: KernelFamily = cursor.field("family")?;
        let lambda: f64 = cursor.field("lambda")?;
        let sigma2: f64 = cursor.field("sigma2")?;
        let noise_y: f64 = cursor.field("noise_y")?;
        let noise_grad: f64 = cursor.field("noise_grad")?;
        let arena_min = cursor.coords("arena_min")?;
        let arena_max = cursor.coords("arena_max")?;
        let leaf_capacity: usize = cursor.field("leaf_capacity")?;
        let support_margin: f64 = cursor.field("support_margin")?;
        let fuse_radius: f64 = cursor.field("fuse_radius")?;
        let latent_floor: f64 = cursor.field("latent_floor")?;
        let max_depth: usize = cursor.field("max_depth")?;
        let normal_fuse_max_angle_deg: f64 = cursor.field("normal_fuse_max_angle_deg")?;
        let gradient_observations: bool = cursor.field("gradient_observations")?;
        let n_points: usize = cursor.field("points")?;

        let config = MapConfig {
            arena_min,
            arena_max,
            params: KernelParams {
                lambda,
                family,
                sigma2,
                noise_y,
                noise_grad,
            },
            method,
            leaf_capacity,
            support_margin,
            fuse_radius,
            latent_floor,
            max_depth,
            normal_fuse_max_angle_deg,
            gradient_observations,
        };
        let mut map = ClusterMap::new(config)?;

        for _ in 0..n_points {
            let lineno = cursor.next + 1;
            let line = cursor.line()?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 * D + 2 {
                return Err(cursor.err_at(
                    lineno,
                    format!("expected {} fields per point, got {}", 2 * D + 2, fields.len()),
                ));
            }
            let mut vals = [0.0f64; 16];
            for (i, f) in fields[..2 * D + 1].iter().enumerate() {
                vals[i] = f
                    .parse()
                    .map_err(|_| cursor.err_at(lineno, format!("bad float '{f}'")))?;
            }
            let obs_count: u32 = fields[2 * D + 1]
                .parse()
                .map_err(|_| cursor.err_at(lineno, format!("bad count '{}'", fields[2 * D + 1])))?;
            let position = SVector::<f64, D>::from_fn(|a, _| vals[a]);
            let normal = SVector::<f64, D>::from_fn(|a, _| vals[D + a]);
            let point = SurfacePoint::with_count(position, normal, vals[2 * D], obs_count)
                .map_err(|e| cursor.err_at(lineno, e.to_string()))?;
            if matches!(map.insert_one(point, false), InsertFate::Rejected) {
                return Err(cursor.err_at(lineno, "point lies outside the stored arena"));
            }
        }
        map.refit_dirty();
        Ok(map)
    }

    pub fn load_from_path<P: AsRef<Path>>(path: P) -> Result<ClusterMap<D>> {
        let display = path.as_ref().display().to_string();
        let file = std::fs::File::open(path)?;
        ClusterMap::load(io::BufReader::new(file), &display)
    }
}

/// Training targets by method. The latent of the log transform is 1 on the
/// surface and decays along the outward normal at rate `lambda`, so its
/// gradient target (when enabled) is `-lambda n`. The GPIS baseline
/// regresses signed distance: value 0 on the surface, gradient equal to the
/// outward normal. Position noise enters the value noise scaled by the
/// on-surface latent slope (`lambda` for the log transform, 1 for signed
/// distance). The Whittle kernel takes no gradient observations, so those
/// targets drop regardless of the config flag.
fn training_block<const D: usize>(
    support: &[SurfacePoint<D>],
    config: &MapConfig<D>,
) -> Result<TrainingBlock<D>> {
    let params = &config.params;
    let with_grads = config.gradient_observations && params.family == KernelFamily::Matern32;
    let n = support.len();
    let mut positions = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut grads = if with_grads { Some(Vec::with_capacity(n)) } else { None };
    for p in support {
        positions.push(p.position);
        let (value, grad, slope) = match config.method {
            Method::LogGpis => (1.0, -params.lambda * p.normal, params.lambda),
            Method::Gpis => (0.0, p.normal, 1.0),
        };
        values.push(value);
        noise.push((params.noise_y.powi(2) + (slope * p.pos_noise).powi(2)).sqrt());
        if let Some(g) = grads.as_mut() {
            g.push(grad);
        }
    }
    TrainingBlock::new(positions, values, grads, noise)
}

fn canonical_sort<const D: usize>(points: &mut [SurfacePoint<D>]) {
    points.sort_by(|a, b| {
        for i in 0..D {
            match a.position[i].total_cmp(&b.position[i]) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        for i in 0..D {
            match a.normal[i].total_cmp(&b.normal[i]) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        a.pos_noise.total_cmp(&b.pos_noise)
    });
}

fn join_coords<const D: usize>(v: &SVector<f64, D>) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

struct HeaderCursor<'a> {
    path: &'a str,
    lines: &'a [String],
    next: usize,
}

impl<'a> HeaderCursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let line = self
            .lines
            .get(self.next)
            .ok_or_else(|| self.err_at(self.next + 1, "unexpected end of file"))?;
        self.next += 1;
        Ok(line)
    }

    fn raw_field(&mut self, key: &str) -> Result<&'a str> {
        let lineno = self.next + 1;
        let line = self.line()?;
        let mut parts = line.splitn(2, ' ');
        let found = parts.next().unwrap_or("");
        if found != key {
            return Err(self.err_at(lineno, format!("expected '{key}', found '{found}'")));
        }
        parts
            .next()
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| self.err_at(lineno, format!("'{key}' has no value")))
    }

    fn field<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let lineno = self.next + 1;
        let raw = self.raw_field(key)?;
        raw.parse()
            .map_err(|_| self.err_at(lineno, format!("bad value '{raw}' for '{key}'")))
    }

    fn coords<const D: usize>(&mut self, key: &str) -> Result<SVector<f64, D>> {
        let lineno = self.next + 1;
        let raw = self.raw_field(key)?;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.len() != D {
            return Err(self.err_at(lineno, format!("'{key}' needs {D} coordinates")));
        }
        let mut v = SVector::<f64, D>::zeros();
        for (a, p) in parts.iter().enumerate() {
            v[a] = p
                .parse()
                .map_err(|_| self.err_at(lineno, format!("bad coordinate '{p}' in '{key}'")))?;
        }
        Ok(v)
    }

    fn err_at(&self, lineno: usize, msg: impl Into<String>) -> Error {
        Error::parse(Path::new(self.path), lineno, msg)
    }
}
