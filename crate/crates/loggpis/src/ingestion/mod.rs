//! Sensor-data ingestion: simulation of 2D lidar scans and depth images
//! against analytic scenes, conversion of frames into surface points with
//! estimated normals, and the file formats for poses and frames.
//!
//! All simulation is seeded and draws one noise sample per beam or pixel
//! whether or not it hits, so a frame's random stream never depends on the
//! scene content. Normals are estimated from local geometry (a polyline
//! through neighboring beams in 2D, a windowed plane fit in 3D) and always
//! oriented toward the sensor.

pub mod ply;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix2, SMatrix, SVector, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::map::SurfacePoint;

/// Rays ignore intersections closer than this to avoid self-hits from
/// sensors sitting exactly on a surface.
const RAY_EPS: f64 = 1e-9;

/// Simulated ranges and depths never drop below this, keeping noisy
/// near-contact measurements positive.
const MIN_MEASUREMENT: f64 = 1e-6;

/// Position noise assigned to ingested points never drops below this, so
/// noise-free simulations still produce a proper observation model.
const MIN_POS_NOISE: f64 = 1e-4;

/// Rigid sensor pose: world = rotation * local + translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<const D: usize> {
    pub rotation: SMatrix<f64, D, D>,
    pub translation: SVector<f64, D>,
}

impl<const D: usize> Pose<D> {
    pub fn identity() -> Self {
        Pose {
            rotation: SMatrix::identity(),
            translation: SVector::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: SMatrix<f64, D, D>, translation: SVector<f64, D>) -> Result<Self> {
        let defect = (rotation.transpose() * rotation - SMatrix::<f64, D, D>::identity()).norm();
        if !(defect <= 1e-9) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (defect {defect:.2e})"
            )));
        }
        let det = nalgebra::DMatrix::from_iterator(D, D, rotation.iter().copied()).determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rotation must have determinant +1"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: &SVector<f64, D>) -> SVector<f64, D> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &SVector<f64, D>) -> SVector<f64, D> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose<D> {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

impl Pose<2> {
    pub fn from_heading(heading: f64, translation: Vector2<f64>) -> Pose<2> {
        let (s, c) = heading.sin_cos();
        Pose {
            rotation: Matrix2::new(c, -s, s, c),
            translation,
        }
    }

    /// Heading angle of the +x axis, for serialization.
    pub fn heading(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

impl Pose<3> {
    /// Quaternion given in scalar-first order (w, x, y, z); it is
    /// normalized before use.
    pub fn from_quaternion(quat: [f64; 4], translation: Vector3<f64>) -> Result<Pose<3>> {
        let [w, x, y, z] = quat;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if q.norm() < 1e-9 || !q.norm().is_finite() {
            return Err(Error::invalid("quaternion is degenerate"));
        }
        let unit = UnitQuaternion::from_quaternion(q);
        Ok(Pose {
            rotation: *unit.to_rotation_matrix().matrix(),
            translation,
        })
    }

    /// Scalar-first (w, x, y, z) quaternion of the rotation.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        [q.w, q.i, q.j, q.k]
    }
}

/// Beam layout and noise of a 2D scanner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanTemplate {
    pub angle_min: f64,
    pub angle_max: f64,
    pub angle_step: f64,
    /// Range noise std in meters.
    pub range_noise: f64,
}

impl ScanTemplate {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle_step > 0.0 && self.angle_step.is_finite()) {
            return Err(Error::invalid("angle_step must be positive"));
        }
        if !(self.angle_max > self.angle_min) {
            return Err(Error::invalid("angle_max must exceed angle_min"));
        }
        if !(self.range_noise >= 0.0 && self.range_noise.is_finite()) {
            return Err(Error::invalid("range_noise must be >= 0"));
        }
        let beams = (self.angle_max - self.angle_min) / self.angle_step;
        if (beams - beams.round()).abs() > 1e-6 {
            return Err(Error::invalid(
                "angle range must be an integer multiple of angle_step",
            ));
        }
        Ok(())
    }

    pub fn beam_count(&self) -> usize {
        ((self.angle_max - self.angle_min) / self.angle_step).round() as usize + 1
    }

    pub fn angle(&self, beam: usize) -> f64 {
        self.angle_min + beam as f64 * self.angle_step
    }
}

/// One 2D lidar scan. `NaN` ranges mark beams without a return.
#[derive(Clone, Debug)]
pub struct Scan2D {
    pub pose: Pose<2>,
    pub template: ScanTemplate,
    pub ranges: Vec<f64>,
}

impl Scan2D {
    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        if self.ranges.len() != self.template.beam_count() {
            return Err(Error::invalid(format!(
                "scan has {} ranges for {} beams",
                self.ranges.len(),
                self.template.beam_count()
            )));
        }
        if self.ranges.iter().any(|r| !r.is_nan() && !(*r > 0.0)) {
            return Err(Error::invalid("ranges must be positive or NaN"));
        }
        Ok(())
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        Ok(())
    }

    /// Camera-frame point of a pixel at depth `d` (z = depth convention:
    /// x right, y down, z forward).
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Pixel coordinates of a camera-frame point with z > 0.
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            p.x / p.z * self.fx + self.cx,
            p.y / p.z * self.fy + self.cy,
        )
    }
}

/// Image layout and noise of a depth camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthTemplate {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    /// Depth noise std in meters at 1 m.
    pub depth_noise: f64,
}

impl DepthTemplate {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be nonzero"));
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return Err(Error::invalid("depth_noise must be >= 0"));
        }
        Ok(())
    }
}

/// One depth image. Depths of 0 or NaN mark invalid pixels. Row-major
/// storage, `height * width` entries.
#[derive(Clone, Debug)]
pub struct DepthFrame {
    pub pose: Pose<3>,
    pub template: DepthTemplate,
    pub depth: Vec<f64>,
}

impl DepthFrame {
    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        if self.depth.len() != self.template.width * self.template.height {
            return Err(Error::invalid(format!(
                "depth image has {} entries for {}x{} pixels",
                self.depth.len(),
                self.template.width,
                self.template.height
            )));
        }
        if self.depth.iter().any(|d| !d.is_nan() && *d < 0.0) {
            return Err(Error::invalid("depths must be >= 0 or NaN"));
        }
        Ok(())
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.template.width + u]
    }

    fn valid(&self, u: usize, v: usize) -> bool {
        let d = self.at(u, v);
        d.is_finite() && d > 0.0
    }
}

/// Analytic scene primitive: a sphere (circle in 2D) or an axis-aligned
/// box, with exact distance and ray intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive<const D: usize> {
    Sphere {
        center: SVector<f64, D>,
        radius: f64,
    },
    Cuboid {
        center: SVector<f64, D>,
        half_extents: SVector<f64, D>,
    },
}

impl<const D: usize> Primitive<D> {
    pub fn validate(&self) -> Result<()> {
        match self {
            Primitive::Sphere { center, radius } => {
                if !center.iter().all(|v| v.is_finite()) || !(*radius > 0.0) {
                    return Err(Error::invalid("sphere needs a finite center and radius > 0"));
                }
            }
            Primitive::Cuboid {
                center,
                half_extents,
            } => {
                if !center.iter().all(|v| v.is_finite())
                    || !half_extents.iter().all(|v| *v > 0.0 && v.is_finite())
                {
                    return Err(Error::invalid(
                        "box needs a finite center and positive half extents",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Signed distance: negative inside.
    pub fn signed_distance(&self, q: &SVector<f64, D>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => (q - center).norm() - radius,
            Primitive::Cuboid {
                center,
                half_extents,
            } => {
                let mut outside_sq = 0.0;
                let mut max_inside = f64::NEG_INFINITY;
                for a in 0..D {
                    let d = (q[a] - center[a]).abs() - half_extents[a];
                    if d > 0.0 {
                        outside_sq += d * d;
                    }
                    max_inside = max_inside.max(d);
                }
                outside_sq.sqrt() + max_inside.min(0.0)
            }
        }
    }

    /// Smallest ray parameter `t > 0` with `origin + t dir` on the surface.
    /// `dir` need not be unit length; `t` is in units of `|dir|`.
    pub fn raycast(&self, origin: &SVector<f64, D>, dir: &SVector<f64, D>) -> Option<f64> {
        match self {
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.dot(dir);
                let b = 2.0 * oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 || a == 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                if t0 > RAY_EPS {
                    Some(t0)
                } else if t1 > RAY_EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Cuboid {
                center,
                half_extents,
            } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                for a in 0..D {
                    let lo = center[a] - half_extents[a];
                    let hi = center[a] + half_extents[a];
                    if dir[a] == 0.0 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let mut t1 = (lo - origin[a]) / dir[a];
                    let mut t2 = (hi - origin[a]) / dir[a];
                    if t1 > t2 {
                        std::mem::swap(&mut t1, &mut t2);
                    }
                    t_enter = t_enter.max(t1);
                    t_exit = t_exit.min(t2);
                }
                if t_exit < t_enter {
                    return None;
                }
                if t_enter > RAY_EPS {
                    Some(t_enter)
                } else if t_exit > RAY_EPS {
                    Some(t_exit)
                } else {
                    None
                }
            }
        }
    }
}

/// A collection of primitives with exact union distance and raycasting.
/// The union surface convention takes the minimum signed distance, so faces
/// shared by touching primitives count as surface.
#[derive(Clone, Debug)]
pub struct AnalyticScene<const D: usize> {
    pub primitives: Vec<Primitive<D>>,
}

impl<const D: usize> AnalyticScene<D> {
    pub fn new(primitives: Vec<Primitive<D>>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::invalid("scene needs at least one primitive"));
        }
        for p in &primitives {
            p.validate()?;
        }
        Ok(AnalyticScene { primitives })
    }

    pub fn signed_distance(&self, q: &SVector<f64, D>) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.signed_distance(q))
            .fold(f64::INFINITY, f64::min)
    }

    /// Unsigned distance to the union surface.
    pub fn edf(&self, q: &SVector<f64, D>) -> f64 {
        self.signed_distance(q).abs()
    }

    pub fn inside(&self, q: &SVector<f64, D>) -> bool {
        self.signed_distance(q) < 0.0
    }

    pub fn raycast(&self, origin: &SVector<f64, D>, dir: &SVector<f64, D>) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.raycast(origin, dir))
            .min_by(f64::total_cmp)
    }
}

/// Cast one noisy scan. Every beam draws exactly one noise sample whether
/// it hits or not, so the random stream is independent of the scene.
pub fn simulate_scan(
    scene: &AnalyticScene<2>,
    pose: &Pose<2>,
    template: &ScanTemplate,
    seed: u64,
) -> Result<Scan2D> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beams = template.beam_count();
    let mut ranges = Vec::with_capacity(beams);
    for i in 0..beams {
        let angle = template.angle(i);
        let dir = pose.rotate(&Vector2::new(angle.cos(), angle.sin()));
        let z: f64 = rng.sample(StandardNormal);
        let range = match scene.raycast(&pose.translation, &dir) {
            Some(t) => (t + z * template.range_noise).max(MIN_MEASUREMENT),
            None => f64::NAN,
        };
        ranges.push(range);
    }
    Ok(Scan2D {
        pose: *pose,
        template: *template,
        ranges,
    })
}

/// Convert a scan into world-frame surface points. Normals come from the
/// perpendicular of the local polyline through neighboring hits (central
/// difference where both sides exist), oriented toward the sensor. Hits
/// with no valid neighbor within 3 beams are dropped as isolated.
pub fn scan_to_points(scan: &Scan2D) -> Result<Vec<SurfacePoint<2>>> {
    scan.validate()?;
    let n = scan.ranges.len();
    let valid: Vec<bool> = scan.ranges.iter().map(|r| r.is_finite()).collect();
    if valid.iter().filter(|v| **v).count() < 2 {
        log::warn!("scan has fewer than 2 returns; no points ingested");
        return Ok(Vec::new());
    }
    let world: Vec<Option<Vector2<f64>>> = (0..n)
        .map(|i| {
            if !valid[i] {
                return None;
            }
            let angle = scan.template.angle(i);
            let dir = scan.pose.rotate(&Vector2::new(angle.cos(), angle.sin()));
            Some(scan.pose.translation + dir * scan.ranges[i])
        })
        .collect();

    let sensor = scan.pose.translation;
    let pos_noise = scan.template.range_noise.max(MIN_POS_NOISE);
    let mut points = Vec::new();
    for i in 0..n {
        let Some(p) = world[i] else { continue };
        let prev = (1..=3).filter_map(|k| i.checked_sub(k)).find(|&j| valid[j]);
        let next = (1..=3).map(|k| i + k).find(|&j| j < n && valid[j]);
        let tangent = match (prev, next) {
            (Some(j), Some(k)) => world[k].unwrap() - world[j].unwrap(),
            (Some(j), None) => p - world[j].unwrap(),
            (None, Some(k)) => world[k].unwrap() - p,
            (None, None) => continue,
        };
        if tangent.norm() < 1e-12 {
            continue;
        }
        let mut normal = Vector2::new(-tangent.y, tangent.x).normalize();
        let dot = normal.dot(&(sensor - p));
        if dot < 0.0 {
            normal = -normal;
        } else if dot == 0.0 {
            // Grazing geometry gives no sensor side; skip the point.
            continue;
        }
        points.push(SurfacePoint::new(p, normal, pos_noise)?);
    }
    Ok(points)
}

/// Render one noisy depth frame. Pixel rays use the unnormalized direction
/// `((u-cx)/fx, (v-cy)/fy, 1)` so the ray parameter equals z-depth. Misses
/// are stored as 0. One noise draw per pixel, hit or not.
pub fn simulate_depth(
    scene: &AnalyticScene<3>,
    pose: &Pose<3>,
    template: &DepthTemplate,
    seed: u64,
) -> Result<DepthFrame> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (template.width, template.height);
    let mut depth = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let dir_cam = Vector3::new(
                (u as f64 - template.intrinsics.cx) / template.intrinsics.fx,
                (v as f64 - template.intrinsics.cy) / template.intrinsics.fy,
                1.0,
            );
            let dir = pose.rotate(&dir_cam);
            let z: f64 = rng.sample(StandardNormal);
            let d = match scene.raycast(&pose.translation, &dir) {
                Some(t) => (t + z * template.depth_noise).max(MIN_MEASUREMENT),
                None => 0.0,
            };
            depth.push(d);
        }
    }
    Ok(DepthFrame {
        pose: *pose,
        template: *template,
        depth,
    })
}

/// Back-project a depth frame into world-frame surface points on a strided
/// pixel grid. Normals come from a plane fit over the surrounding 5x5
/// window (needing at least 8 valid neighbors); pixels whose fit residual
/// exceeds twice the depth noise are dropped as depth-edge artifacts.
/// Position noise scales linearly with depth.
pub fn depth_to_points(frame: &DepthFrame, stride: usize) -> Result<Vec<SurfacePoint<3>>> {
    frame.validate()?;
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let t = &frame.template;
    let residual_limit = (2.0 * t.depth_noise).max(1e-6);
    let mut points = Vec::new();
    for v in (0..t.height).step_by(stride) {
        for u in (0..t.width).step_by(stride) {
            if !frame.valid(u, v) {
                continue;
            }
            let center = t.intrinsics.back_project(u as f64, v as f64, frame.at(u, v));

            // Gather the 5x5 neighborhood in the camera frame.
            let mut neighborhood = Vec::with_capacity(25);
            let mut neighbor_count = 0usize;
            for dv in -2i64..=2 {
                for du in -2i64..=2 {
                    let (uu, vv) = (u as i64 + du, v as i64 + dv);
                    if uu < 0 || vv < 0 || uu >= t.width as i64 || vv >= t.height as i64 {
                        continue;
                    }
                    let (uu, vv) = (uu as usize, vv as usize);
                    if !frame.valid(uu, vv) {
                        continue;
                    }
                    if du != 0 || dv != 0 {
                        neighbor_count += 1;
                    }
                    neighborhood
                        .push(t.intrinsics.back_project(uu as f64, vv as f64, frame.at(uu, vv)));
                }
            }
            if neighbor_count < 8 {
                continue;
            }

            let centroid: Vector3<f64> =
                neighborhood.iter().sum::<Vector3<f64>>() / neighborhood.len() as f64;
            let mut cov = nalgebra::Matrix3::zeros();
            for p in &neighborhood {
                let d = p - centroid;
                cov += d * d.transpose();
            }
            let eig = nalgebra::SymmetricEigen::new(cov);
            let (mut min_idx, mut min_val) = (0, eig.eigenvalues[0]);
            for k in 1..3 {
                if eig.eigenvalues[k] < min_val {
                    min_val = eig.eigenvalues[k];
                    min_idx = k;
                }
            }
            let rms = (min_val.max(0.0) / neighborhood.len() as f64).sqrt();
            if rms > residual_limit {
                continue;
            }
            let mut normal: Vector3<f64> = eig.eigenvectors.column(min_idx).into();
            // Orient toward the camera center (origin in the camera frame).
            let dot = normal.dot(&(-center));
            if dot < 0.0 {
                normal = -normal;
            } else if dot == 0.0 {
                continue;
            }

            let depth = frame.at(u, v);
            let world_pos = frame.pose.apply(&center);
            let world_normal = frame.pose.rotate(&normal);
            let pos_noise = (t.depth_noise * depth).max(MIN_POS_NOISE);
            points.push(SurfacePoint::new(world_pos, world_normal, pos_noise)?);
        }
    }
    if points.is_empty() {
        log::warn!("depth frame produced no valid surface points");
    }
    Ok(points)
}

fn open_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path)?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line?);
    }
    Ok(lines)
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_f64(path: &Path, lineno: usize, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::parse(path, lineno, format!("bad number '{s}'")))
}

/// Read 2D poses, one `tx ty heading` row per line. Blank lines and `#`
/// comments are skipped; fields split on commas or whitespace.
pub fn load_poses_2d(path: &Path) -> Result<Vec<Pose<2>>> {
    let mut poses = Vec::new();
    for (idx, line) in open_lines(path)?.iter().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_fields(trimmed);
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 'tx ty heading', got {} fields", fields.len()),
            ));
        }
        let tx = parse_f64(path, lineno, fields[0])?;
        let ty = parse_f64(path, lineno, fields[1])?;
        let heading = parse_f64(path, lineno, fields[2])?;
        poses.push(Pose::from_heading(heading, Vector2::new(tx, ty)));
    }
    Ok(poses)
}

pub fn save_poses_2d(path: &Path, poses: &[Pose<2>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in poses {
        writeln!(w, "{},{},{}", p.translation.x, p.translation.y, p.heading())?;
    }
    w.flush()?;
    Ok(())
}

/// Read 3D poses, one `tx ty tz qw qx qy qz` row per line.
pub fn load_poses_3d(path: &Path) -> Result<Vec<Pose<3>>> {
    let mut poses = Vec::new();
    for (idx, line) in open_lines(path)?.iter().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_fields(trimmed);
        if fields.len() != 7 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 'tx ty tz qw qx qy qz', got {} fields", fields.len()),
            ));
        }
        let mut vals = [0.0; 7];
        for (slot, f) in vals.iter_mut().zip(&fields) {
            *slot = parse_f64(path, lineno, f)?;
        }
        let pose = Pose::from_quaternion(
            [vals[3], vals[4], vals[5], vals[6]],
            Vector3::new(vals[0], vals[1], vals[2]),
        )
        .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn save_poses_3d(path: &Path, poses: &[Pose<3>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in poses {
        let [qw, qx, qy, qz] = p.quaternion();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.translation.x, p.translation.y, p.translation.z, qw, qx, qy, qz
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Write a scan as CSV: a template line, a pose line, then one range per
/// line (`NaN` for misses).
pub fn save_scan_csv(path: &Path, scan: &Scan2D) -> Result<()> {
    scan.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let t = &scan.template;
    writeln!(w, "{},{},{},{}", t.angle_min, t.angle_max, t.angle_step, t.range_noise)?;
    writeln!(
        w,
        "{},{},{}",
        scan.pose.translation.x,
        scan.pose.translation.y,
        scan.pose.heading()
    )?;
    for r in &scan.ranges {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scan_csv(path: &Path) -> Result<Scan2D> {
    let lines = open_lines(path)?;
    if lines.len() < 2 {
        return Err(Error::parse(path, 1, "scan file needs a template and a pose line"));
    }
    let head = split_fields(&lines[0]);
    if head.len() != 4 {
        return Err(Error::parse(path, 1, "expected 'angle_min,angle_max,angle_step,range_noise'"));
    }
    let template = ScanTemplate {
        angle_min: parse_f64(path, 1, head[0])?,
        angle_max: parse_f64(path, 1, head[1])?,
        angle_step: parse_f64(path, 1, head[2])?,
        range_noise: parse_f64(path, 1, head[3])?,
    };
    let pose_fields = split_fields(&lines[1]);
    if pose_fields.len() != 3 {
        return Err(Error::parse(path, 2, "expected 'tx,ty,heading'"));
    }
    let pose = Pose::from_heading(
        parse_f64(path, 2, pose_fields[2])?,
        Vector2::new(parse_f64(path, 2, pose_fields[0])?, parse_f64(path, 2, pose_fields[1])?),
    );
    let mut ranges = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(2) {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        ranges.push(parse_f64(path, idx + 1, trimmed)?);
    }
    let scan = Scan2D {
        pose,
        template,
        ranges,
    };
    scan.validate()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    Ok(scan)
}

/// Write a depth frame as CSV: a template line, a pose line, then one image
/// row per line.
pub fn save_depth_csv(path: &Path, frame: &DepthFrame) -> Result<()> {
    frame.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let t = &frame.template;
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        t.intrinsics.fx, t.intrinsics.fy, t.intrinsics.cx, t.intrinsics.cy, t.width, t.height, t.depth_noise
    )?;
    let [qw, qx, qy, qz] = frame.pose.quaternion();
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        frame.pose.translation.x, frame.pose.translation.y, frame.pose.translation.z, qw, qx, qy, qz
    )?;
    for v in 0..t.height {
        let row: Vec<String> = (0..t.width).map(|u| frame.at(u, v).to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_depth_csv(path: &Path) -> Result<DepthFrame> {
    let lines = open_lines(path)?;
    if lines.len() < 2 {
        return Err(Error::parse(path, 1, "depth file needs a template and a pose line"));
    }
    let head = split_fields(&lines[0]);
    if head.len() != 7 {
        return Err(Error::parse(
            path,
            1,
            "expected 'fx,fy,cx,cy,width,height,depth_noise'",
        ));
    }
    let width: usize = head[4]
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("bad width '{}'", head[4])))?;
    let height: usize = head[5]
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("bad height '{}'", head[5])))?;
    let template = DepthTemplate {
        intrinsics: CameraIntrinsics {
            fx: parse_f64(path, 1, head[0])?,
            fy: parse_f64(path, 1, head[1])?,
            cx: parse_f64(path, 1, head[2])?,
            cy: parse_f64(path, 1, head[3])?,
        },
        width,
        height,
        depth_noise: parse_f64(path, 1, head[6])?,
    };
    let pose_fields = split_fields(&lines[1]);
    if pose_fields.len() != 7 {
        return Err(Error::parse(path, 2, "expected 'tx,ty,tz,qw,qx,qy,qz'"));
    }
    let mut vals = [0.0; 7];
    for (slot, f) in vals.iter_mut().zip(&pose_fields) {
        *slot = parse_f64(path, 2, f)?;
    }
    let pose = Pose::from_quaternion(
        [vals[3], vals[4], vals[5], vals[6]],
        Vector3::new(vals[0], vals[1], vals[2]),
    )
    .map_err(|e| Error::parse(path, 2, e.to_string()))?;

    let mut depth = Vec::with_capacity(width * height);
    let mut rows = 0usize;
    for (idx, line) in lines.iter().enumerate().skip(2) {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields = split_fields(trimmed);
        if fields.len() != width {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected {width} depths per row, got {}", fields.len()),
            ));
        }
        for f in fields {
            depth.push(parse_f64(path, idx + 1, f)?);
        }
        rows += 1;
    }
    if rows != height {
        return Err(Error::parse(
            path,
            lines.len(),
            format!("expected {height} image rows, got {rows}"),
        ));
    }
    let frame = DepthFrame {
        pose,
        template,
        depth,
    };
    frame
        .validate()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    Ok(frame)
}
