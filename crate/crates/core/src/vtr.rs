//! Virtual test run: sweep a procedural C-arm along a trajectory and report
//! voxels it shares with the residual room point cloud.
//!
//! C-arm local frame: the isocenter is the origin and the arc lies in the
//! y-z plane, running from the detector end near +z through +y to the source
//! end near -z. Posing rotates the local frame about x (the propeller axis)
//! and then translates it to the isocenter.

use std::path::Path;
use std::time::Instant;

use bitvec::prelude::*;
use image::{Rgb, RgbImage};
use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{unproject_depth, CameraModel, DepthImage};
use crate::par;
use crate::primitives::{Cuboid, Primitive};

#[derive(Debug, Error)]
pub enum VtrError {
    #[error("invalid C-arm model: {0}")]
    InvalidModel(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),
    #[error("snapshot: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, VtrError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CArmModel {
    /// Arc centerline radius, mm.
    pub arc_radius: f64,
    /// Degrees; the part beyond 180 is split evenly past both ends.
    pub arc_span: f64,
    /// Diameter of the arc's circular tube, mm.
    pub tube_cross_section: f64,
    /// Full box size (x, y, z), mm.
    pub detector_box: Vector3<f64>,
    /// Detector box center on local +z, mm.
    pub detector_offset: f64,
    pub source_box: Vector3<f64>,
    /// Source box center on local -z, mm.
    pub source_offset: f64,
    pub surface_sample_spacing: f64,
}

impl Default for CArmModel {
    fn default() -> Self {
        Self {
            arc_radius: 900.0,
            arc_span: 190.0,
            tube_cross_section: 150.0,
            detector_box: Vector3::new(400.0, 400.0, 150.0),
            detector_offset: 500.0,
            source_box: Vector3::new(300.0, 300.0, 300.0),
            source_offset: 650.0,
            surface_sample_spacing: 10.0,
        }
    }
}

impl CArmModel {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.arc_radius, self.tube_cross_section, self.surface_sample_spacing]
            .into_iter()
            .chain(self.detector_box.iter().copied())
            .chain(self.source_box.iter().copied());
        if dims.into_iter().any(|d| !(d > 0.0 && d.is_finite())) {
            return Err(VtrError::InvalidModel("dimensions must be positive".into()));
        }
        if !(self.arc_span > 0.0 && self.arc_span <= 360.0) {
            return Err(VtrError::InvalidModel(format!("arc span {} deg", self.arc_span)));
        }
        if self.tube_cross_section / 2.0 >= self.arc_radius {
            return Err(VtrError::InvalidModel("tube wider than the arc".into()));
        }
        Ok(())
    }

    /// Requires the sampling to be dense enough that no voxel the surface
    /// crosses can be skipped.
    pub fn validate_for(&self, grid: &GridSpec) -> Result<()> {
        self.validate()?;
        let edge = grid.cell_size().min();
        if self.surface_sample_spacing > edge / 2.0 {
            return Err(VtrError::InvalidModel(format!(
                "sample spacing {} mm exceeds half the smallest voxel edge ({} mm)",
                self.surface_sample_spacing, edge
            )));
        }
        Ok(())
    }

    /// Arc end angles in radians, measured from +z toward +y.
    pub fn arc_limits(&self) -> (f64, f64) {
        let over = (self.arc_span - 180.0).to_radians() / 2.0;
        (-over, std::f64::consts::PI + over)
    }

    /// Point on the arc centerline at angle `phi`.
    pub fn arc_point(&self, phi: f64) -> Vector3<f64> {
        Vector3::new(0.0, phi.sin(), phi.cos()) * self.arc_radius
    }

    pub fn detector(&self) -> Cuboid {
        Cuboid::axis_aligned(Vector3::new(0.0, 0.0, self.detector_offset), self.detector_box)
    }

    pub fn source(&self) -> Cuboid {
        Cuboid::axis_aligned(Vector3::new(0.0, 0.0, -self.source_offset), self.source_box)
    }

    /// Unsigned distance from a local-frame point to the C-arm surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let r = self.tube_cross_section / 2.0;
        let (lo, hi) = self.arc_limits();
        let phi = p.y.atan2(p.z);
        // atan2 covers (-pi, pi]; the arc may extend past pi.
        let phi = if phi < lo { phi + std::f64::consts::TAU } else { phi };
        let wall = if phi <= hi { ((p - self.arc_point(phi)).norm() - r).abs() } else { f64::INFINITY };
        let caps = [lo, hi]
            .iter()
            .map(|&a| {
                let t = Vector3::new(0.0, a.cos(), -a.sin());
                let d = p - self.arc_point(a);
                let axial = d.dot(&t);
                let radial = (d - t * axial).norm();
                if radial <= r { axial.abs() } else { (axial * axial + (radial - r).powi(2)).sqrt() }
            })
            .fold(f64::INFINITY, f64::min);
        let arc = wall.min(caps);
        let boxes = [self.detector(), self.source()]
            .iter()
            .map(|b| Primitive::Cuboid(*b).signed_distance(p).abs())
            .fold(f64::INFINITY, f64::min);
        arc.min(boxes)
    }

    /// Surface samples in the local frame: tube wall, tube end caps, and all
    /// faces of both boxes, at most `surface_sample_spacing` apart.
    pub fn sample_local(&self) -> Vec<Vector3<f64>> {
        let h = self.surface_sample_spacing;
        let r = self.tube_cross_section / 2.0;
        let (lo, hi) = self.arc_limits();
        let mut pts = Vec::new();

        let n_phi = ((self.arc_radius + r) * (hi - lo) / h).ceil() as usize + 1;
        let n_psi = (std::f64::consts::TAU * r / h).ceil() as usize;
        for a in 0..n_phi {
            let phi = lo + (hi - lo) * a as f64 / (n_phi - 1) as f64;
            let c = self.arc_point(phi);
            let radial = c / self.arc_radius;
            for b in 0..n_psi {
                let psi = std::f64::consts::TAU * b as f64 / n_psi as f64;
                pts.push(c + (radial * psi.cos() + Vector3::x() * psi.sin()) * r);
            }
        }
        for phi in [lo, hi] {
            let c = self.arc_point(phi);
            let radial = c / self.arc_radius;
            let rings = (r / h).ceil() as usize;
            pts.push(c);
            for k in 1..=rings {
                let rr = r * k as f64 / rings as f64;
                let n = (std::f64::consts::TAU * rr / h).ceil() as usize;
                for b in 0..n {
                    let psi = std::f64::consts::TAU * b as f64 / n as f64;
                    pts.push(c + (radial * psi.cos() + Vector3::x() * psi.sin()) * rr);
                }
            }
        }
        for b in [self.detector(), self.source()] {
            sample_box_surface(&b, h, &mut pts);
        }
        pts
    }
}

fn sample_box_surface(b: &Cuboid, h: f64, out: &mut Vec<Vector3<f64>>) {
    let e = b.half_extents;
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let nu = (2.0 * e[u] / h).ceil() as usize;
        let nv = (2.0 * e[v] / h).ceil() as usize;
        for side in [-1.0, 1.0] {
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut p = Vector3::zeros();
                    p[axis] = side * e[axis];
                    p[u] = -e[u] + 2.0 * e[u] * i as f64 / nu as f64;
                    p[v] = -e[v] + 2.0 * e[v] * j as f64 / nv as f64;
                    out.push(b.center + b.rotation * p);
                }
            }
        }
    }
}

/// One trajectory step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CArmPose {
    pub isocenter: Vector3<f64>,
    /// Rotation about the propeller (x) axis, degrees.
    pub angle: f64,
    #[serde(default = "Vector3::zeros")]
    pub translation: Vector3<f64>,
}

impl CArmPose {
    pub fn new(isocenter: Vector3<f64>, angle: f64) -> Self {
        Self { isocenter, angle, translation: Vector3::zeros() }
    }

    /// Local C-arm frame to room frame.
    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.isocenter + self.translation),
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.angle.to_radians()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryProtocol {
    pub name: String,
    pub steps: Vec<CArmPose>,
}

impl TrajectoryProtocol {
    /// Evenly spaced propeller sweep about a fixed isocenter.
    pub fn sweep(name: impl Into<String>, isocenter: Vector3<f64>, from_deg: f64, to_deg: f64, steps: usize) -> Self {
        let steps = (0..steps)
            .map(|i| {
                let t = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                CArmPose::new(isocenter, from_deg + (to_deg - from_deg) * t)
            })
            .collect();
        Self { name: name.into(), steps }
    }

    /// The standard 60-step head scan from -100 to +100 degrees.
    pub fn head_scan(isocenter: Vector3<f64>) -> Self {
        Self::sweep("head-scan", isocenter, -100.0, 100.0, 60)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.len() < 2 {
            return Err(VtrError::InvalidTrajectory(format!("{}: needs at least 2 steps", self.name)));
        }
        let d: Vec<f64> = self.steps.windows(2).map(|w| w[1].angle - w[0].angle).collect();
        if !(d.iter().all(|x| *x >= 0.0) || d.iter().all(|x| *x <= 0.0)) {
            return Err(VtrError::InvalidTrajectory(format!("{}: angles not monotone", self.name)));
        }
        Ok(())
    }
}

pub fn sample_carm(model: &CArmModel, pose: &CArmPose) -> PointCloud {
    let iso = pose.isometry();
    PointCloud::new(model.sample_local().iter().map(|p| iso * nalgebra::Point3::from(*p)).map(|p| p.coords).collect())
}

/// Axis-aligned crop box split into cells; cells are half-open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: Vector3<f64>,
    pub extent: Vector3<f64>,
    pub resolution: [usize; 3],
}

pub const DEFAULT_EXTENT: [f64; 3] = [3000.0, 2000.0, 2000.0];
pub const DEFAULT_RESOLUTION: [usize; 3] = [100, 100, 100];

impl GridSpec {
    /// Default crop centered on `center`.
    pub fn centered(center: &Vector3<f64>) -> Self {
        let extent = Vector3::from(DEFAULT_EXTENT);
        Self { origin: center - extent / 2.0, extent, resolution: DEFAULT_RESOLUTION }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|e| !(*e > 0.0 && e.is_finite())) || self.resolution.contains(&0) {
            return Err(VtrError::InvalidGrid("extent and resolution must be positive".into()));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(VtrError::InvalidGrid("non-finite origin".into()));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> Vector3<f64> {
        let r = self.resolution;
        self.extent.component_div(&Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64))
    }

    pub fn num_cells(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        self.origin + self.extent
    }

    pub fn cell_coords(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let c = (p - self.origin).component_div(&self.cell_size());
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = c[a].floor();
            if !(f >= 0.0 && f < self.resolution[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// Flat index `i + nx (j + ny k)`.
    pub fn index_of(&self, p: &Vector3<f64>) -> Option<usize> {
        self.cell_coords(p).map(|[i, j, k]| i + self.resolution[0] * (j + self.resolution[1] * k))
    }

    pub fn coords_of(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.resolution;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn cell_center(&self, index: usize) -> Vector3<f64> {
        let [i, j, k] = self.coords_of(index);
        self.origin + (Vector3::new(i as f64, j as f64, k as f64) + Vector3::repeat(0.5)).component_mul(&self.cell_size())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    occupancy: BitVec,
}

impl VoxelGrid {
    pub fn new(spec: GridSpec) -> Self {
        Self { spec, occupancy: bitvec![0; spec.num_cells()] }
    }

    pub fn from_cloud(spec: GridSpec, cloud: &PointCloud) -> Self {
        let mut g = Self::new(spec);
        for p in &cloud.points {
            g.insert(p);
        }
        g
    }

    /// Marks the cell holding `p`; points outside the crop are ignored.
    pub fn insert(&mut self, p: &Vector3<f64>) -> bool {
        match self.spec.index_of(p) {
            Some(i) => {
                self.occupancy.set(i, true);
                true
            }
            None => false,
        }
    }

    pub fn is_occupied(&self, index: usize) -> bool {
        self.occupancy.get(index).map(|b| *b).unwrap_or(false)
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.count_ones()
    }

    pub fn occupied_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupancy.iter_ones()
    }
}

/// Drops every room point within `delta` of some C-arm point.
pub fn subtract_carm(room: &PointCloud, carm: &PointCloud, delta: f64) -> PointCloud {
    if carm.is_empty() || room.is_empty() || delta <= 0.0 {
        return room.clone();
    }
    let index = NeighborIndex::new(&carm.points, delta);
    let keep = par::map(&room.points, |p| !index.any_within(p, delta));
    PointCloud::new(room.points.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect())
}

/// Dense bucket grid over the bounding box of a point set, in compressed
/// row form. Cell edge equals the query radius so a query visits 27 cells.
struct NeighborIndex<'a> {
    points: &'a [Vector3<f64>],
    min: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NeighborIndex<'a> {
    fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let min = points.iter().fold(Vector3::repeat(f64::INFINITY), |m, p| m.inf(p));
        let max = points.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
        let dims: [usize; 3] = std::array::from_fn(|a| ((max[a] - min[a]) / cell).floor() as usize + 1);
        let mut this = Self { points, min, cell, dims, starts: Vec::new(), order: Vec::new() };
        let keys: Vec<usize> = points.iter().map(|p| this.flat(this.coords(p))).collect();
        let n = dims.iter().product::<usize>();
        let mut counts = vec![0usize; n + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0usize; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        this.starts = counts;
        this.order = order;
        this
    }

    fn coords(&self, p: &Vector3<f64>) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.min[a]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        c[0] as usize + self.dims[0] * (c[1] as usize + self.dims[1] * c[2] as usize)
    }

    fn any_within(&self, p: &Vector3<f64>, r: f64) -> bool {
        let c = self.coords(p);
        let r2 = r * r;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if (0..3).any(|a| q[a] < 0 || q[a] >= self.dims[a] as i64) {
                        continue;
                    }
                    let k = self.flat(q);
                    for &i in &self.order[self.starts[k]..self.starts[k + 1]] {
                        if (self.points[i] - p).norm_squared() <= r2 {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Cells shared by the C-arm and the room at one trajectory step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionRegion {
    pub step: usize,
    pub angle: f64,
    /// Ascending flat voxel indices.
    pub voxel_indices: Vec<usize>,
    pub voxel_centers: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub protocol: String,
    pub collided: bool,
    /// Sorted by step; only steps with at least one shared cell appear.
    pub regions: Vec<CollisionRegion>,
    pub steps_checked: usize,
    pub elapsed_s: f64,
    pub grid: GridSpec,
}

impl CollisionReport {
    /// All `(step, voxel)` pairs in report order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.regions.iter().flat_map(|r| r.voxel_indices.iter().map(move |&v| (r.step, v))).collect()
    }

    pub fn colliding_steps(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.step).collect()
    }
}

/// Voxelizes the residual room once, then intersects it with the posed
/// C-arm at every step.
pub fn detect_collisions(
    residual_room: &PointCloud,
    model: &CArmModel,
    protocol: &TrajectoryProtocol,
    grid: &GridSpec,
) -> Result<CollisionReport> {
    let start = Instant::now();
    grid.validate()?;
    model.validate_for(grid)?;
    protocol.validate()?;
    let room = VoxelGrid::from_cloud(*grid, residual_room);
    let local = model.sample_local();
    let per_step = par::map(&protocol.steps, |pose| {
        let iso = pose.isometry();
        let mut hits: Vec<usize> = local
            .iter()
            .filter_map(|p| grid.index_of(&(iso * nalgebra::Point3::from(*p)).coords))
            .filter(|&i| room.is_occupied(i))
            .collect();
        hits.sort_unstable();
        hits.dedup();
        hits
    });
    let regions: Vec<CollisionRegion> = per_step
        .into_iter()
        .enumerate()
        .filter(|(_, hits)| !hits.is_empty())
        .map(|(step, voxel_indices)| CollisionRegion {
            step,
            angle: protocol.steps[step].angle,
            voxel_centers: voxel_indices.iter().map(|&i| grid.cell_center(i)).collect(),
            voxel_indices,
        })
        .collect();
    Ok(CollisionReport {
        protocol: protocol.name.clone(),
        collided: !regions.is_empty(),
        regions,
        steps_checked: protocol.steps.len(),
        elapsed_s: start.elapsed().as_secs_f64(),
        grid: *grid,
    })
}

/// Set-based recomputation of the `(step, cell)` collision pairs: room cells
/// and C-arm cells are collected per step and intersected. Used to audit
/// reports written by [`detect_collisions`].
pub fn reference_collisions(
    residual_room: &PointCloud,
    model: &CArmModel,
    protocol: &TrajectoryProtocol,
    grid: &GridSpec,
) -> std::collections::BTreeSet<(usize, usize)> {
    let room: std::collections::HashSet<usize> = residual_room.points.iter().filter_map(|p| grid.index_of(p)).collect();
    let mut out = std::collections::BTreeSet::new();
    for (step, pose) in protocol.steps.iter().enumerate() {
        for p in sample_carm(model, pose).points {
            if let Some(i) = grid.index_of(&p).filter(|i| room.contains(i)) {
                out.insert((step, i));
            }
        }
    }
    out
}

/// Unprojects every depth frame and keeps points inside the crop.
pub fn fuse_clouds(frames: &[(CameraModel, DepthImage)], grid: &GridSpec, stride: u32) -> PointCloud {
    let clouds = par::map(frames, |(cam, depth)| unproject_depth(cam, depth, stride).cropped(&grid.origin, &grid.max_corner()));
    PointCloud::concat(&clouds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VtrConfig {
    pub carm: CArmModel,
    pub extent: Vector3<f64>,
    pub resolution: [usize; 3],
    /// Crop origin; defaults to centering the crop on the first isocenter.
    pub origin: Option<Vector3<f64>>,
    /// Room points this close to the current C-arm surface are removed, mm.
    pub subtract_delta: f64,
    pub depth_stride: u32,
}

impl Default for VtrConfig {
    fn default() -> Self {
        Self {
            carm: CArmModel::default(),
            extent: Vector3::from(DEFAULT_EXTENT),
            resolution: DEFAULT_RESOLUTION,
            origin: None,
            subtract_delta: 25.0,
            depth_stride: 1,
        }
    }
}

impl VtrConfig {
    pub fn grid_for(&self, isocenter: &Vector3<f64>) -> GridSpec {
        GridSpec {
            origin: self.origin.unwrap_or(isocenter - self.extent / 2.0),
            extent: self.extent,
            resolution: self.resolution,
        }
    }
}

/// Intermediate products of a run, kept for reporting and snapshots.
#[derive(Debug, Clone)]
pub struct VtrRun {
    pub report: CollisionReport,
    pub fused_points: usize,
    pub residual: PointCloud,
}

/// Fuse, subtract the C-arm at `current_pose`, and sweep `protocol`.
pub fn run_vtr(
    frames: &[(CameraModel, DepthImage)],
    current_pose: &CArmPose,
    protocol: &TrajectoryProtocol,
    config: &VtrConfig,
) -> Result<VtrRun> {
    let start = Instant::now();
    let first = protocol.steps.first().ok_or_else(|| VtrError::InvalidTrajectory("no steps".into()))?;
    let grid = config.grid_for(&(first.isocenter + first.translation));
    grid.validate()?;
    config.carm.validate_for(&grid)?;
    let fused = fuse_clouds(frames, &grid, config.depth_stride);
    let residual = subtract_carm(&fused, &sample_carm(&config.carm, current_pose), config.subtract_delta);
    let mut report = detect_collisions(&residual, &config.carm, protocol, &grid)?;
    report.elapsed_s = start.elapsed().as_secs_f64();
    Ok(VtrRun { report, fused_points: fused.len(), residual })
}

/// Oblique orthographic view of the residual cloud (grey), the C-arm at the
/// first colliding step (blue) and collision cells (red).
pub fn render_snapshot(
    residual: &PointCloud,
    model: &CArmModel,
    protocol: &TrajectoryProtocol,
    report: &CollisionReport,
    width: u32,
    height: u32,
) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (az, el) = (35f64.to_radians(), 25f64.to_radians());
    let right = Vector3::new(az.cos(), az.sin(), 0.0);
    let up = Vector3::new(-az.sin() * el.sin(), az.cos() * el.sin(), el.cos());
    let toward = right.cross(&up);
    let center = report.grid.origin + report.grid.extent / 2.0;
    let scale = 0.9 * width.min(height) as f64 / report.grid.extent.norm();
    let to_px = |p: &Vector3<f64>| {
        let d = p - center;
        let u = width as f64 / 2.0 + scale * d.dot(&right);
        let v = height as f64 / 2.0 - scale * d.dot(&up);
        (u, v, d.dot(&toward))
    };
    let plot = |img: &mut RgbImage, p: &Vector3<f64>, color: Rgb<u8>, size: i64| {
        let (u, v, _) = to_px(p);
        for dy in 0..size {
            for dx in 0..size {
                let (x, y) = (u as i64 + dx - size / 2, v as i64 + dy - size / 2);
                if x >= 0 && y >= 0 && (x as u32) < width && (y as u32) < height {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    };
    let mut room: Vec<_> = residual.points.iter().map(|p| (to_px(p).2, *p)).collect();
    room.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (depth, p) in &room {
        let shade = (160.0 + 60.0 * (depth / 1500.0).tanh()) as u8;
        plot(&mut img, p, Rgb([shade, shade, shade]), 1);
    }
    let step = report.regions.first().map(|r| r.step).unwrap_or(0);
    if let Some(pose) = protocol.steps.get(step) {
        for p in sample_carm(model, pose).points.iter().step_by(4) {
            plot(&mut img, p, Rgb([70, 110, 200]), 1);
        }
    }
    for region in &report.regions {
        for c in &region.voxel_centers {
            plot(&mut img, c, Rgb([220, 30, 30]), 4);
        }
    }
    img
}

pub fn write_snapshot(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}
