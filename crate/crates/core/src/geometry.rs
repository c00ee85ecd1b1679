//! Pinhole camera models, projection, PnP extrinsic calibration and depth
//! unprojection. All lengths are millimeters in the room (robot) frame; pixel
//! coordinates are pre-undistorted with the pixel index equal to its coordinate.

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::lsq::{self, LsqError, LsqOptions, Residuals};

/// Points closer than this to the camera plane are not projectable.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0:e} mm in the camera frame")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("solver did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("invalid depth image: {0}")]
    InvalidDepth(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside the image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside the image");
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Normalized image coordinates `K^-1 (u, v, 1)`.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }
}

/// Rigid room-to-camera transform `x_cam = R x_room + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExtrinsicsRepr", into = "ExtrinsicsRepr")]
pub struct Extrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Row-major on-disk layout.
#[derive(Serialize, Deserialize)]
struct ExtrinsicsRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<ExtrinsicsRepr> for Extrinsics {
    type Error = GeometryError;
    fn try_from(r: ExtrinsicsRepr) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Extrinsics::new(m, Vector3::from(r.translation))
    }
}

impl From<Extrinsics> for ExtrinsicsRepr {
    fn from(e: Extrinsics) -> Self {
        let r = e.rotation;
        ExtrinsicsRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [e.translation.x, e.translation.y, e.translation.z],
        }
    }
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > 1e-9 {
            return Err(GeometryError::InvalidExtrinsics(format!(
                "rotation not orthonormal (deviation {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidExtrinsics(format!("det(R) = {det}")));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidExtrinsics("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: rotation.into_inner(), translation }
    }

    /// Camera at `eye` looking at `target`; image y points away from `up`.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Self> {
        let z = (target - eye).normalize();
        let up_perp = up - z * up.dot(&z);
        if up_perp.norm() < 1e-9 {
            return Err(GeometryError::InvalidExtrinsics("up vector parallel to view".into()));
        }
        let y = -up_perp.normalize();
        let x = y.cross(&z);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        Extrinsics::new(r, t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in room coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_room(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    /// Extrinsics of the same camera after the whole scene (camera included)
    /// is moved by `motion`.
    pub fn moved_with_scene(&self, motion: &Isometry3<f64>) -> Self {
        let q = motion.rotation.to_rotation_matrix().into_inner();
        let s = motion.translation.vector;
        let r = self.rotation * q.transpose();
        Self { rotation: r, translation: self.translation - r * s }
    }

    /// Angle of the relative rotation between two extrinsics, radians.
    pub fn rotation_angle_to(&self, other: &Extrinsics) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        (((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0)).acos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl CameraModel {
    pub fn new(id: impl Into<String>, intrinsics: Intrinsics, extrinsics: Extrinsics) -> Self {
        Self { id: id.into(), intrinsics, extrinsics }
    }

    /// Ray through a pixel, scaled so the parameter equals camera z-depth.
    pub fn pixel_ray(&self, pixel: &Vector2<f64>) -> crate::primitives::Ray {
        let d_cam = self.intrinsics.normalize(pixel);
        crate::primitives::Ray::new(
            self.extrinsics.center(),
            self.extrinsics.rotation().transpose() * d_cam,
        )
    }
}

/// Pinhole projection `K (R P + t)` of a room point.
pub fn project(camera: &CameraModel, point_room: &Vector3<f64>) -> Result<Vector2<f64>> {
    project_with(&camera.intrinsics, &camera.extrinsics, point_room)
}

fn project_with(k: &Intrinsics, e: &Extrinsics, p: &Vector3<f64>) -> Result<Vector2<f64>> {
    let c = e.to_camera(p);
    if c.z <= MIN_DEPTH {
        return Err(GeometryError::NonPositiveDepth(c.z));
    }
    Ok(Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
}

/// Euclidean pixel distance between `pixel` and the projection of `point_room`.
pub fn reprojection_error(camera: &CameraModel, pixel: &Vector2<f64>, point_room: &Vector3<f64>) -> Result<f64> {
    Ok((project(camera, point_room)? - pixel).norm())
}

/// A marker with known room position and its observed pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub point_room: Vector3<f64>,
    pub point_pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions {
    pub robust: bool,
    pub huber_delta: f64,
    pub max_iterations: usize,
    /// Relative singular-value floor of the centered marker matrix.
    pub degeneracy_ratio: f64,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self { robust: false, huber_delta: 1.0, max_iterations: 200, degeneracy_ratio: 1e-6 }
    }
}

/// Estimates camera extrinsics from 2D-3D marker correspondences: linear DLT
/// on normalized image coordinates, then Levenberg-Marquardt refinement of
/// the reprojection error (Huber-weighted when `robust`).
pub fn solve_pnp(correspondences: &[Correspondence], intrinsics: &Intrinsics, robust: bool) -> Result<Extrinsics> {
    solve_pnp_with(correspondences, intrinsics, &PnpOptions { robust, ..Default::default() })
}

pub fn solve_pnp_with(correspondences: &[Correspondence], intrinsics: &Intrinsics, opts: &PnpOptions) -> Result<Extrinsics> {
    const MIN: usize = 6;
    if correspondences.len() < MIN {
        return Err(GeometryError::TooFewCorrespondences { needed: MIN, got: correspondences.len() });
    }
    intrinsics.validate()?;
    check_spread(correspondences, opts.degeneracy_ratio)?;
    let init = pnp_dlt(correspondences, intrinsics)?;
    refine_pnp(correspondences, intrinsics, init, opts)
}

fn check_spread(corr: &[Correspondence], ratio: f64) -> Result<()> {
    let n = corr.len() as f64;
    let mean = corr.iter().map(|c| c.point_room).sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for c in corr {
        let d = c.point_room - mean;
        scatter += d * d.transpose();
    }
    let sv = scatter.symmetric_eigenvalues().map(|e| e.max(0.0).sqrt());
    let (lo, hi) = (sv.min(), sv.max());
    if hi <= 0.0 || lo < ratio * hi {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "marker spread singular values {lo:.3e} / {hi:.3e}"
        )));
    }
    Ok(())
}

fn pnp_dlt(corr: &[Correspondence], k: &Intrinsics) -> Result<Extrinsics> {
    let n = corr.len();
    let centroid = corr.iter().map(|c| c.point_room).sum::<Vector3<f64>>() / n as f64;
    let mean_dist = corr.iter().map(|c| (c.point_room - centroid).norm()).sum::<f64>() / n as f64;
    let s = 3f64.sqrt() / mean_dist;

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, c) in corr.iter().enumerate() {
        let xh = (c.point_room - centroid) * s;
        let xh = [xh.x, xh.y, xh.z, 1.0];
        let m = k.normalize(&c.point_pixel);
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -m.x * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -m.y * xh[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| GeometryError::DegenerateConfiguration("SVD failed".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("12 singular values");
    let p = v_t.row(imin);
    // Undo the point normalization: P = P_hat * T with T = [sI, -s c; 0 1].
    let mut m = Matrix3::from_fn(|r, col| p[4 * r + col] * s);
    let mut p4 = Vector3::from_fn(|r, _| p[4 * r + 3]) - m * centroid;
    if m.determinant() < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let svd3 = m.svd(true, true);
    let (u, vt) = (svd3.u.expect("u"), svd3.v_t.expect("v_t"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        r = -r;
    }
    let scale = svd3.singular_values.mean();
    if scale <= 0.0 {
        return Err(GeometryError::DegenerateConfiguration("zero-scale projection".into()));
    }
    let t = p4 / scale;
    let rot = Rotation3::from_matrix(&r);
    Ok(Extrinsics::from_rotation(rot, t))
}

struct PnpProblem<'a> {
    corr: &'a [Correspondence],
    k: &'a Intrinsics,
    base: Rotation3<f64>,
}

impl PnpProblem<'_> {
    fn extrinsics(&self, p: &DVector<f64>) -> Extrinsics {
        let rot = Rotation3::new(Vector3::new(p[0], p[1], p[2])) * self.base;
        Extrinsics::from_rotation(rot, Vector3::new(p[3], p[4], p[5]))
    }
}

impl Residuals for PnpProblem<'_> {
    fn num_params(&self) -> usize {
        6
    }

    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let e = self.extrinsics(p);
        let mut r = DVector::zeros(2 * self.corr.len());
        for (i, c) in self.corr.iter().enumerate() {
            let proj = project_with(self.k, &e, &c.point_room).ok()?;
            let d = proj - c.point_pixel;
            r[2 * i] = d.x;
            r[2 * i + 1] = d.y;
        }
        Some(r)
    }
}

fn refine_pnp(corr: &[Correspondence], k: &Intrinsics, init: Extrinsics, opts: &PnpOptions) -> Result<Extrinsics> {
    let problem = PnpProblem {
        corr,
        k,
        base: Rotation3::from_matrix_unchecked(init.rotation),
    };
    let t = init.translation;
    let x0 = DVector::from_vec(vec![0.0, 0.0, 0.0, t.x, t.y, t.z]);
    let lsq_opts = LsqOptions {
        max_iterations: opts.max_iterations,
        huber_delta: opts.robust.then_some(opts.huber_delta),
        block_size: 2,
        // Tight enough that the answer does not depend on marker order.
        step_tolerance: 1e-12,
        cost_tolerance: 1e-15,
    };
    match lsq::minimize(&problem, x0, &lsq_opts) {
        Ok(sol) => {
            let e = problem.extrinsics(&sol.params);
            // Re-orthonormalize to keep the type invariant tight.
            let rot = Rotation3::from_matrix(&e.rotation);
            Ok(Extrinsics::from_rotation(rot, e.translation))
        }
        Err(LsqError::NoConvergence { iterations, .. }) => Err(GeometryError::NoConvergence(iterations)),
        Err(LsqError::InfeasibleStart) => Err(GeometryError::DegenerateConfiguration(
            "linear initialization places markers behind the camera".into(),
        )),
    }
}

/// Row-major depth raster in millimeters of camera z; zero marks no return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(GeometryError::InvalidDepth(format!(
                "{} values for a {width}x{height} image",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GeometryError::InvalidDepth("depths must be finite and non-negative".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, values: vec![0.0; width as usize * height as usize] }
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.values[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, d: f64) {
        let w = self.width as usize;
        self.values[v as usize * w + u as usize] = d;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }
}

/// Back-projects every `stride`-th valid pixel to the room frame:
/// `R^T (K^-1 (u, v, 1) d - t)`.
pub fn unproject_depth(camera: &CameraModel, depth: &DepthImage, stride: u32) -> PointCloud {
    let stride = stride.max(1);
    let k = &camera.intrinsics;
    let e = &camera.extrinsics;
    let mut points = Vec::new();
    for v in (0..depth.height).step_by(stride as usize) {
        for u in (0..depth.width).step_by(stride as usize) {
            let d = depth.get(u, v);
            if d > 0.0 {
                let ray = k.normalize(&Vector2::new(u as f64, v as f64));
                points.push(e.to_room(&(ray * d)));
            }
        }
    }
    PointCloud::new(points)
}
