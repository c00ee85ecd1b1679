//! Two-stage confidence-weighted triangulation.
//!
//! Stage one triangulates a joint from every subset of at least two observing
//! cameras (linear DLT, then Huber-robust refinement of the reprojection
//! error). Stage two keeps the candidate whose confidence-weighted
//! reprojection error summed over *all* observing cameras is lowest, and
//! attaches the scoring vector `(mean rho, mean v, 1 / mean error)` averaged
//! over the winning subset.
//!
//! Observations flagged not visible (`v = 0`) take part in neither stage.

use std::cmp::Ordering;

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{reprojection_error, CameraModel, MIN_DEPTH};
use crate::lsq::{self, LsqError, LsqOptions, Residuals};
use crate::observation::{FrameObservations, JointId, Observation2D};
use crate::par;

/// Weighted costs within this band of the minimum count as ties.
pub const TIE_ABS_PX: f64 = 1e-6;
pub const TIE_REL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriangulationError {
    #[error("joint {joint} seen by {got} usable cameras, need at least 2")]
    InsufficientViews { joint: JointId, got: usize },
    #[error("near-parallel rays (condition number {0:.3e})")]
    NearParallelRays(f64),
    #[error("triangulated point lies behind camera {0}")]
    BehindCamera(String),
    #[error("refinement did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("no candidates to select from")]
    NoCandidates,
}

pub type Result<T> = std::result::Result<T, TriangulationError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriangulationOptions {
    pub huber_delta: f64,
    pub max_iterations: usize,
    /// Linear systems with a worse condition number are rejected.
    pub max_condition: f64,
    /// Floor on the mean reprojection error before inversion, px.
    pub reproj_floor: f64,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self { huber_delta: 2.0, max_iterations: 100, max_condition: 1e8, reproj_floor: 0.1 }
    }
}

/// One camera's detection of the joint being triangulated.
#[derive(Debug, Clone, Copy)]
pub struct ViewObservation<'a> {
    pub camera: &'a CameraModel,
    pub observation: Observation2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate3D {
    pub position: Vector3<f64>,
    /// Camera ids, sorted.
    pub subset: Vec<String>,
    pub mean_reproj_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub rho: f64,
    pub vis: f64,
    /// Inverse of the floored mean reprojection error, 1/px.
    pub inv_err: f64,
}

impl ScoreVector {
    pub fn reproj_error(&self) -> f64 {
        1.0 / self.inv_err
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredKeypoint3D {
    pub joint: JointId,
    pub timestep: u64,
    pub position: Vector3<f64>,
    pub score: ScoreVector,
    pub winning_subset: Vec<String>,
}

struct PointProblem<'a> {
    views: Vec<(&'a CameraModel, Vector2<f64>)>,
}

impl Residuals for PointProblem<'_> {
    fn num_params(&self) -> usize {
        3
    }

    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let x = Vector3::new(p[0], p[1], p[2]);
        let mut r = DVector::zeros(2 * self.views.len());
        for (i, (cam, px)) in self.views.iter().enumerate() {
            let c = cam.extrinsics.to_camera(&x);
            if c.z <= MIN_DEPTH {
                return None;
            }
            let k = &cam.intrinsics;
            r[2 * i] = k.fx * c.x / c.z + k.cx - px.x;
            r[2 * i + 1] = k.fy * c.y / c.z + k.cy - px.y;
        }
        Some(r)
    }

    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let x = Vector3::new(p[0], p[1], p[2]);
        let mut j = DMatrix::zeros(2 * self.views.len(), 3);
        for (i, (cam, _)) in self.views.iter().enumerate() {
            let c = cam.extrinsics.to_camera(&x);
            if c.z <= MIN_DEPTH {
                return None;
            }
            let k = &cam.intrinsics;
            let iz = 1.0 / c.z;
            let d = Matrix2x3::new(
                k.fx * iz, 0.0, -k.fx * c.x * iz * iz,
                0.0, k.fy * iz, -k.fy * c.y * iz * iz,
            );
            let block = d * cam.extrinsics.rotation();
            j.fixed_view_mut::<2, 3>(2 * i, 0).copy_from(&block);
        }
        Some(j)
    }
}

/// Linear triangulation on normalized image coordinates. Returns the point
/// and the condition number `sigma_1 / sigma_3` of the stacked system.
fn dlt(views: &[(&CameraModel, Vector2<f64>)]) -> (Option<Vector3<f64>>, f64) {
    // Similarity normalization around the camera centers keeps the
    // homogeneous system well scaled.
    let centers: Vec<Vector3<f64>> = views.iter().map(|(c, _)| c.extrinsics.center()).collect();
    let c0 = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let spread = centers.iter().map(|c| (c - c0).norm()).sum::<f64>() / centers.len() as f64;
    let s = if spread > 1e-9 { 1.0 / spread } else { 1e-3 };

    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (i, (cam, px)) in views.iter().enumerate() {
        let m = cam.intrinsics.normalize(px);
        let r = cam.extrinsics.rotation();
        let t = cam.extrinsics.translation();
        for (row, coord) in [(0usize, m.x), (1usize, m.y)] {
            // coord * P3 - P_row, with P = [R | t], then composed with the
            // de-normalization X = c0 + X_hat / s.
            let pr = Vector3::new(
                coord * r[(2, 0)] - r[(row, 0)],
                coord * r[(2, 1)] - r[(row, 1)],
                coord * r[(2, 2)] - r[(row, 2)],
            );
            let pt = coord * t.z - t[row];
            let mut line = [pr.x / s, pr.y / s, pr.z / s, pr.dot(&c0) + pt];
            let n = line.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                line.iter_mut().for_each(|x| *x /= n);
            }
            for (j, v) in line.iter().enumerate() {
                a[(2 * i + row, j)] = *v;
            }
        }
    }
    let svd = a.svd(false, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let cond = if sv(2) > 0.0 { sv(0) / sv(2) } else { f64::INFINITY };
    let v_t = match svd.v_t {
        Some(v) => v,
        None => return (None, f64::INFINITY),
    };
    let h = v_t.row(order[3]);
    if h[3].abs() < 1e-15 {
        return (None, f64::INFINITY);
    }
    let x_hat = Vector3::new(h[0], h[1], h[2]) / h[3];
    (Some(c0 + x_hat / s), cond)
}

fn usable<'a>(views: &[ViewObservation<'a>]) -> Vec<ViewObservation<'a>> {
    let mut v: Vec<_> = views.iter().filter(|v| v.observation.visible).copied().collect();
    v.sort_by(|a, b| a.camera.id.cmp(&b.camera.id));
    v
}

/// Triangulates one joint from exactly the given views (all must be usable).
pub fn triangulate_subset(views: &[ViewObservation<'_>], opts: &TriangulationOptions) -> Result<Candidate3D> {
    if views.len() < 2 {
        return Err(TriangulationError::InsufficientViews {
            joint: views.first().map(|v| v.observation.joint).unwrap_or(JointId::Neck),
            got: views.len(),
        });
    }
    let pairs: Vec<(&CameraModel, Vector2<f64>)> = views.iter().map(|v| (v.camera, v.observation.pixel)).collect();
    let (init, cond) = dlt(&pairs);
    if !(cond <= opts.max_condition) {
        return Err(TriangulationError::NearParallelRays(cond));
    }
    let init = init.ok_or(TriangulationError::NearParallelRays(cond))?;
    for (cam, _) in &pairs {
        if cam.extrinsics.to_camera(&init).z <= MIN_DEPTH {
            return Err(TriangulationError::BehindCamera(cam.id.clone()));
        }
    }
    let problem = PointProblem { views: pairs };
    let lsq_opts = LsqOptions {
        max_iterations: opts.max_iterations,
        huber_delta: Some(opts.huber_delta),
        block_size: 2,
        // Converge to well below a micrometre so results are frame independent.
        step_tolerance: 1e-12,
        cost_tolerance: 1e-15,
    };
    let sol = lsq::minimize(&problem, DVector::from_column_slice(init.as_slice()), &lsq_opts).map_err(|e| match e {
        LsqError::NoConvergence { iterations, .. } => TriangulationError::NoConvergence(iterations),
        LsqError::InfeasibleStart => TriangulationError::BehindCamera(views[0].camera.id.clone()),
    })?;
    let position = Vector3::new(sol.params[0], sol.params[1], sol.params[2]);
    let mut total = 0.0;
    for v in views {
        total += reprojection_error(v.camera, &v.observation.pixel, &position)
            .map_err(|_| TriangulationError::BehindCamera(v.camera.id.clone()))?;
    }
    let mut subset: Vec<String> = views.iter().map(|v| v.camera.id.clone()).collect();
    subset.sort();
    Ok(Candidate3D { position, subset, mean_reproj_error: total / views.len() as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSubset {
    pub subset: Vec<String>,
    pub reason: TriangulationError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate3D>,
    pub skipped: Vec<SkippedSubset>,
}

/// Triangulates every subset of two or more usable views. Subsets that fail
/// are skipped and reported.
pub fn enumerate_candidates(views: &[ViewObservation<'_>], opts: &TriangulationOptions) -> Result<CandidateSet> {
    let usable = usable(views);
    if usable.len() < 2 {
        return Err(TriangulationError::InsufficientViews {
            joint: views.first().map(|v| v.observation.joint).unwrap_or(JointId::Neck),
            got: usable.len(),
        });
    }
    assert!(usable.len() < 16, "subset enumeration is exponential in the camera count");
    let n = usable.len();
    let mut masks: Vec<u32> = (1u32..(1 << n)).filter(|m| m.count_ones() >= 2).collect();
    // Pairs first, then larger subsets; lexicographic within a size.
    masks.sort_by_key(|m| (m.count_ones(), m.reverse_bits()));
    let mut out = CandidateSet::default();
    for m in masks {
        let subset: Vec<ViewObservation<'_>> = (0..n).filter(|i| m & (1 << i) != 0).map(|i| usable[i]).collect();
        match triangulate_subset(&subset, opts) {
            Ok(c) => out.candidates.push(c),
            Err(reason) => {
                let ids: Vec<String> = subset.iter().map(|v| v.camera.id.clone()).collect();
                debug!("skipping subset {ids:?} for {}: {reason}", subset[0].observation.joint);
                out.skipped.push(SkippedSubset { subset: ids, reason });
            }
        }
    }
    Ok(out)
}

/// `sum_c rho_c * l_c(x_c, X)` over all usable views; infinite if `X` cannot
/// be projected into one of them.
pub fn weighted_cost(position: &Vector3<f64>, views: &[ViewObservation<'_>]) -> f64 {
    views
        .iter()
        .filter(|v| v.observation.visible)
        .map(|v| match reprojection_error(v.camera, &v.observation.pixel, position) {
            Ok(e) => v.observation.confidence * e,
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// Whether `cost` is within the tie band of `best`.
pub fn ties_with(cost: f64, best: f64) -> bool {
    cost <= best + TIE_ABS_PX + TIE_REL * best.abs()
}

/// Tie-break among equally costly candidates: larger subset, then lower
/// mean error, then lexicographically smaller camera ids.
pub fn tie_break(a: &Candidate3D, b: &Candidate3D) -> Ordering {
    b.subset
        .len()
        .cmp(&a.subset.len())
        .then(a.mean_reproj_error.total_cmp(&b.mean_reproj_error))
        .then_with(|| a.subset.cmp(&b.subset))
}

/// Index of the winning candidate and all weighted costs.
pub fn select_index(candidates: &[Candidate3D], views: &[ViewObservation<'_>]) -> Option<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return None;
    }
    let costs: Vec<f64> = candidates.iter().map(|c| weighted_cost(&c.position, views)).collect();
    let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let winner = (0..candidates.len())
        .filter(|&i| costs[i].is_finite() && ties_with(costs[i], best))
        .min_by(|&i, &j| tie_break(&candidates[i], &candidates[j]))
        .unwrap_or(0);
    Some((winner, costs))
}

pub fn select_best(
    joint: JointId,
    timestep: u64,
    candidates: &[Candidate3D],
    views: &[ViewObservation<'_>],
    opts: &TriangulationOptions,
) -> Result<ScoredKeypoint3D> {
    let (winner, _) = select_index(candidates, views).ok_or(TriangulationError::NoCandidates)?;
    let c = &candidates[winner];
    let in_subset: Vec<&ViewObservation<'_>> = views
        .iter()
        .filter(|v| v.observation.visible && c.subset.binary_search(&v.camera.id).is_ok())
        .collect();
    let n = in_subset.len().max(1) as f64;
    let rho = in_subset.iter().map(|v| v.observation.confidence).sum::<f64>() / n;
    let vis = in_subset.iter().map(|v| v.observation.visibility()).sum::<f64>() / n;
    Ok(ScoredKeypoint3D {
        joint,
        timestep,
        position: c.position,
        score: ScoreVector { rho, vis, inv_err: 1.0 / c.mean_reproj_error.max(opts.reproj_floor) },
        winning_subset: c.subset.clone(),
    })
}

/// Both stages for one joint.
pub fn triangulate_joint(
    joint: JointId,
    timestep: u64,
    views: &[ViewObservation<'_>],
    opts: &TriangulationOptions,
) -> Result<ScoredKeypoint3D> {
    let set = enumerate_candidates(views, opts).map_err(|e| match e {
        TriangulationError::InsufficientViews { got, .. } => TriangulationError::InsufficientViews { joint, got },
        other => other,
    })?;
    select_best(joint, timestep, &set.candidates, views, opts)
}

/// Gathers the views of `joint` across per-camera frames. Frames whose camera
/// is not in `cameras` are ignored.
pub fn views_for_joint<'a>(
    joint: JointId,
    frames: &[FrameObservations],
    cameras: &'a [CameraModel],
) -> Vec<ViewObservation<'a>> {
    frames
        .iter()
        .filter_map(|f| {
            let cam = cameras.iter().find(|c| c.id == f.camera_id)?;
            let obs = f.get(joint)?;
            Some(ViewObservation { camera: cam, observation: *obs })
        })
        .collect()
}

/// Triangulates all 15 joints of one timestep in parallel, in joint order.
pub fn triangulate_frame(
    frames: &[FrameObservations],
    cameras: &[CameraModel],
    opts: &TriangulationOptions,
) -> Vec<Result<ScoredKeypoint3D>> {
    let timestep = frames.first().map(|f| f.timestep).unwrap_or(0);
    par::map(&JointId::ALL, |&joint| {
        let views = views_for_joint(joint, frames, cameras);
        triangulate_joint(joint, timestep, &views, opts)
    })
}
