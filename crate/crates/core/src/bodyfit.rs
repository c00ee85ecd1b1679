//! Articulated skeleton fitting and anatomical target localization.
//!
//! The body is a 15-joint tree rooted at the neck. Each bone has a rest
//! direction in the body frame (+x toward the head, +y toward the patient's
//! right, +z anterior), a default length and a per-bone scale. Joints with
//! children carry a local rotation. Fitting is a score-weighted nonlinear
//! least-squares problem over root pose, bone scales and joint rotations.

use nalgebra::{DVector, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lsq::{self, LsqOptions, Residuals};
use crate::observation::{JointId, JointPositions, NUM_JOINTS};
use crate::primitives::scaled_axis;
use crate::triangulation::ScoredKeypoint3D;

pub const ROOT: JointId = JointId::Neck;
pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyFitError {
    #[error("{have} usable keypoints, fitting needs {need}")]
    InsufficientKeypoints { have: usize, need: usize },
    #[error("keypoint for {0} given twice")]
    DuplicateJoint(JointId),
    #[error("body fit did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("invalid skeleton template: {0}")]
    InvalidTemplate(String),
    #[error("defining joints of {0:?} are coincident")]
    FrameDegenerate(TargetName),
}

pub type Result<T> = std::result::Result<T, BodyFitError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub parent: JointId,
    pub child: JointId,
    /// Unit direction in the parent's frame at rest.
    pub rest_direction: Vector3<f64>,
    /// mm.
    pub length: f64,
}

/// Bones listed parents-first, so one pass computes forward kinematics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTemplate {
    pub bones: Vec<Bone>,
}

impl Default for SkeletonTemplate {
    /// Adult supine pose, arms alongside the body.
    fn default() -> Self {
        use JointId::*;
        let b = |parent, child, d: [f64; 3], length| Bone {
            parent,
            child,
            rest_direction: Vector3::from(d).normalize(),
            length,
        };
        Self {
            bones: vec![
                b(Neck, Nose, [0.6, 0.0, 0.8], 130.0),
                b(Neck, HeadTop, [1.0, 0.0, 0.1], 220.0),
                b(Neck, RShoulder, [-0.1, 1.0, 0.0], 180.0),
                b(RShoulder, RElbow, [-1.0, 0.0, 0.0], 290.0),
                b(RElbow, RWrist, [-1.0, 0.0, 0.0], 260.0),
                b(Neck, LShoulder, [-0.1, -1.0, 0.0], 180.0),
                b(LShoulder, LElbow, [-1.0, 0.0, 0.0], 290.0),
                b(LElbow, LWrist, [-1.0, 0.0, 0.0], 260.0),
                b(Neck, RHip, [-1.0, 0.18, 0.0], 520.0),
                b(RHip, RKnee, [-1.0, 0.0, 0.0], 430.0),
                b(RKnee, RAnkle, [-1.0, 0.0, 0.0], 410.0),
                b(Neck, LHip, [-1.0, -0.18, 0.0], 520.0),
                b(LHip, LKnee, [-1.0, 0.0, 0.0], 430.0),
                b(LKnee, LAnkle, [-1.0, 0.0, 0.0], 410.0),
            ],
        }
    }
}

/// Left/right counterpart of a joint.
pub fn mirror(j: JointId) -> JointId {
    use JointId::*;
    match j {
        RAnkle => LAnkle,
        RKnee => LKnee,
        RHip => LHip,
        LHip => RHip,
        LKnee => RKnee,
        LAnkle => RAnkle,
        RWrist => LWrist,
        RElbow => LElbow,
        RShoulder => LShoulder,
        LShoulder => RShoulder,
        LElbow => RElbow,
        LWrist => RWrist,
        other => other,
    }
}

impl SkeletonTemplate {
    pub fn validate(&self) -> Result<()> {
        let mut placed = [false; NUM_JOINTS];
        placed[ROOT.index()] = true;
        for bone in &self.bones {
            if !placed[bone.parent.index()] {
                return Err(BodyFitError::InvalidTemplate(format!(
                    "bone to {} listed before its parent {}",
                    bone.child, bone.parent
                )));
            }
            if placed[bone.child.index()] {
                return Err(BodyFitError::InvalidTemplate(format!("{} reached twice", bone.child)));
            }
            if (bone.rest_direction.norm() - 1.0).abs() > 1e-9 {
                return Err(BodyFitError::InvalidTemplate(format!("rest direction to {} not unit", bone.child)));
            }
            if !(bone.length > 0.0 && bone.length.is_finite()) {
                return Err(BodyFitError::InvalidTemplate(format!("bone to {} has length {}", bone.child, bone.length)));
            }
            placed[bone.child.index()] = true;
        }
        if let Some(i) = placed.iter().position(|p| !p) {
            return Err(BodyFitError::InvalidTemplate(format!("{} not reached", JointId::ALL[i])));
        }
        Ok(())
    }

    pub fn bone_index(&self, child: JointId) -> Option<usize> {
        self.bones.iter().position(|b| b.child == child)
    }

    /// Joints whose rotation moves at least one bone. The root's own rotation
    /// duplicates `root_orientation` and is excluded.
    pub fn articulated_joints(&self) -> Vec<JointId> {
        let mut out: Vec<JointId> = Vec::new();
        for b in &self.bones {
            if b.parent != ROOT && !out.contains(&b.parent) {
                out.push(b.parent);
            }
        }
        out
    }

    /// Rest-pose joint positions in the body frame with the root at the origin.
    pub fn rest_pose(&self) -> JointPositions {
        forward_kinematics(self, &BodyParams::rest(self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    /// Neck position, mm.
    pub root_position: Vector3<f64>,
    /// Body frame to room frame, serialized as a scaled rotation axis.
    #[serde(with = "scaled_axis")]
    pub root_orientation: Rotation3<f64>,
    /// One per template bone, in template order.
    pub bone_scales: Vec<f64>,
    /// Axis-angle (radians) per joint, indexed by joint id.
    pub joint_rotations: [Vector3<f64>; NUM_JOINTS],
}

impl BodyParams {
    pub fn rest(template: &SkeletonTemplate) -> Self {
        Self {
            root_position: Vector3::zeros(),
            root_orientation: Rotation3::identity(),
            bone_scales: vec![1.0; template.bones.len()],
            joint_rotations: [Vector3::zeros(); NUM_JOINTS],
        }
    }

    /// Applies a rigid room-frame motion to the whole body.
    pub fn transformed(&self, rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> Self {
        Self {
            root_position: rotation * self.root_position + translation,
            root_orientation: rotation * self.root_orientation,
            ..self.clone()
        }
    }
}

pub fn forward_kinematics(template: &SkeletonTemplate, params: &BodyParams) -> JointPositions {
    let mut pos = [Vector3::zeros(); NUM_JOINTS];
    let mut frame = [Matrix3::identity(); NUM_JOINTS];
    pos[ROOT.index()] = params.root_position;
    frame[ROOT.index()] = *params.root_orientation.matrix();
    for (i, bone) in template.bones.iter().enumerate() {
        let (p, c) = (bone.parent.index(), bone.child.index());
        let scale = params.bone_scales.get(i).copied().unwrap_or(1.0);
        pos[c] = pos[p] + frame[p] * bone.rest_direction * (scale * bone.length);
        frame[c] = frame[p] * Rotation3::new(params.joint_rotations[c]).matrix();
    }
    pos
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Keypoints with `rho * v` below this are ignored.
    pub score_floor: f64,
    pub min_joints: usize,
    pub max_iterations: usize,
    /// Residual weight per radian of joint rotation, mm/rad.
    pub rotation_prior: f64,
    /// Residual weight per unit of scale deviation from 1, mm.
    pub scale_prior: f64,
    /// Residual weight per unit of left/right scale difference, mm.
    pub symmetry_prior: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            score_floor: 0.05,
            min_joints: 8,
            max_iterations: 200,
            rotation_prior: 1.0,
            scale_prior: 5.0,
            symmetry_prior: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyFit {
    pub params: BodyParams,
    /// Unweighted RMS distance between fitted and input joints, mm.
    pub rms_error: f64,
    pub joints_used: Vec<JointId>,
    pub iterations: usize,
}

struct FitProblem<'a> {
    template: &'a SkeletonTemplate,
    targets: Vec<(usize, Vector3<f64>, f64)>,
    articulated: Vec<JointId>,
    symmetric: Vec<(usize, usize)>,
    base_orientation: Rotation3<f64>,
    opts: FitOptions,
}

impl FitProblem<'_> {
    fn decode(&self, x: &DVector<f64>) -> BodyParams {
        let nb = self.template.bones.len();
        let mut joint_rotations = [Vector3::zeros(); NUM_JOINTS];
        for (k, j) in self.articulated.iter().enumerate() {
            joint_rotations[j.index()] = x.fixed_rows::<3>(6 + nb + 3 * k).into_owned();
        }
        BodyParams {
            root_position: x.fixed_rows::<3>(0).into_owned(),
            root_orientation: Rotation3::new(x.fixed_rows::<3>(3).into_owned()) * self.base_orientation,
            bone_scales: x.rows(6, nb).iter().copied().collect(),
            joint_rotations,
        }
    }
}

impl Residuals for FitProblem<'_> {
    fn num_params(&self) -> usize {
        6 + self.template.bones.len() + 3 * self.articulated.len()
    }

    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let params = self.decode(x);
        let fk = forward_kinematics(self.template, &params);
        let nb = self.template.bones.len();
        let mut r = Vec::with_capacity(3 * self.targets.len() + 3 * self.articulated.len() + nb + self.symmetric.len());
        for (j, target, w) in &self.targets {
            r.extend((fk[*j] - target).iter().map(|d| w.sqrt() * d));
        }
        for k in 0..self.articulated.len() {
            r.extend(x.fixed_rows::<3>(6 + nb + 3 * k).iter().map(|a| self.opts.rotation_prior * a));
        }
        for s in &params.bone_scales {
            r.push(self.opts.scale_prior * (s - 1.0));
        }
        for (a, b) in &self.symmetric {
            r.push(self.opts.symmetry_prior * (params.bone_scales[*a] - params.bone_scales[*b]));
        }
        Some(DVector::from_vec(r))
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 6..6 + self.template.bones.len() {
            x[i] = x[i].clamp(MIN_SCALE, MAX_SCALE);
        }
    }
}

/// Least-squares rigid alignment `q ≈ R p + t`; falls back to identity
/// rotation when the source points are collinear.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Rotation3<f64>, Vector3<f64>) {
    let n = src.len().max(1) as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let h: Matrix3<f64> = src.iter().zip(dst).map(|(p, q)| (q - cd) * (p - cs).transpose()).sum();
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return (Rotation3::identity(), cd - cs);
    };
    let sv = svd.singular_values;
    if sv.max() <= 0.0 || sv.iter().filter(|s| **s > 1e-9 * sv.max()).count() < 2 {
        return (Rotation3::identity(), cd - cs);
    }
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    let rot = Rotation3::from_matrix_unchecked(r);
    (rot, cd - rot * cs)
}

/// Fits the template to consolidated keypoints. Input order does not matter;
/// each joint may appear at most once.
pub fn fit_body(keypoints: &[ScoredKeypoint3D], template: &SkeletonTemplate, opts: &FitOptions) -> Result<BodyFit> {
    template.validate()?;
    let mut seen = [false; NUM_JOINTS];
    let mut targets = Vec::new();
    for k in keypoints {
        let j = k.joint.index();
        if seen[j] {
            return Err(BodyFitError::DuplicateJoint(k.joint));
        }
        seen[j] = true;
        if k.score.rho * k.score.vis >= opts.score_floor && k.position.iter().all(|v| v.is_finite()) {
            targets.push((j, k.position, k.score.rho));
        }
    }
    targets.sort_by_key(|t| t.0);
    if targets.len() < opts.min_joints.max(3) {
        return Err(BodyFitError::InsufficientKeypoints { have: targets.len(), need: opts.min_joints.max(3) });
    }

    // Rigid initialization from the torso, which does not articulate.
    let rest = template.rest_pose();
    let rigid: Vec<JointId> = template.bones.iter().filter(|b| b.parent == ROOT).map(|b| b.child).chain([ROOT]).collect();
    let mut init: Vec<_> = targets.iter().filter(|t| rigid.contains(&JointId::ALL[t.0])).collect();
    if init.len() < 3 {
        init = targets.iter().collect();
    }
    let src: Vec<_> = init.iter().map(|t| rest[t.0]).collect();
    let dst: Vec<_> = init.iter().map(|t| t.1).collect();
    let (rot0, trans0) = kabsch(&src, &dst);

    let symmetric = template
        .bones
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            let m = mirror(b.child);
            (m != b.child && b.child.name().starts_with('R')).then(|| template.bone_index(m).map(|k| (i, k)))?
        })
        .collect();
    let problem = FitProblem {
        template,
        targets,
        articulated: template.articulated_joints(),
        symmetric,
        base_orientation: rot0,
        opts: *opts,
    };
    let mut x0 = DVector::zeros(problem.num_params());
    x0.fixed_rows_mut::<3>(0).copy_from(&trans0);
    x0.rows_mut(6, template.bones.len()).fill(1.0);
    let lsq_opts = LsqOptions { max_iterations: opts.max_iterations, ..Default::default() };
    let sol = lsq::minimize(&problem, x0, &lsq_opts).map_err(|e| match e {
        lsq::LsqError::NoConvergence { iterations, .. } => BodyFitError::NoConvergence(iterations),
        lsq::LsqError::InfeasibleStart => BodyFitError::NoConvergence(0),
    })?;
    let params = problem.decode(&sol.params);
    let fk = forward_kinematics(template, &params);
    let sq: f64 = problem.targets.iter().map(|(j, p, _)| (fk[*j] - p).norm_squared()).sum();
    Ok(BodyFit {
        rms_error: (sq / problem.targets.len() as f64).sqrt(),
        joints_used: problem.targets.iter().map(|t| JointId::ALL[t.0]).collect(),
        params,
        iterations: sol.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetName {
    HeadTop,
    RightRadialArtery,
    LeftRadialArtery,
    RightFemoralArtery,
    LeftFemoralArtery,
}

impl TargetName {
    pub const ALL: [TargetName; 5] = [
        TargetName::HeadTop,
        TargetName::RightRadialArtery,
        TargetName::LeftRadialArtery,
        TargetName::RightFemoralArtery,
        TargetName::LeftFemoralArtery,
    ];
}

/// A point fixed in a local frame built from one or two joints.
///
/// With one joint the frame is the body frame. With two joints `[a, b]` the
/// origin is `b`, x points from `a` to `b`, y is the patient's right made
/// orthogonal to x (anterior if that degenerates) and z = x × y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnatomicalTarget {
    pub name: TargetName,
    pub defining_joints: Vec<JointId>,
    /// mm, in the local frame.
    pub offset: Vector3<f64>,
}

impl AnatomicalTarget {
    pub fn preset(name: TargetName) -> Self {
        use JointId::*;
        let (defining_joints, offset) = match name {
            TargetName::HeadTop => (vec![HeadTop], Vector3::zeros()),
            // 20 mm proximal of the wrist along the forearm.
            TargetName::RightRadialArtery => (vec![RElbow, RWrist], Vector3::new(-20.0, 0.0, 0.0)),
            TargetName::LeftRadialArtery => (vec![LElbow, LWrist], Vector3::new(-20.0, 0.0, 0.0)),
            // Below the inguinal ligament: distal, medial and anterior of the hip.
            TargetName::RightFemoralArtery => (vec![RKnee, RHip], Vector3::new(-40.0, -20.0, 30.0)),
            TargetName::LeftFemoralArtery => (vec![LKnee, LHip], Vector3::new(-40.0, 20.0, 30.0)),
        };
        Self { name, defining_joints, offset }
    }
}

pub fn locate_target(params: &BodyParams, template: &SkeletonTemplate, target: &AnatomicalTarget) -> Result<Vector3<f64>> {
    let fk = forward_kinematics(template, params);
    locate_in(&fk, &params.root_orientation, target)
}

/// [`locate_target`] from known joint positions and body orientation.
pub fn locate_in(joints: &JointPositions, body: &Rotation3<f64>, target: &AnatomicalTarget) -> Result<Vector3<f64>> {
    let degenerate = BodyFitError::FrameDegenerate(target.name);
    match target.defining_joints.as_slice() {
        [j] => Ok(joints[j.index()] + body * target.offset),
        [a, b, ..] => {
            let origin = joints[b.index()];
            let axis = origin - joints[a.index()];
            if axis.norm() < 1e-6 {
                return Err(degenerate);
            }
            let x = axis.normalize();
            let mut y = Vector3::zeros();
            for hint in [body * Vector3::y(), body * Vector3::z()] {
                let v = hint - x * hint.dot(&x);
                if v.norm() > 1e-6 {
                    y = v.normalize();
                    break;
                }
            }
            let z = x.cross(&y);
            Ok(origin + Matrix3::from_columns(&[x, y, z]) * target.offset)
        }
        [] => Err(degenerate),
    }
}

/// Horizontal-plane distance, mm.
pub fn positioning_error(predicted: &Vector3<f64>, ground_truth: &Vector3<f64>) -> f64 {
    (predicted.xy() - ground_truth.xy()).norm()
}
