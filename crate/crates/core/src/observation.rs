//! 2D keypoint observations and the seeded oracle detector that synthesizes
//! them from ground-truth joints.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraModel, MIN_DEPTH};
use crate::primitives::Primitive;

/// Length scale of the confidence decay, pixels.
pub const CONFIDENCE_SCALE_PX: f64 = 10.0;
/// Confidence multiplier applied to occluded detections.
pub const OCCLUDED_CONFIDENCE_FACTOR: f64 = 0.2;

/// The 15 tracked body joints, with a stable 0..=14 encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointId {
    RAnkle = 0,
    RKnee = 1,
    RHip = 2,
    LHip = 3,
    LKnee = 4,
    LAnkle = 5,
    RWrist = 6,
    RElbow = 7,
    RShoulder = 8,
    LShoulder = 9,
    LElbow = 10,
    LWrist = 11,
    Neck = 12,
    HeadTop = 13,
    Nose = 14,
}

pub const NUM_JOINTS: usize = 15;

impl JointId {
    pub const ALL: [JointId; NUM_JOINTS] = [
        JointId::RAnkle,
        JointId::RKnee,
        JointId::RHip,
        JointId::LHip,
        JointId::LKnee,
        JointId::LAnkle,
        JointId::RWrist,
        JointId::RElbow,
        JointId::RShoulder,
        JointId::LShoulder,
        JointId::LElbow,
        JointId::LWrist,
        JointId::Neck,
        JointId::HeadTop,
        JointId::Nose,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<JointId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            JointId::RAnkle => "R.Ankle",
            JointId::RKnee => "R.Knee",
            JointId::RHip => "R.Hip",
            JointId::LHip => "L.Hip",
            JointId::LKnee => "L.Knee",
            JointId::LAnkle => "L.Ankle",
            JointId::RWrist => "R.Wrist",
            JointId::RElbow => "R.Elbow",
            JointId::RShoulder => "R.Shoulder",
            JointId::LShoulder => "L.Shoulder",
            JointId::LElbow => "L.Elbow",
            JointId::LWrist => "L.Wrist",
            JointId::Neck => "Neck",
            JointId::HeadTop => "HeadTop",
            JointId::Nose => "Nose",
        }
    }
}

impl std::fmt::Display for JointId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth or estimated positions for all 15 joints, indexed by [`JointId::index`].
pub type JointPositions = [Vector3<f64>; NUM_JOINTS];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservationError {
    #[error("duplicate observation for joint {0}")]
    DuplicateJoint(JointId),
    #[error("invalid observation for joint {joint}: {msg}")]
    Invalid { joint: JointId, msg: String },
    #[error("invalid noise configuration: {0}")]
    InvalidNoise(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation2D {
    pub joint: JointId,
    pub pixel: Vector2<f64>,
    /// Detector confidence in [0, 1].
    pub confidence: f64,
    /// Whether the joint was predicted inside the camera frame.
    pub visible: bool,
}

impl Observation2D {
    pub fn new(joint: JointId, pixel: Vector2<f64>, confidence: f64, visible: bool) -> Result<Self, ObservationError> {
        let o = Self { joint, pixel, confidence, visible };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<(), ObservationError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ObservationError::Invalid { joint: self.joint, msg: format!("confidence {}", self.confidence) });
        }
        if !self.pixel.iter().all(|x| x.is_finite()) {
            return Err(ObservationError::Invalid { joint: self.joint, msg: "non-finite pixel".into() });
        }
        Ok(())
    }

    /// Visibility as a number in {0, 1}.
    pub fn visibility(&self) -> f64 {
        if self.visible {
            1.0
        } else {
            0.0
        }
    }
}

/// All detections of one camera at one timestep; at most one per joint,
/// kept sorted by joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservations {
    pub camera_id: String,
    pub timestep: u64,
    observations: Vec<Observation2D>,
}

impl FrameObservations {
    pub fn new(camera_id: impl Into<String>, timestep: u64) -> Self {
        Self { camera_id: camera_id.into(), timestep, observations: Vec::new() }
    }

    pub fn insert(&mut self, obs: Observation2D) -> Result<(), ObservationError> {
        obs.validate()?;
        match self.observations.binary_search_by_key(&obs.joint, |o| o.joint) {
            Ok(_) => Err(ObservationError::DuplicateJoint(obs.joint)),
            Err(pos) => {
                self.observations.insert(pos, obs);
                Ok(())
            }
        }
    }

    pub fn get(&self, joint: JointId) -> Option<&Observation2D> {
        self.observations
            .binary_search_by_key(&joint, |o| o.joint)
            .ok()
            .map(|i| &self.observations[i])
    }

    pub fn observations(&self) -> &[Observation2D] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Knobs of the oracle detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Per-axis Gaussian pixel noise, px.
    pub pixel_sigma: f64,
    /// Probability of dropping an occluded or out-of-frame joint.
    pub dropout_prob: f64,
    /// Probability of replacing the noise with a gross offset.
    pub outlier_prob: f64,
    /// Length of the gross offset, px.
    pub outlier_magnitude: f64,
    /// Extra per-axis noise on occluded joints, px.
    pub occlusion_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 2.0,
            dropout_prob: 0.5,
            outlier_prob: 0.0,
            outlier_magnitude: 50.0,
            occlusion_sigma: 20.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self { pixel_sigma: 0.0, dropout_prob: 0.0, outlier_prob: 0.0, occlusion_sigma: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ObservationError> {
        let p = |x: f64| (0.0..=1.0).contains(&x);
        if !p(self.dropout_prob) || !p(self.outlier_prob) {
            return Err(ObservationError::InvalidNoise("probabilities must lie in [0, 1]".into()));
        }
        if !(self.pixel_sigma >= 0.0 && self.occlusion_sigma >= 0.0 && self.outlier_magnitude >= 0.0) {
            return Err(ObservationError::InvalidNoise("sigmas and magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// Confidence and visibility assigned to a detection.
///
/// `rho = exp(-|emitted - exact| / 10 px)`, scaled by 0.2 when occluded;
/// `v = 1` iff the joint projects inside the frame.
pub fn score_model(exact: &Vector2<f64>, emitted: &Vector2<f64>, occluded: bool, in_frame: bool) -> (f64, bool) {
    let err = (emitted - exact).norm();
    let mut rho = (-err / CONFIDENCE_SCALE_PX).exp().clamp(0.0, 1.0);
    if occluded {
        rho *= OCCLUDED_CONFIDENCE_FACTOR;
    }
    (rho, in_frame)
}

/// FNV-1a, used to derive per-camera RNG streams stably across platforms.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent, reproducible RNG stream for (seed, stream label, index).
pub fn stream_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ fnv1a(label)) ^ index))
}

/// Synthesizes the detections a camera would report for the given joints.
///
/// Joints blocked by an occluder get extra jitter and a reduced confidence;
/// occluded or out-of-frame joints are dropped with `dropout_prob`. Joints
/// behind the camera are never reported. The output depends only on the
/// inputs and `noise.seed`.
pub fn synth_detect(
    joints: &JointPositions,
    camera: &CameraModel,
    occluders: &[Primitive],
    noise: &NoiseConfig,
    timestep: u64,
) -> FrameObservations {
    let mut rng = stream_rng(noise.seed, &camera.id, timestep);
    let mut frame = FrameObservations::new(camera.id.clone(), timestep);
    let center = camera.extrinsics.center();
    for joint in JointId::ALL {
        // Draw a fixed number of variates per joint so streams stay aligned
        // whatever branch is taken.
        let g: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let u_outlier: f64 = rng.random();
        let angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let u_drop: f64 = rng.random();

        let p = joints[joint.index()];
        if camera.extrinsics.to_camera(&p).z <= MIN_DEPTH {
            continue;
        }
        let exact = project(camera, &p).expect("depth checked above");
        let in_frame = camera.intrinsics.contains(&exact);
        let occluded = occluders.iter().any(|o| o.blocks_segment(&center, &p, 1.0));
        if (!in_frame || occluded) && u_drop < noise.dropout_prob {
            continue;
        }
        let mut offset = if u_outlier < noise.outlier_prob {
            Vector2::new(angle.cos(), angle.sin()) * noise.outlier_magnitude
        } else {
            Vector2::new(g[0], g[1]) * noise.pixel_sigma
        };
        if occluded {
            offset += Vector2::new(g[2], g[3]) * noise.occlusion_sigma;
        }
        let emitted = exact + offset;
        let (rho, visible) = score_model(&exact, &emitted, occluded, in_frame);
        frame
            .insert(Observation2D { joint, pixel: emitted, confidence: rho, visible })
            .expect("one observation per joint");
    }
    frame
}

/// Anything that can produce per-camera keypoint detections for a timestep.
/// The oracle below is the only implementation shipped; a learned detector
/// would plug in here.
pub trait KeypointSource: Sync {
    fn observe(&self, camera: &CameraModel, timestep: u64) -> FrameObservations;
}

/// [`synth_detect`] bound to fixed ground truth and occluders.
#[derive(Debug, Clone)]
pub struct OracleDetector<'a> {
    pub joints: JointPositions,
    pub occluders: &'a [Primitive],
    pub noise: NoiseConfig,
}

impl KeypointSource for OracleDetector<'_> {
    fn observe(&self, camera: &CameraModel, timestep: u64) -> FrameObservations {
        synth_detect(&self.joints, camera, self.occluders, &self.noise, timestep)
    }
}
