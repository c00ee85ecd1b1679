//! Evaluation metrics: MPJPE, torso-normalized PCK, collision detection
//! precision/recall, success rate and timing statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::SVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observation::JointId;

/// Positioning success bar, mm.
pub const SUCCESS_THRESHOLD_MM: f64 = 25.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no prediction matches any ground truth")]
    NoMatches,
    #[error("frame {0} lacks a shoulder/hip pair for the torso length")]
    MissingNormalizerJoints(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Identifies one pose: a timestep seen from a camera (or "3d").
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameKey {
    pub timestep: u64,
    pub view: String,
}

impl std::fmt::Display for FrameKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.view, self.timestep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame<const D: usize> {
    pub key: FrameKey,
    pub joints: BTreeMap<JointId, SVector<f64, D>>,
}

pub type PoseFrame2D = PoseFrame<2>;
pub type PoseFrame3D = PoseFrame<3>;

fn index<const D: usize>(frames: &[PoseFrame<D>]) -> BTreeMap<&FrameKey, &PoseFrame<D>> {
    frames.iter().map(|f| (&f.key, f)).collect()
}

/// Mean Euclidean error over joints present in both a prediction and the
/// ground truth with the same frame key. Pixels for 2D frames.
pub fn mpjpe<const D: usize>(preds: &[PoseFrame<D>], gts: &[PoseFrame<D>]) -> Result<f64> {
    let gt = index(gts);
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in preds {
        let Some(g) = gt.get(&p.key) else { continue };
        for (j, x) in &p.joints {
            if let Some(y) = g.joints.get(j) {
                sum += (x - y).norm();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::NoMatches);
    }
    Ok(sum / n as f64)
}

pub fn mpjpe_2d(preds: &[PoseFrame2D], gts: &[PoseFrame2D]) -> Result<f64> {
    mpjpe(preds, gts)
}

/// Pixel error converted with an explicit scene scale.
pub fn px_to_mm(px: f64, mm_per_px: f64) -> f64 {
    px * mm_per_px
}

/// Mean shoulder-to-hip distance over the sides where both are present.
pub fn torso_length<const D: usize>(frame: &PoseFrame<D>) -> Option<f64> {
    let side = |s: JointId, h: JointId| Some((frame.joints.get(&s)? - frame.joints.get(&h)?).norm());
    let sides: Vec<f64> = [side(JointId::RShoulder, JointId::RHip), side(JointId::LShoulder, JointId::LHip)]
        .into_iter()
        .flatten()
        .collect();
    (!sides.is_empty()).then(|| sides.iter().sum::<f64>() / sides.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub fraction: f64,
    /// Percent correct per joint.
    pub per_joint: BTreeMap<JointId, f64>,
    /// Mean of the per-joint percentages.
    pub mean: f64,
}

/// Percentage of ground-truth joints predicted within `fraction` of the
/// torso length. A ground-truth joint without a prediction counts as wrong.
pub fn pck<const D: usize>(preds: &[PoseFrame<D>], gts: &[PoseFrame<D>], fraction: f64) -> Result<PckResult> {
    let pred = index(preds);
    let mut hits: BTreeMap<JointId, (usize, usize)> = BTreeMap::new();
    for g in gts {
        let torso = torso_length(g).ok_or_else(|| MetricsError::MissingNormalizerJoints(g.key.to_string()))?;
        let p = pred.get(&g.key);
        for (j, y) in &g.joints {
            let ok = p.and_then(|p| p.joints.get(j)).is_some_and(|x| (x - y).norm() < fraction * torso);
            let e = hits.entry(*j).or_default();
            e.0 += ok as usize;
            e.1 += 1;
        }
    }
    if hits.is_empty() {
        return Err(MetricsError::NoMatches);
    }
    let per_joint: BTreeMap<JointId, f64> = hits.into_iter().map(|(j, (ok, n))| (j, 100.0 * ok as f64 / n as f64)).collect();
    let mean = per_joint.values().sum::<f64>() / per_joint.len() as f64;
    Ok(PckResult { fraction, per_joint, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdpResult {
    /// Percent of predicted cells confirmed by the oracle.
    pub precision: f64,
    /// Percent of oracle cells that were predicted.
    pub recall: f64,
    pub predicted: usize,
    pub oracle: usize,
    pub true_positives: usize,
}

/// Collision detection precision and recall over `(step, voxel)` cells.
/// Both empty counts as perfect; an empty prediction against a non-empty
/// oracle has zero precision.
pub fn cdp<T: Ord>(predicted: &BTreeSet<T>, oracle: &BTreeSet<T>) -> CdpResult {
    let tp = predicted.intersection(oracle).count();
    let pct = |num: usize, den: usize, empty: f64| if den == 0 { empty } else { 100.0 * num as f64 / den as f64 };
    let both_empty = predicted.is_empty() && oracle.is_empty();
    CdpResult {
        precision: pct(tp, predicted.len(), if both_empty { 100.0 } else { 0.0 }),
        recall: pct(tp, oracle.len(), 100.0),
        predicted: predicted.len(),
        oracle: oracle.len(),
        true_positives: tp,
    }
}

/// Percent of errors under `threshold`.
pub fn success_rate(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|e| **e < threshold).count() as f64 / errors.len() as f64
}

/// Runs `f` and returns its result with the elapsed wall time in seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub runs: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub max_s: f64,
    /// Coefficient of variation, std / mean.
    pub cv: f64,
}

pub fn timing_stats(samples: &[f64]) -> Option<TimingStats> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 { samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let std = var.sqrt();
    Some(TimingStats {
        runs: samples.len(),
        mean_s: mean,
        std_s: std,
        max_s: samples.iter().copied().fold(0.0, f64::max),
        cv: if mean > 0.0 { std / mean } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: String,
    pub frames: usize,
    pub mean_error_mm: f64,
    pub max_error_mm: f64,
    /// Percent of frames under the success threshold.
    pub success_rate: f64,
}

impl TargetSummary {
    pub fn from_errors(target: impl Into<String>, errors: &[f64]) -> Self {
        let n = errors.len();
        Self {
            target: target.into(),
            frames: n,
            mean_error_mm: if n > 0 { errors.iter().sum::<f64>() / n as f64 } else { f64::NAN },
            max_error_mm: errors.iter().copied().fold(0.0, f64::max),
            success_rate: success_rate(errors, SUCCESS_THRESHOLD_MM),
        }
    }
}

/// Flat metric rows for spreadsheet import.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<(String, f64)>,
}

impl MetricsTable {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.rows.push((name.into(), value));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector2, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn frame2(t: u64, pts: &[(JointId, [f64; 2])]) -> PoseFrame2D {
        PoseFrame { key: FrameKey { timestep: t, view: "cam1".into() }, joints: pts.iter().map(|(j, p)| (*j, Vector2::from(*p))).collect() }
    }

    fn body3(offset: Vector3<f64>) -> PoseFrame3D {
        let joints = JointId::ALL
            .iter()
            .map(|j| (*j, Vector3::new(-100.0 * j.index() as f64, if j.name().starts_with('R') { 150.0 } else { -150.0 }, 0.0) + offset))
            .collect();
        PoseFrame { key: FrameKey { timestep: 0, view: "3d".into() }, joints }
    }

    #[test]
    fn mpjpe_examples() {
        let g = vec![frame2(0, &[(JointId::Neck, [10.0, 10.0]), (JointId::Nose, [20.0, 5.0])])];
        assert_eq!(mpjpe_2d(&g, &g).unwrap(), 0.0);
        let p = vec![frame2(0, &[(JointId::Neck, [13.0, 14.0]), (JointId::Nose, [23.0, 9.0])])];
        assert_eq!(mpjpe_2d(&p, &g).unwrap(), 5.0);
        assert_eq!(px_to_mm(5.0, 2.0), 10.0);
        let other = vec![frame2(1, &[(JointId::Neck, [0.0, 0.0])])];
        assert_eq!(mpjpe_2d(&other, &g), Err(MetricsError::NoMatches));
    }

    #[test]
    fn rayleigh_mean_of_gaussian_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 2.0;
        let gt = vec![frame2(0, &[(JointId::Neck, [0.0, 0.0])])];
        let mut total = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let d: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            total += mpjpe_2d(&[frame2(0, &[(JointId::Neck, [sigma * d[0], sigma * d[1]])])], &gt).unwrap();
        }
        let expect = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!((total / n as f64 - expect).abs() < 0.03, "{}", total / n as f64);
    }

    #[test]
    fn pck_threshold_semantics() {
        let gt = body3(Vector3::zeros());
        let torso = torso_length(&gt).unwrap();
        assert_eq!(pck(std::slice::from_ref(&gt), std::slice::from_ref(&gt), 0.1).unwrap().mean, 100.0);
        let shifted = body3(Vector3::new(0.2 * torso, 0.0, 0.0));
        assert_eq!(pck(std::slice::from_ref(&shifted), std::slice::from_ref(&gt), 0.1).unwrap().mean, 0.0);
        assert_eq!(pck(std::slice::from_ref(&shifted), std::slice::from_ref(&gt), 0.3).unwrap().mean, 100.0);
        let mut headless = gt.clone();
        headless.joints.retain(|j, _| !matches!(j, JointId::RHip | JointId::LHip));
        assert!(matches!(pck(std::slice::from_ref(&gt), &[headless], 0.1), Err(MetricsError::MissingNormalizerJoints(_))));
        let mut missing = gt.clone();
        missing.joints.remove(&JointId::Nose);
        let r = pck(&[missing], &[gt], 0.1).unwrap();
        assert_eq!(r.per_joint[&JointId::Nose], 0.0);
        assert!((r.mean - 1400.0 / 15.0).abs() < 1e-9);
    }

    #[test]
    fn cdp_examples() {
        let x: BTreeSet<(usize, usize)> = [(0, 1), (3, 7)].into();
        assert_eq!(cdp(&x, &x).precision, 100.0);
        let one: BTreeSet<_> = [(0, 1)].into();
        let r = cdp(&x, &one);
        assert_eq!((r.precision, r.recall), (50.0, 100.0));
        let empty = BTreeSet::new();
        assert_eq!(cdp::<(usize, usize)>(&empty, &empty).precision, 100.0);
        let r = cdp(&empty, &one);
        assert_eq!((r.precision, r.recall), (0.0, 0.0));
    }

    #[test]
    fn timing_and_success() {
        let ((), s) = timed(|| ());
        assert!(s < 0.01);
        let st = timing_stats(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((st.mean_s, st.cv), (1.0, 0.0));
        assert_eq!(success_rate(&[10.0, 30.0], SUCCESS_THRESHOLD_MM), 50.0);
        let t = TargetSummary::from_errors("HeadTop", &[10.0, 20.0]);
        assert_eq!((t.mean_error_mm, t.max_error_mm, t.success_rate), (15.0, 20.0, 100.0));
    }
}
