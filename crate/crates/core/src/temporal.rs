//! Per-joint temporal consolidation.
//!
//! Each joint keeps a rolling window of scored 3D keypoints. The oldest and
//! newest `n_s` entries are compared with a two-sample two-sided KS test on
//! each of six marginals (x, y, z, rho, v, 1/l); a drift is declared when the
//! smallest p-value falls under `alpha / 6`. On drift the window is split
//! into a pre and a post concept, each concept is gated on median scores, and
//! the output is the best-scoring entry of the concept that is kept.

use std::collections::VecDeque;

use log::debug;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observation::JointId;
use crate::triangulation::ScoredKeypoint3D;

/// Above this `m * n` the KS p-value switches to the asymptotic series.
pub const KS_EXACT_LIMIT: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemporalError {
    #[error("KS test needs two non-empty samples")]
    EmptySample,
    #[error("KS samples must be finite")]
    NonFiniteSample,
    #[error("window holds {have} entries, drift detection needs {need}")]
    InsufficientHistory { have: usize, need: usize },
    #[error("window is empty")]
    EmptyWindow,
    #[error("entry for {got_joint} pushed into the {joint} window")]
    WrongJoint { joint: JointId, got_joint: JointId },
    #[error("timestep {got} is not after the newest buffered timestep {last}")]
    NonMonotoneTimestep { last: u64, got: u64 },
    #[error("invalid window configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TemporalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn sorted_finite(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(TemporalError::NonFiniteSample);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// `max |i n - j m|` over the merged ECDF walk, i.e. `D * m * n`.
fn ks_numerator(a: &[f64], b: &[f64]) -> u64 {
    let (m, n) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut best = 0u64;
    while i < m && j < n {
        let v = a[i].min(b[j]);
        while i < m && a[i] <= v {
            i += 1;
        }
        while j < n && b[j] <= v {
            j += 1;
        }
        let d = (i as i64 * n as i64 - j as i64 * m as i64).unsigned_abs();
        best = best.max(d);
    }
    best
}

/// Exact `P(D >= d_num / (m n))` under the null for samples without ties.
///
/// Mass flows over the `(m+1) x (n+1)` lattice with hypergeometric step
/// probabilities, so no binomial coefficients are formed; the p-value is the
/// mass absorbed on first reaching the rejection region.
pub fn ks_exact_p(m: usize, n: usize, d_num: u64) -> f64 {
    if d_num == 0 {
        return 1.0;
    }
    let outside = |i: usize, j: usize| (i as i64 * n as i64 - j as i64 * m as i64).unsigned_abs() >= d_num;
    let step_a = |i: usize, j: usize| (m - i) as f64 / (m + n - i - j) as f64;
    let step_b = |i: usize, j: usize| (n - j) as f64 / (m + n - i - j) as f64;
    let mut u = vec![0.0f64; n + 1];
    let mut absorbed = 0.0;
    for i in 0..=m {
        for j in 0..=n {
            let mass = if i == 0 && j == 0 {
                1.0
            } else {
                let from_a = if i > 0 { u[j] * step_a(i - 1, j) } else { 0.0 };
                let from_b = if j > 0 { u[j - 1] * step_b(i, j - 1) } else { 0.0 };
                from_a + from_b
            };
            if outside(i, j) {
                absorbed += mass;
                u[j] = 0.0;
            } else {
                u[j] = mass;
            }
        }
    }
    absorbed.clamp(0.0, 1.0)
}

/// Kolmogorov limiting distribution with Stephens' small-sample correction.
pub fn ks_asymptotic_p(m: usize, n: usize, d: f64) -> f64 {
    let en = ((m * n) as f64 / (m + n) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample two-sided Kolmogorov-Smirnov test.
pub fn ks_two_sample(sample_a: &[f64], sample_b: &[f64]) -> Result<KsResult> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(TemporalError::EmptySample);
    }
    let a = sorted_finite(sample_a)?;
    let b = sorted_finite(sample_b)?;
    let (m, n) = (a.len(), b.len());
    let num = ks_numerator(&a, &b);
    let statistic = num as f64 / (m as f64 * n as f64);
    let p_value = if (m as u64) * (n as u64) <= KS_EXACT_LIMIT {
        ks_exact_p(m, n, num)
    } else {
        ks_asymptotic_p(m, n, statistic)
    };
    Ok(KsResult { statistic, p_value })
}

/// Feature dimensions tested for drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marginal {
    X,
    Y,
    Z,
    Rho,
    Vis,
    InvErr,
}

impl Marginal {
    pub const ALL: [Marginal; 6] = [Marginal::X, Marginal::Y, Marginal::Z, Marginal::Rho, Marginal::Vis, Marginal::InvErr];

    pub fn value(self, k: &ScoredKeypoint3D) -> f64 {
        match self {
            Marginal::X => k.position.x,
            Marginal::Y => k.position.y,
            Marginal::Z => k.position.z,
            Marginal::Rho => k.score.rho,
            Marginal::Vis => k.score.vis,
            Marginal::InvErr => k.score.inv_err,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Memory size `w`.
    pub capacity: usize,
    /// KS sample size `n_s` for both reference and test blocks.
    pub stat_size: usize,
    /// Family-wise significance level before Bonferroni correction.
    pub alpha: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { capacity: 25, stat_size: 10, alpha: 0.05 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stat_size == 0 || 2 * self.stat_size > self.capacity {
            return Err(TemporalError::InvalidConfig(format!(
                "need 1 <= n_s <= w/2, got n_s={} w={}",
                self.stat_size, self.capacity
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(TemporalError::InvalidConfig(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReliabilityThresholds {
    pub rho_min: f64,
    pub vis_min: f64,
    /// Largest acceptable median reprojection error, px.
    pub reproj_max: f64,
    /// Centroid shift treated as genuine motion, mm.
    pub motion_min: f64,
}

impl Default for ReliabilityThresholds {
    fn default() -> Self {
        Self { rho_min: 0.5, vis_min: 0.5, reproj_max: 8.0, motion_min: 50.0 }
    }
}

/// `rho * v * min(1, inv_err * reproj_max)`.
pub fn composite_score(k: &ScoredKeypoint3D, th: &ReliabilityThresholds) -> f64 {
    k.score.rho * k.score.vis * (k.score.inv_err * th.reproj_max).min(1.0)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median rho, median v and median reprojection error all within thresholds.
pub fn concept_reliable(entries: &[ScoredKeypoint3D], th: &ReliabilityThresholds) -> bool {
    if entries.is_empty() {
        return false;
    }
    let rho = median(entries.iter().map(|e| e.score.rho).collect());
    let vis = median(entries.iter().map(|e| e.score.vis).collect());
    let err = median(entries.iter().map(|e| e.score.reproj_error()).collect());
    rho >= th.rho_min && vis >= th.vis_min && err <= th.reproj_max
}

fn centroid(entries: &[ScoredKeypoint3D]) -> Vector3<f64> {
    entries.iter().map(|e| e.position).sum::<Vector3<f64>>() / entries.len().max(1) as f64
}

/// Split of a window into the concepts before and after a drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPartition {
    pub pre: Vec<ScoredKeypoint3D>,
    pub post: Vec<ScoredKeypoint3D>,
    pub drift_detected: bool,
    /// Marginal with the smallest p-value (the trigger when drifting).
    pub drift_marginal: Option<Marginal>,
    pub p_values: [f64; 6],
}

impl ConceptPartition {
    pub fn min_p(&self) -> f64 {
        self.p_values.iter().copied().fold(1.0, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftWindow {
    pub joint: JointId,
    pub config: WindowConfig,
    buffer: VecDeque<ScoredKeypoint3D>,
}

impl DriftWindow {
    pub fn new(joint: JointId, config: WindowConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { joint, config, buffer: VecDeque::with_capacity(config.capacity) })
    }

    pub fn entries(&self) -> &VecDeque<ScoredKeypoint3D> {
        &self.buffer
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Appends an entry, evicting the oldest beyond capacity.
    pub fn push(&mut self, entry: ScoredKeypoint3D) -> Result<()> {
        if entry.joint != self.joint {
            return Err(TemporalError::WrongJoint { joint: self.joint, got_joint: entry.joint });
        }
        if let Some(last) = self.buffer.back() {
            if entry.timestep <= last.timestep {
                return Err(TemporalError::NonMonotoneTimestep { last: last.timestep, got: entry.timestep });
            }
        }
        if self.buffer.len() == self.config.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(entry);
        Ok(())
    }

    /// Pushes `entry`, consolidates, and forgets the pre-drift concept when
    /// the post concept is adopted so stale positions cannot resurface.
    pub fn update(&mut self, entry: ScoredKeypoint3D, th: &ReliabilityThresholds) -> Result<Consolidation> {
        self.push(entry)?;
        let out = consolidate(self, th)?;
        if let (Some(p), Decision::AdoptPost(_)) = (&out.partition, out.decision) {
            let keep = p.post.len();
            while self.buffer.len() > keep {
                self.buffer.pop_front();
            }
        }
        Ok(out)
    }
}

/// KS tests of the oldest vs newest `n_s` entries on every marginal.
pub fn detect_drift(window: &DriftWindow) -> Result<ConceptPartition> {
    let ns = window.config.stat_size;
    let buf: Vec<&ScoredKeypoint3D> = window.buffer.iter().collect();
    let len = buf.len();
    if len < 2 * ns {
        return Err(TemporalError::InsufficientHistory { have: len, need: 2 * ns });
    }
    let mut p_values = [1.0; 6];
    for (slot, m) in Marginal::ALL.iter().enumerate() {
        let reference: Vec<f64> = buf[..ns].iter().map(|k| m.value(k)).collect();
        let test: Vec<f64> = buf[len - ns..].iter().map(|k| m.value(k)).collect();
        p_values[slot] = ks_two_sample(&reference, &test)?.p_value;
    }
    let (imin, pmin) = p_values
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("six marginals");
    let corrected = window.config.alpha / Marginal::ALL.len() as f64;
    let drift = pmin < corrected;
    let marginal = Marginal::ALL[imin];
    let split = if drift { change_point(&buf, ns, marginal) } else { len - ns };
    Ok(ConceptPartition {
        pre: buf[..split].iter().map(|k| (*k).clone()).collect(),
        post: buf[split..].iter().map(|k| (*k).clone()).collect(),
        drift_detected: drift,
        drift_marginal: Some(marginal),
        p_values,
    })
}

/// Locates the change inside the newest `n_s` entries: the split whose two
/// concepts have the smallest total squared deviation from their own means
/// on the triggering marginal, i.e. the largest
/// `n_a n_b / (n_a + n_b) * (mean_a - mean_b)^2`. Earlier splits win ties.
///
/// A rank statistic is a poor locator here: a few pre-change values that
/// happen to sit above the whole reference block pull a balanced split early.
fn change_point(buf: &[&ScoredKeypoint3D], ns: usize, m: Marginal) -> usize {
    let len = buf.len();
    let vals: Vec<f64> = buf.iter().map(|k| m.value(k)).collect();
    let total: f64 = vals.iter().sum();
    let mut head: f64 = vals[..len - ns].iter().sum();
    let mut best = (len - ns, f64::NEG_INFINITY);
    for s in (len - ns)..len {
        let (na, nb) = (s as f64, (len - s) as f64);
        let gap = head / na - (total - head) / nb;
        let score = na * nb / (na + nb) * gap * gap;
        if score > best.1 * (1.0 + 1e-12) + 1e-300 {
            best = (s, score);
        }
        head += vals[s];
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdoptReason {
    /// The only concept passing the reliability gate.
    OnlyReliable,
    /// Centroids moved by at least `motion_min`.
    Motion,
    /// Higher median composite score.
    HigherScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum Decision {
    NoDrift,
    AdoptPre(AdoptReason),
    AdoptPost(AdoptReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consolidation {
    pub output: ScoredKeypoint3D,
    pub decision: Decision,
    pub partition: Option<ConceptPartition>,
}

/// A drift detection for the structured event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub timestep: u64,
    pub joint: JointId,
    pub marginal: Marginal,
    pub p_value: f64,
    pub decision: Decision,
}

impl Consolidation {
    pub fn drift_event(&self, timestep: u64) -> Option<DriftEvent> {
        let p = self.partition.as_ref().filter(|p| p.drift_detected)?;
        Some(DriftEvent {
            timestep,
            joint: self.output.joint,
            marginal: p.drift_marginal?,
            p_value: p.min_p(),
            decision: self.decision,
        })
    }
}

fn best_entry(entries: &[ScoredKeypoint3D], th: &ReliabilityThresholds) -> ScoredKeypoint3D {
    // `>=` keeps the most recent entry among equal scores.
    let mut best = &entries[0];
    let mut best_score = composite_score(best, th);
    for e in &entries[1..] {
        let s = composite_score(e, th);
        if s >= best_score {
            best = e;
            best_score = s;
        }
    }
    best.clone()
}

/// Chooses the output keypoint for the window's current contents.
pub fn consolidate(window: &DriftWindow, th: &ReliabilityThresholds) -> Result<Consolidation> {
    if window.is_empty() {
        return Err(TemporalError::EmptyWindow);
    }
    let partition = match detect_drift(window) {
        Ok(p) => Some(p),
        Err(TemporalError::InsufficientHistory { .. }) => None,
        Err(e) => return Err(e),
    };
    let Some(p) = partition.as_ref().filter(|p| p.drift_detected) else {
        let all: Vec<ScoredKeypoint3D> = window.buffer.iter().cloned().collect();
        return Ok(Consolidation { output: best_entry(&all, th), decision: Decision::NoDrift, partition });
    };
    let decision = match (concept_reliable(&p.pre, th), concept_reliable(&p.post, th)) {
        (true, false) => Decision::AdoptPre(AdoptReason::OnlyReliable),
        (false, true) => Decision::AdoptPost(AdoptReason::OnlyReliable),
        _ => {
            if (centroid(&p.pre) - centroid(&p.post)).norm() >= th.motion_min {
                Decision::AdoptPost(AdoptReason::Motion)
            } else {
                let med = |c: &[ScoredKeypoint3D]| median(c.iter().map(|e| composite_score(e, th)).collect());
                if med(&p.post) > med(&p.pre) {
                    Decision::AdoptPost(AdoptReason::HigherScore)
                } else {
                    Decision::AdoptPre(AdoptReason::HigherScore)
                }
            }
        }
    };
    let concept = match decision {
        Decision::AdoptPost(_) => &p.post,
        _ => &p.pre,
    };
    let output = best_entry(concept, th);
    debug!(
        "{}: drift on {:?} (p={:.2e}), {:?}",
        window.joint,
        p.drift_marginal,
        p.min_p(),
        decision
    );
    Ok(Consolidation { output, decision, partition })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triangulation::ScoreVector;
    use proptest::prelude::*;

    /// Independent oracle: evaluate both ECDFs at every sample point.
    fn brute_d(a: &[f64], b: &[f64]) -> f64 {
        let ecdf = |s: &[f64], x: f64| s.iter().filter(|v| **v <= x).count() as f64 / s.len() as f64;
        a.iter().chain(b).map(|&x| (ecdf(a, x) - ecdf(b, x)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn ks_examples() {
        let a = [1.0, 2.0, 3.0];
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let r = ks_two_sample(&a, &[10.0, 11.0, 12.0]).unwrap();
        assert_eq!(r.statistic, 1.0);
        // Only the two fully separated orderings out of C(6,3) = 20 reach D = 1.
        assert!((r.p_value - 0.1).abs() < 1e-12);
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [1.5, 2.5, 3.5, 4.5, 5.5];
        let r = ks_two_sample(&a, &b).unwrap();
        assert!((r.statistic - brute_d(&a, &b)).abs() < 1e-12);
        assert!((r.statistic - 0.2).abs() < 1e-12);
        assert!(ks_two_sample(&[], &a).is_err());
        assert!(ks_two_sample(&[f64::NAN], &a).is_err());
    }

    #[test]
    fn exact_p_matches_enumeration() {
        // m = n = 5, D = 1: 2 of C(10, 5) = 252 orderings.
        assert!((ks_exact_p(5, 5, 25) - 2.0 / 252.0).abs() < 1e-15);
        // Brute-force enumeration of all C(8,4) interleavings for m = n = 4.
        let mut counts = std::collections::BTreeMap::new();
        for mask in 0u32..256 {
            if mask.count_ones() != 4 {
                continue;
            }
            let (mut i, mut j, mut dmax) = (0i64, 0i64, 0i64);
            for bit in 0..8 {
                if mask & (1 << bit) != 0 { i += 1 } else { j += 1 }
                dmax = dmax.max((i * 4 - j * 4).abs());
            }
            *counts.entry(dmax).or_insert(0u32) += 1;
        }
        for &d in counts.keys() {
            let tail: u32 = counts.range(d..).map(|(_, c)| *c).sum();
            let p = ks_exact_p(4, 4, d as u64);
            assert!((p - tail as f64 / 70.0).abs() < 1e-12, "d={d}");
        }
    }

    #[test]
    fn asymptotic_agrees_with_exact_near_cutoff() {
        for num in [1500u64, 2000, 2500] {
            let exact = ks_exact_p(100, 100, num);
            let asym = ks_asymptotic_p(100, 100, num as f64 / 10_000.0);
            // The lattice step of 0.01 in D bounds how closely the two can agree.
            assert!((exact - asym).abs() < 0.025, "{exact} vs {asym}");
        }
    }

    proptest! {
        #[test]
        fn statistic_matches_brute_force(
            a in proptest::collection::vec(-5i32..5, 1..30),
            b in proptest::collection::vec(-5i32..5, 1..30),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let r = ks_two_sample(&a, &b).unwrap();
            prop_assert!((r.statistic - brute_d(&a, &b)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.p_value));
        }

        #[test]
        fn exact_p_decreases_with_distance(m in 1usize..15, n in 1usize..15) {
            let mut last = 1.0;
            for d in 0..=(m * n) as u64 {
                let p = ks_exact_p(m, n, d);
                prop_assert!(p <= last + 1e-12);
                last = p;
            }
        }
    }

    fn kp(t: u64, x: f64, rho: f64, err: f64) -> ScoredKeypoint3D {
        ScoredKeypoint3D {
            joint: JointId::RWrist,
            timestep: t,
            position: Vector3::new(x, 0.0, 1000.0),
            score: ScoreVector { rho, vis: 1.0, inv_err: 1.0 / err.max(0.1) },
            winning_subset: vec!["cam1".into(), "cam2".into()],
        }
    }

    #[test]
    fn window_validation() {
        assert!(DriftWindow::new(JointId::Neck, WindowConfig { capacity: 25, stat_size: 13, alpha: 0.05 }).is_err());
        assert!(DriftWindow::new(JointId::Neck, WindowConfig { alpha: 1.5, ..Default::default() }).is_err());
        let mut w = DriftWindow::new(JointId::RWrist, WindowConfig::default()).unwrap();
        w.push(kp(3, 0.0, 0.9, 1.0)).unwrap();
        assert!(matches!(w.push(kp(3, 0.0, 0.9, 1.0)), Err(TemporalError::NonMonotoneTimestep { .. })));
        let mut other = kp(4, 0.0, 0.9, 1.0);
        other.joint = JointId::Neck;
        assert!(matches!(w.push(other), Err(TemporalError::WrongJoint { .. })));
        for t in 4..40 {
            w.push(kp(t, 0.0, 0.9, 1.0)).unwrap();
        }
        assert_eq!(w.len(), 25);
        assert_eq!(w.entries().front().unwrap().timestep, 15);
    }

    #[test]
    fn stationary_constant_stream_has_no_drift() {
        let mut w = DriftWindow::new(JointId::RWrist, WindowConfig::default()).unwrap();
        for t in 0..19 {
            w.push(kp(t, 10.0, 0.9, 1.0)).unwrap();
        }
        assert!(matches!(detect_drift(&w), Err(TemporalError::InsufficientHistory { have: 19, need: 20 })));
        w.push(kp(19, 10.0, 0.9, 1.0)).unwrap();
        let p = detect_drift(&w).unwrap();
        assert!(!p.drift_detected);
        assert_eq!(p.min_p(), 1.0);
    }

    #[test]
    fn step_in_x_is_detected_on_x() {
        let mut w = DriftWindow::new(JointId::RWrist, WindowConfig::default()).unwrap();
        for t in 0..25u64 {
            let x = if t >= 17 { 200.0 } else { 0.0 } + (t as f64 * 0.37).sin();
            w.push(kp(t, x, 0.9, 1.0)).unwrap();
        }
        let p = detect_drift(&w).unwrap();
        assert!(p.drift_detected);
        assert_eq!(p.drift_marginal, Some(Marginal::X));
        assert_eq!(p.post.len(), 8);
        assert_eq!(p.post[0].timestep, 17);
    }

    #[test]
    fn reliability_medians() {
        let th = ReliabilityThresholds::default();
        let good: Vec<_> = (0..5).map(|t| kp(t, 0.0, 0.9, 1.0)).collect();
        assert!(concept_reliable(&good, &th));
        let bad: Vec<_> = (0..5).map(|t| kp(t, 0.0, 0.1, 1.0)).collect();
        assert!(!concept_reliable(&bad, &th));
        let mixed: Vec<_> = [0.2, 0.2, 0.2, 0.9, 0.9].iter().enumerate().map(|(t, &r)| kp(t as u64, 0.0, r, 1.0)).collect();
        assert!(!concept_reliable(&mixed, &th));
        let blurry: Vec<_> = (0..5).map(|t| kp(t, 0.0, 0.9, 9.0)).collect();
        assert!(!concept_reliable(&blurry, &th));
        assert!(!concept_reliable(&[], &th));
    }

    #[test]
    fn stable_stream_returns_best_entry() {
        let th = ReliabilityThresholds::default();
        let mut w = DriftWindow::new(JointId::RWrist, WindowConfig::default()).unwrap();
        for t in 0..25u64 {
            let rho = 0.85 + 0.01 * ((t * 7) % 10) as f64;
            w.push(kp(t, (t as f64).cos(), rho, 1.0)).unwrap();
        }
        let c = consolidate(&w, &th).unwrap();
        assert_eq!(c.decision, Decision::NoDrift);
        let best = w.entries().iter().map(|e| composite_score(e, &th)).fold(0.0, f64::max);
        assert_eq!(composite_score(&c.output, &th), best);
        assert!(w.entries().contains(&c.output));
    }

    #[test]
    fn occlusion_holds_pre_concept() {
        let th = ReliabilityThresholds::default();
        let mut w = DriftWindow::new(JointId::RWrist, WindowConfig::default()).unwrap();
        for t in 0..30u64 {
            let jitter = (t as f64 * 1.7).sin();
            let k = if t < 20 { kp(t, jitter, 0.9, 1.0) } else { kp(t, 80.0 * jitter, 0.1, 15.0) };
            let c = w.update(k, &th).unwrap();
            assert!(c.output.position.x.abs() <= 1.0, "t={t} x={}", c.output.position.x);
        }
    }

    #[test]
    fn motion_tracks_post_concept() {
        let th = ReliabilityThresholds::default();
        let mut w = DriftWindow::new(JointId::RWrist, WindowConfig::default()).unwrap();
        for t in 0..60u64 {
            let x = if t >= 30 { 200.0 } else { 0.0 } + (t as f64 * 2.3).sin();
            let rho = 0.88 + 0.02 * (t as f64 * 0.9).cos();
            let c = w.update(kp(t, x, rho, 1.0), &th).unwrap();
            if t >= 40 {
                assert!((c.output.position.x - 200.0).abs() <= 1.0, "t={t}");
            }
        }
    }
}
