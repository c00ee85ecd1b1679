//! End-to-end runs over a simulated scene: rig calibration, per-frame
//! positioning (detect, triangulate, consolidate, fit, locate) and the
//! virtual test run.

use log::{debug, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::bodyfit::{fit_body, locate_target, positioning_error, AnatomicalTarget, BodyFit, FitOptions, TargetName};
use crate::geometry::{reprojection_error, solve_pnp, CameraModel, GeometryError};
use crate::metrics::SUCCESS_THRESHOLD_MM;
use crate::observation::{FrameObservations, JointId, NUM_JOINTS};
use crate::par;
use crate::scenesim::{ground_truth, Scene};
use crate::temporal::{DriftEvent, DriftWindow, ReliabilityThresholds, WindowConfig};
use crate::triangulation::{triangulate_frame, ScoredKeypoint3D, TriangulationOptions};
use crate::vtr::{run_vtr, VtrConfig, VtrError, VtrRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedCamera {
    pub camera: CameraModel,
    pub markers: usize,
    pub rms_px: f64,
}

/// Solves every camera's pose from the scene markers observed with
/// `pixel_sigma` px of noise.
pub fn calibrate_rig(scene: &Scene, pixel_sigma: f64, seed: u64, robust: bool) -> Result<Vec<CalibratedCamera>, (String, GeometryError)> {
    let observed = scene.marker_observations(pixel_sigma, seed);
    scene
        .cameras
        .iter()
        .zip(observed)
        .map(|(cam, (_, corr))| {
            let e = solve_pnp(&corr, &cam.intrinsics, robust).map_err(|err| (cam.id.clone(), err))?;
            let camera = CameraModel::new(cam.id.clone(), cam.intrinsics, e);
            let sq: f64 = corr
                .iter()
                .map(|c| reprojection_error(&camera, &c.point_pixel, &c.point_room).map(|r| r * r).unwrap_or(f64::INFINITY))
                .sum();
            Ok(CalibratedCamera { rms_px: (sq / corr.len() as f64).sqrt(), markers: corr.len(), camera })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PositionConfig {
    pub frames: u64,
    pub triangulation: TriangulationOptions,
    pub window: WindowConfig,
    pub thresholds: ReliabilityThresholds,
    pub fit: FitOptions,
    pub targets: Vec<TargetName>,
}

impl Default for PositionConfig {
    fn default() -> Self {
        Self {
            frames: 40,
            triangulation: TriangulationOptions::default(),
            window: WindowConfig::default(),
            thresholds: ReliabilityThresholds::default(),
            fit: FitOptions::default(),
            targets: vec![TargetName::HeadTop, TargetName::RightRadialArtery],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target: TargetName,
    pub predicted: Option<Vector3<f64>>,
    pub ground_truth: Vector3<f64>,
    /// Horizontal-plane error, mm.
    pub error_mm: Option<f64>,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub timestep: u64,
    pub keypoints: Vec<ScoredKeypoint3D>,
    pub consolidated: Vec<ScoredKeypoint3D>,
    pub drift_events: Vec<DriftEvent>,
    pub fit: Option<BodyFit>,
    pub failure: Option<String>,
    pub targets: Vec<TargetResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRun {
    pub preset: String,
    pub seed: u64,
    pub frames: Vec<FrameResult>,
    #[serde(skip)]
    pub observations: Vec<Vec<FrameObservations>>,
}

impl PositionRun {
    pub fn failed_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.fit.is_none()).count()
    }

    pub fn target_errors(&self, target: TargetName) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.targets.iter().filter(|t| t.target == target).map(|t| t.error_mm.unwrap_or(f64::INFINITY)))
            .collect()
    }
}

/// Runs the positioning pipeline over `config.frames` timesteps. Detections
/// come from the scene's true cameras; triangulation uses `rig`.
pub fn run_positioning(scene: &Scene, rig: &[CameraModel], config: &PositionConfig) -> Result<PositionRun, crate::temporal::TemporalError> {
    let mut windows: Vec<DriftWindow> =
        JointId::ALL.iter().map(|j| DriftWindow::new(*j, config.window)).collect::<Result<_, _>>()?;
    let mut frames = Vec::with_capacity(config.frames as usize);
    let mut all_obs = Vec::with_capacity(config.frames as usize);
    for t in 0..config.frames {
        let state = scene.state(t);
        let obs: Vec<FrameObservations> = par::map(&scene.cameras, |cam| scene.observe(&state, cam));
        let keypoints: Vec<ScoredKeypoint3D> = triangulate_frame(&obs, rig, &config.triangulation)
            .into_iter()
            .filter_map(|r| r.map_err(|e| debug!("t={t}: {e}")).ok())
            .collect();

        let mut consolidated = Vec::with_capacity(NUM_JOINTS);
        let mut drift_events = Vec::new();
        let mut fresh: [Option<&ScoredKeypoint3D>; NUM_JOINTS] = [None; NUM_JOINTS];
        for k in &keypoints {
            fresh[k.joint.index()] = Some(k);
        }
        for (w, new) in windows.iter_mut().zip(fresh) {
            let out = match new {
                Some(k) => w.update(k.clone(), &config.thresholds),
                None if !w.is_empty() => crate::temporal::consolidate(w, &config.thresholds),
                None => continue,
            }?;
            if let Some(ev) = out.drift_event(t) {
                drift_events.push(ev);
            }
            consolidated.push(out.output);
        }

        let gt = ground_truth(scene, t, &scene.script);
        let (fit, failure) = match fit_body(&consolidated, &scene.template, &config.fit) {
            Ok(f) => (Some(f), None),
            Err(e) => {
                warn!("{} t={t}: body fit failed: {e}", scene.preset);
                (None, Some(e.to_string()))
            }
        };
        let targets = config
            .targets
            .iter()
            .filter_map(|name| {
                let truth = gt.targets.iter().find(|(n, _)| n == name)?.1;
                let predicted = fit
                    .as_ref()
                    .and_then(|f| locate_target(&f.params, &scene.template, &AnatomicalTarget::preset(*name)).ok());
                let error_mm = predicted.map(|p| positioning_error(&p, &truth));
                Some(TargetResult {
                    target: *name,
                    predicted,
                    ground_truth: truth,
                    error_mm,
                    success: error_mm.is_some_and(|e| e < SUCCESS_THRESHOLD_MM),
                })
            })
            .collect();
        frames.push(FrameResult { timestep: t, keypoints, consolidated, drift_events, fit, failure, targets });
        all_obs.push(obs);
    }
    Ok(PositionRun { preset: scene.preset.clone(), seed: scene.seed, frames, observations: all_obs })
}

/// Renders every camera at `timestep` and runs the virtual test run.
pub fn run_scene_vtr(scene: &Scene, timestep: u64, config: &VtrConfig) -> Result<VtrRun, VtrError> {
    let state = scene.state(timestep);
    let frames: Vec<_> = scene.cameras.iter().map(|c| (c.clone(), scene.render(&state, c))).collect();
    run_vtr(&frames, &scene.carm_pose, &scene.protocol, config)
}
