//! Documents written to the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use carm_core::bodyfit::{BodyFit, TargetName};
use carm_core::geometry::project;
use carm_core::metrics::{CdpResult, PckResult, TargetSummary};
use carm_core::observation::JointId;
use carm_core::pipeline::TargetResult;
use carm_core::scenesim::{ground_truth, Scene};
use carm_core::temporal::DriftEvent;
use carm_core::vtr::CollisionReport;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// File names inside the output directory.
pub struct Layout(pub PathBuf);

impl Layout {
    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
    pub fn scene(&self) -> PathBuf {
        self.path("scene.json")
    }
    pub fn markers(&self) -> PathBuf {
        self.path("markers.json")
    }
    pub fn rig(&self) -> PathBuf {
        self.path("rig.json")
    }
    pub fn observations(&self) -> PathBuf {
        self.path("observations.jsonl")
    }
    pub fn ground_truth(&self) -> PathBuf {
        self.path("ground_truth.jsonl")
    }
    pub fn keypoints3d(&self) -> PathBuf {
        self.path("keypoints3d.jsonl")
    }
    pub fn consolidated(&self) -> PathBuf {
        self.path("consolidated.jsonl")
    }
    pub fn bodyparams(&self) -> PathBuf {
        self.path("bodyparams.jsonl")
    }
    pub fn positioning_report(&self) -> PathBuf {
        self.path("positioning_report.json")
    }
    pub fn vtr_report(&self) -> PathBuf {
        self.path("vtr_report.json")
    }
    pub fn vtr_residual(&self) -> PathBuf {
        self.path("vtr_residual.csv")
    }
    pub fn snapshot(&self) -> PathBuf {
        self.path("vtr_snapshot.png")
    }
    pub fn depth(&self, camera: &str, t: u64) -> PathBuf {
        self.0.join("depth").join(format!("{camera}_t{t:04}.csv"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.path("metrics.json")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.path("metrics.csv")
    }
}

pub fn exists(path: &Path) -> bool {
    path.is_file()
}

/// True joint positions, their projections and target locations at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub timestep: u64,
    pub joints: BTreeMap<JointId, Vector3<f64>>,
    /// Per camera, the joints that project inside the image.
    pub pixels: BTreeMap<String, BTreeMap<JointId, Vector2<f64>>>,
    pub targets: BTreeMap<TargetName, Vector3<f64>>,
}

impl GroundTruthRecord {
    pub fn from_scene(scene: &Scene, t: u64) -> Self {
        let gt = ground_truth(scene, t, &scene.script);
        let joints: BTreeMap<JointId, Vector3<f64>> = JointId::ALL.iter().map(|j| (*j, gt.joints[j.index()])).collect();
        let pixels = scene
            .cameras
            .iter()
            .map(|cam| {
                let px = joints
                    .iter()
                    .filter_map(|(j, p)| project(cam, p).ok().filter(|u| cam.intrinsics.contains(u)).map(|u| (*j, u)))
                    .collect();
                (cam.id.clone(), px)
            })
            .collect();
        Self { timestep: t, joints, pixels, targets: gt.targets.into_iter().collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParamsRecord {
    pub frame: u64,
    pub fit: Option<BodyFit>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSummary {
    pub camera: String,
    pub rms_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub timestep: u64,
    pub failure: Option<String>,
    pub drift_events: Vec<DriftEvent>,
    pub targets: Vec<TargetResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositioningReport {
    pub config: RunConfig,
    pub preset: String,
    pub seed: u64,
    pub rig: Vec<RigSummary>,
    pub failed_frames: usize,
    pub summary: Vec<TargetSummary>,
    pub frames: Vec<FrameSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VtrReportDoc {
    pub config: RunConfig,
    pub preset: String,
    pub seed: u64,
    pub timestep: u64,
    pub fused_points: usize,
    pub residual_points: usize,
    pub report: CollisionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub frames: usize,
    pub mpjpe: f64,
    pub pck: PckResult,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Image-plane detections against projected ground truth, px.
    pub detections_2d: Option<PoseMetrics>,
    /// Per-frame triangulated keypoints, mm.
    pub keypoints_3d: Option<PoseMetrics>,
    /// Temporally consolidated keypoints, mm.
    pub consolidated_3d: Option<PoseMetrics>,
    pub positioning: Option<Vec<TargetSummary>>,
    /// Reported collision cells against the set-based recomputation.
    pub collision_detection: Option<CdpResult>,
}
