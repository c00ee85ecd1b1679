//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use carm_core::bodyfit::{FitOptions, TargetName};
use carm_core::observation::NoiseConfig;
use carm_core::scenesim::preset_names;
use carm_core::temporal::{ReliabilityThresholds, WindowConfig};
use carm_core::triangulation::TriangulationOptions;
use carm_core::vtr::VtrConfig;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "CARM_SIM_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub preset: String,
    pub seed: u64,
    /// Positioning frames to simulate.
    pub frames: u64,
    /// Timestep whose depth frames feed the virtual test run.
    pub vtr_timestep: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { preset: "pos-s1-c1".into(), seed: 0, frames: 40, vtr_timestep: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Per-axis marker detection noise, px.
    pub marker_sigma: f64,
    /// Huber loss in the PnP refinement.
    pub robust: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { marker_sigma: 0.5, robust: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    pub window: WindowConfig,
    pub thresholds: ReliabilityThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyfitConfig {
    pub targets: Vec<TargetName>,
    pub fit: FitOptions,
}

impl Default for BodyfitConfig {
    fn default() -> Self {
        Self { targets: vec![TargetName::HeadTop, TargetName::RightRadialArtery], fit: FitOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// One of error, warn, info, debug, trace.
    pub verbosity: String,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    pub snapshot: bool,
    pub snapshot_size: [u32; 2],
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into(), verbosity: "info".into(), threads: 0, snapshot: true, snapshot_size: [800, 600] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    /// Detector noise. The stream seed is `scene.seed + noise.seed`.
    pub noise: NoiseConfig,
    pub calibration: CalibrationConfig,
    pub triangulation: TriangulationOptions,
    pub temporal: TemporalConfig,
    pub bodyfit: BodyfitConfig,
    pub vtr: VtrConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if !preset_names().contains(&self.scene.preset) {
            bail!("unknown scene preset {:?}; expected one of {}", self.scene.preset, preset_names().join(", "));
        }
        ensure!(self.scene.frames > 0, "scene.frames must be positive");
        self.noise.validate()?;
        let c = &self.calibration;
        ensure!(c.marker_sigma.is_finite() && c.marker_sigma >= 0.0, "calibration.marker_sigma must be non-negative");
        let t = &self.triangulation;
        ensure!(t.huber_delta > 0.0 && t.max_iterations > 0, "triangulation.huber_delta and max_iterations must be positive");
        ensure!(t.max_condition > 1.0 && t.reproj_floor > 0.0, "triangulation.max_condition must exceed 1 and reproj_floor be positive");
        self.temporal.window.validate()?;
        let th = &self.temporal.thresholds;
        ensure!(
            [th.rho_min, th.vis_min].iter().all(|x| (0.0..=1.0).contains(x)) && th.reproj_max > 0.0 && th.motion_min >= 0.0,
            "temporal.thresholds out of range"
        );
        let f = &self.bodyfit.fit;
        ensure!(f.min_joints >= 3 && f.max_iterations > 0, "bodyfit.fit.min_joints must be at least 3");
        ensure!(!self.bodyfit.targets.is_empty(), "bodyfit.targets must not be empty");
        let grid = self.vtr.grid_for(&Vector3::zeros());
        grid.validate()?;
        self.vtr.carm.validate_for(&grid)?;
        ensure!(self.vtr.subtract_delta >= 0.0 && self.vtr.depth_stride > 0, "vtr.subtract_delta and depth_stride out of range");
        log::LevelFilter::from_str(&self.output.verbosity)
            .map_err(|_| anyhow::anyhow!("output.verbosity {:?} is not a log level", self.output.verbosity))?;
        ensure!(self.output.snapshot_size.iter().all(|&s| s > 0), "output.snapshot_size must be positive");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("[scene]\nseed = 7\n[temporal.window]\nalpha = 0.01\n").unwrap();
        assert_eq!(cfg.scene.seed, 7);
        assert_eq!(cfg.scene.preset, "pos-s1-c1");
        assert_eq!(cfg.temporal.window.alpha, 0.01);
        assert_eq!(cfg.temporal.window.capacity, 25);
        assert_eq!(cfg.vtr.resolution, [100, 100, 100]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[scene]\nsede = 1\n").is_err());
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
        assert!(RunConfig::from_toml("[vtr.carm]\nradius = 3\n").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.scene.preset = "nowhere".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.temporal.window.stat_size = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.output.verbosity = "loud".into();
        assert!(cfg.validate().is_err());
    }
}
