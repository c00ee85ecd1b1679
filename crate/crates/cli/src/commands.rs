use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::Context;
use carm_core::geometry::{reprojection_error, solve_pnp, CameraModel};
use carm_core::io::{self as cio, KeypointRecord, MarkerFile, MarkerSet, RigCamera, RigFile};
use carm_core::metrics::{cdp, mpjpe, pck, MetricsTable, PoseFrame, TargetSummary};
use carm_core::pipeline::{run_positioning, run_scene_vtr, PositionConfig};
use carm_core::scenesim::{generate_scene, Scene};
use carm_core::vtr::{reference_collisions, render_snapshot, write_snapshot, CollisionReport};
use carm_core::{JointId, PointCloud};
use log::{info, warn};

use crate::config::RunConfig;
use crate::error::{pipeline, usage, CliResult, ResultExt};
use crate::records::*;

/// Minimum marker correspondences per camera for calibration.
pub const MIN_MARKERS: usize = 6;

/// PCK threshold as a fraction of the torso length.
pub const PCK_FRACTION: f64 = 0.3;

pub fn build_scene(cfg: &RunConfig) -> CliResult<Scene> {
    let mut scene = generate_scene(cfg.scene.seed, &cfg.scene.preset).usage()?;
    scene.noise = cfg.noise;
    scene.noise.seed = cfg.scene.seed.wrapping_add(cfg.noise.seed);
    scene.carm = cfg.vtr.carm;
    Ok(scene)
}

/// Reads an input file; a missing or malformed input is a usage error.
fn read_input<T>(path: &Path, read: impl FnOnce(&Path) -> cio::Result<T>) -> CliResult<T> {
    if !path.is_file() {
        return Err(usage(format!("input file not found: {}", path.display())));
    }
    read(path).usage()
}

pub fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let out = Layout(cfg.output.dir.clone());
    let scene = build_scene(cfg)?;
    cio::write_json(&out.scene(), &scene).pipeline()?;

    let markers = scene.marker_observations(cfg.calibration.marker_sigma, cfg.scene.seed);
    let sets = scene
        .cameras
        .iter()
        .zip(markers)
        .map(|(cam, (id, correspondences))| MarkerSet { camera_id: id, intrinsics: cam.intrinsics, correspondences })
        .collect();
    cio::write_json(&out.markers(), &MarkerFile::new(sets)).pipeline()?;

    let mut obs = Vec::new();
    let mut truth = Vec::new();
    for t in 0..cfg.scene.frames {
        let state = scene.state(t);
        obs.extend(scene.cameras.iter().map(|c| scene.observe(&state, c)));
        truth.push(GroundTruthRecord::from_scene(&scene, t));
    }
    cio::write_jsonl(&out.observations(), &obs).pipeline()?;
    cio::write_jsonl(&out.ground_truth(), &truth).pipeline()?;

    let t = cfg.scene.vtr_timestep;
    let state = scene.state(t);
    for cam in &scene.cameras {
        cio::write_depth_csv(&out.depth(&cam.id, t), &scene.render(&state, cam)).pipeline()?;
    }
    println!(
        "simulated {} (seed {}): {} frames x {} cameras -> {}",
        scene.preset,
        scene.seed,
        cfg.scene.frames,
        scene.cameras.len(),
        out.0.display()
    );
    Ok(())
}

pub fn calibrate(markers: &Path, rig_out: &Path, robust: bool) -> CliResult<RigFile> {
    let file = read_input(markers, MarkerFile::read)?;
    if file.cameras.is_empty() {
        return Err(usage(format!("{}: no cameras", markers.display())));
    }
    let mut cameras = Vec::with_capacity(file.cameras.len());
    for set in &file.cameras {
        if set.correspondences.len() < MIN_MARKERS {
            return Err(usage(format!(
                "{}: camera {} has {} marker correspondences, need at least {MIN_MARKERS}",
                markers.display(),
                set.camera_id,
                set.correspondences.len()
            )));
        }
        let extrinsics = solve_pnp(&set.correspondences, &set.intrinsics, robust)
            .with_context(|| format!("calibration of camera {} failed", set.camera_id))
            .pipeline()?;
        let camera = CameraModel::new(set.camera_id.clone(), set.intrinsics, extrinsics);
        let sq: f64 = set
            .correspondences
            .iter()
            .map(|c| reprojection_error(&camera, &c.point_pixel, &c.point_room).map_or(f64::INFINITY, |r| r * r))
            .sum();
        let rms = (sq / set.correspondences.len() as f64).sqrt();
        println!("{}: reprojection RMS {rms:.4} px over {} markers", set.camera_id, set.correspondences.len());
        cameras.push(RigCamera { camera, rms_px: Some(rms) });
    }
    let rig = RigFile::new(cameras);
    cio::write_json(rig_out, &rig).pipeline()?;
    Ok(rig)
}

fn position_config(cfg: &RunConfig) -> PositionConfig {
    PositionConfig {
        frames: cfg.scene.frames,
        triangulation: cfg.triangulation,
        window: cfg.temporal.window,
        thresholds: cfg.temporal.thresholds,
        fit: cfg.bodyfit.fit,
        targets: cfg.bodyfit.targets.clone(),
    }
}

pub fn position(cfg: &RunConfig, rig_path: Option<&Path>) -> CliResult<PositioningReport> {
    let out = Layout(cfg.output.dir.clone());
    let scene = build_scene(cfg)?;
    let rig = match rig_path {
        Some(p) => read_input(p, RigFile::read)?,
        None => {
            info!("no rig given; calibrating from simulated markers");
            let marker_path = out.markers();
            let sets = scene
                .cameras
                .iter()
                .zip(scene.marker_observations(cfg.calibration.marker_sigma, cfg.scene.seed))
                .map(|(cam, (id, correspondences))| MarkerSet { camera_id: id, intrinsics: cam.intrinsics, correspondences })
                .collect();
            cio::write_json(&marker_path, &MarkerFile::new(sets)).pipeline()?;
            calibrate(&marker_path, &out.rig(), cfg.calibration.robust)?
        }
    };
    for cam in &scene.cameras {
        if !rig.cameras.iter().any(|c| c.camera.id == cam.id) {
            return Err(usage(format!("rig has no camera {:?}", cam.id)));
        }
    }

    let run = run_positioning(&scene, &rig.camera_models(), &position_config(cfg)).pipeline()?;

    let obs: Vec<_> = run.observations.iter().flatten().collect();
    cio::write_jsonl(&out.observations(), obs).pipeline()?;
    let truth: Vec<_> = (0..cfg.scene.frames).map(|t| GroundTruthRecord::from_scene(&scene, t)).collect();
    cio::write_jsonl(&out.ground_truth(), &truth).pipeline()?;
    let records = |consolidated: bool| -> Vec<KeypointRecord> {
        run.frames
            .iter()
            .flat_map(|f| {
                let src = if consolidated { &f.consolidated } else { &f.keypoints };
                src.iter().map(move |k| KeypointRecord { frame: f.timestep, consolidated, keypoint: k.clone() })
            })
            .collect()
    };
    cio::write_jsonl(&out.keypoints3d(), &records(false)).pipeline()?;
    cio::write_jsonl(&out.consolidated(), &records(true)).pipeline()?;
    let params: Vec<BodyParamsRecord> = run
        .frames
        .iter()
        .map(|f| BodyParamsRecord { frame: f.timestep, fit: f.fit.clone(), failure: f.failure.clone() })
        .collect();
    cio::write_jsonl(&out.bodyparams(), &params).pipeline()?;

    let summary: Vec<TargetSummary> = cfg
        .bodyfit
        .targets
        .iter()
        .map(|t| TargetSummary::from_errors(target_label(*t), &run.target_errors(*t)))
        .collect();
    let report = PositioningReport {
        config: cfg.clone(),
        preset: run.preset.clone(),
        seed: run.seed,
        rig: rig.cameras.iter().map(|c| RigSummary { camera: c.camera.id.clone(), rms_px: c.rms_px }).collect(),
        failed_frames: run.failed_frames(),
        summary,
        frames: run
            .frames
            .iter()
            .map(|f| FrameSummary {
                timestep: f.timestep,
                failure: f.failure.clone(),
                drift_events: f.drift_events.clone(),
                targets: f.targets.clone(),
            })
            .collect(),
    };
    cio::write_json(&out.positioning_report(), &report).pipeline()?;
    for s in &report.summary {
        println!(
            "{}: mean {:.1} mm, max {:.1} mm, success {:.1}% of {} frames",
            s.target, s.mean_error_mm, s.max_error_mm, s.success_rate, s.frames
        );
    }
    if report.failed_frames > 0 {
        warn!("{} of {} frames had no body fit", report.failed_frames, report.frames.len());
    }
    if report.failed_frames == report.frames.len() {
        return Err(pipeline("every frame failed"));
    }
    Ok(report)
}

fn target_label(t: carm_core::bodyfit::TargetName) -> String {
    serde_json::to_value(t).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

pub fn vtr(cfg: &RunConfig) -> CliResult<VtrReportDoc> {
    let out = Layout(cfg.output.dir.clone());
    let scene = build_scene(cfg)?;
    let vcfg = cfg.vtr;
    let run = run_scene_vtr(&scene, cfg.scene.vtr_timestep, &vcfg).pipeline()?;
    let file = File::create(out.vtr_residual()).with_context(|| out.vtr_residual().display().to_string()).pipeline()?;
    run.residual.write_csv(BufWriter::new(file)).pipeline()?;
    if cfg.output.snapshot {
        let [w, h] = cfg.output.snapshot_size;
        let img = render_snapshot(&run.residual, &vcfg.carm, &scene.protocol, &run.report, w, h);
        write_snapshot(&img, &out.snapshot()).pipeline()?;
    }
    let doc = VtrReportDoc {
        config: cfg.clone(),
        preset: scene.preset.clone(),
        seed: scene.seed,
        timestep: cfg.scene.vtr_timestep,
        fused_points: run.fused_points,
        residual_points: run.residual.len(),
        report: run.report,
    };
    cio::write_json(&out.vtr_report(), &doc).pipeline()?;
    let r = &doc.report;
    println!(
        "{}: {} of {} steps collide ({} cells), {:.3} s",
        r.protocol,
        r.regions.len(),
        r.steps_checked,
        r.cells().len(),
        r.elapsed_s
    );
    Ok(doc)
}

fn pose_metrics<const D: usize>(preds: &[PoseFrame<D>], gts: &[PoseFrame<D>]) -> CliResult<PoseMetrics> {
    Ok(PoseMetrics {
        frames: gts.len(),
        mpjpe: mpjpe(preds, gts).usage()?,
        pck: pck(preds, gts, PCK_FRACTION).usage()?,
    })
}

fn frame_key(timestep: u64, view: &str) -> carm_core::metrics::FrameKey {
    carm_core::metrics::FrameKey { timestep, view: view.into() }
}

fn keypoint_frames(records: &[KeypointRecord]) -> Vec<PoseFrame<3>> {
    let mut by_frame: BTreeMap<u64, BTreeMap<JointId, nalgebra::Vector3<f64>>> = BTreeMap::new();
    for r in records {
        by_frame.entry(r.frame).or_default().insert(r.keypoint.joint, r.keypoint.position);
    }
    by_frame.into_iter().map(|(t, joints)| PoseFrame { key: frame_key(t, "3d"), joints }).collect()
}

pub fn evaluate(run_dir: &Path, gt_path: Option<&Path>) -> CliResult<MetricsReport> {
    let out = Layout(run_dir.to_path_buf());
    if !run_dir.is_dir() {
        return Err(usage(format!("run directory not found: {}", run_dir.display())));
    }
    let gt_path: PathBuf = gt_path.map(Path::to_path_buf).unwrap_or_else(|| out.ground_truth());
    let mut report = MetricsReport::default();
    let mut table = MetricsTable::default();

    if exists(&gt_path) || exists(&out.observations()) || exists(&out.consolidated()) {
        let truth: Vec<GroundTruthRecord> = read_input(&gt_path, cio::read_jsonl)?;
        let gt3: Vec<PoseFrame<3>> = truth.iter().map(|g| PoseFrame { key: frame_key(g.timestep, "3d"), joints: g.joints.clone() }).collect();
        let gt2: Vec<PoseFrame<2>> = truth
            .iter()
            .flat_map(|g| g.pixels.iter().map(|(cam, px)| PoseFrame { key: frame_key(g.timestep, cam), joints: px.clone() }))
            .collect();

        if exists(&out.observations()) {
            let obs = read_input(&out.observations(), cio::read_observations)?;
            let preds: Vec<PoseFrame<2>> = obs
                .iter()
                .map(|f| PoseFrame {
                    key: frame_key(f.timestep, &f.camera_id),
                    joints: f.observations().iter().map(|o| (o.joint, o.pixel)).collect(),
                })
                .collect();
            let m = pose_metrics(&preds, &gt2)?;
            table.push("mpjpe_2d_px", m.mpjpe);
            table.push("pck2d_torso_0.3", m.pck.mean);
            report.detections_2d = Some(m);
        }
        for (path, slot, name) in [
            (out.keypoints3d(), &mut report.keypoints_3d, "keypoints3d"),
            (out.consolidated(), &mut report.consolidated_3d, "consolidated"),
        ] {
            if exists(&path) {
                let records: Vec<KeypointRecord> = read_input(&path, cio::read_jsonl)?;
                let m = pose_metrics(&keypoint_frames(&records), &gt3)?;
                table.push(format!("{name}_mpjpe_mm"), m.mpjpe);
                table.push(format!("{name}_pck3d_torso_0.3"), m.pck.mean);
                *slot = Some(m);
            }
        }
    }

    if exists(&out.positioning_report()) {
        let pos: PositioningReport = read_input(&out.positioning_report(), cio::read_json)?;
        for s in &pos.summary {
            table.push(format!("{}_mean_error_mm", s.target), s.mean_error_mm);
            table.push(format!("{}_success_pct", s.target), s.success_rate);
        }
        report.positioning = Some(pos.summary);
    }

    if exists(&out.vtr_report()) {
        let doc: VtrReportDoc = read_input(&out.vtr_report(), cio::read_json)?;
        let residual = read_input(&out.vtr_residual(), |p| {
            let f = File::open(p).map_err(|source| cio::IoError::Io { path: p.into(), source })?;
            PointCloud::read_csv(BufReader::new(f)).map_err(|e| cio::IoError::Invalid { path: p.into(), msg: e.to_string() })
        })?;
        let scene = generate_scene(doc.seed, &doc.preset).usage()?;
        let oracle = reference_collisions(&residual, &doc.config.vtr.carm, &scene.protocol, &doc.report.grid);
        let result = cdp(&predicted_cells(&doc.report), &oracle);
        table.push("cdp_pct", result.precision);
        table.push("collision_recall_pct", result.recall);
        report.collision_detection = Some(result);
    }

    if table.rows.is_empty() {
        return Err(usage(format!("{}: no run outputs to evaluate", run_dir.display())));
    }
    cio::write_json(&out.metrics(), &report).pipeline()?;
    std::fs::write(out.metrics_csv(), table.to_csv()).with_context(|| out.metrics_csv().display().to_string()).pipeline()?;
    print!("{}", table.to_csv());
    Ok(report)
}

fn predicted_cells(report: &CollisionReport) -> std::collections::BTreeSet<(usize, usize)> {
    report.cells().into_iter().collect()
}

pub fn all(cfg: &RunConfig) -> CliResult<()> {
    let out = Layout(cfg.output.dir.clone());
    simulate(cfg)?;
    calibrate(&out.markers(), &out.rig(), cfg.calibration.robust)?;
    position(cfg, Some(&out.rig()))?;
    vtr(cfg)?;
    evaluate(&out.0, None)?;
    Ok(())
}
