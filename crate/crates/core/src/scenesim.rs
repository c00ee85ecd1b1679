//! Synthetic operating room.
//!
//! Room frame: z up from the floor, the table's long axis along x with the
//! patient's head toward +x, patient right toward +y. Everything a scene
//! produces is a deterministic function of `(seed, preset, script)`.

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodyfit::{forward_kinematics, locate_in, AnatomicalTarget, BodyParams, SkeletonTemplate, TargetName};
use crate::geometry::{project, CameraModel, Correspondence, DepthImage, Extrinsics, Intrinsics};
use crate::observation::{stream_rng, synth_detect, FrameObservations, JointId, JointPositions, NoiseConfig};
use crate::par;
use crate::primitives::{Capsule, Cuboid, Cylinder, Primitive, Sphere};
use crate::vtr::{CArmModel, CArmPose, TrajectoryProtocol};

/// Tabletop surface height at the default support position, mm.
pub const TABLE_TOP: f64 = 1000.0;
/// Joint centers sit this far above the tabletop, mm.
pub const JOINT_HEIGHT: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("script events out of order at timestep {0}")]
    UnorderedScript(u64),
}

pub const VTR_PRESETS: [&str; 10] = [
    "head-side-vertical",
    "full-head-vertical",
    "left-side-vertical",
    "right-side-vertical",
    "full-left-vertical",
    "full-right-vertical",
    "clear-head-vertical",
    "head-side-oblique",
    "foot-side-vertical",
    "cluttered-room",
];

/// The 3 x 3 grid of support positions and initial C-arm positions.
pub fn positioning_presets() -> Vec<String> {
    (1..=3).flat_map(|s| (1..=3).map(move |c| format!("pos-s{s}-c{c}"))).collect()
}

pub fn preset_names() -> Vec<String> {
    VTR_PRESETS.iter().map(|s| s.to_string()).chain(positioning_presets()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub id: String,
    pub shape: Primitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptEvent {
    /// Permanent displacement of one joint.
    MoveJoint { joint: JointId, delta: Vector3<f64> },
    /// Extra occluder for `duration` timesteps; `camera: None` blocks every view.
    Occlude {
        #[serde(default)]
        camera: Option<String>,
        primitive: Primitive,
        duration: u64,
    },
    MoveObstacle { id: String, delta: Vector3<f64> },
    NoiseChange { noise: NoiseConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedEvent {
    pub timestep: u64,
    #[serde(flatten)]
    pub event: ScriptEvent,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionScript {
    pub events: Vec<TimedEvent>,
}

impl MotionScript {
    pub fn validate(&self) -> Result<(), SceneError> {
        for w in self.events.windows(2) {
            if w[1].timestep < w[0].timestep {
                return Err(SceneError::UnorderedScript(w[1].timestep));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, timestep: u64, event: ScriptEvent) -> &mut Self {
        self.events.push(TimedEvent { timestep, event });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub preset: String,
    pub seed: u64,
    pub cameras: Vec<CameraModel>,
    /// Tabletop and pedestal.
    pub bed: Vec<Cuboid>,
    pub template: SkeletonTemplate,
    pub body: BodyParams,
    pub obstacles: Vec<Obstacle>,
    pub markers: Vec<Vector3<f64>>,
    pub carm: CArmModel,
    pub carm_pose: CArmPose,
    pub protocol: TrajectoryProtocol,
    pub targets: Vec<AnatomicalTarget>,
    pub noise: NoiseConfig,
    pub script: MotionScript,
}

/// Everything that changes over time, after applying the script.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub timestep: u64,
    pub joints: JointPositions,
    pub obstacles: Vec<Obstacle>,
    pub noise: NoiseConfig,
    /// Active script occluders with the camera they apply to.
    pub occluders: Vec<(Option<String>, Primitive)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub timestep: u64,
    pub joints: JointPositions,
    pub targets: Vec<(TargetName, Vector3<f64>)>,
    pub obstacles: Vec<Obstacle>,
}

/// Capsule radius of the body segment ending at `child`, mm.
pub fn segment_radius(child: JointId) -> f64 {
    use JointId::*;
    match child {
        HeadTop => 95.0,
        Nose => 55.0,
        RShoulder | LShoulder => 60.0,
        RElbow | LElbow => 45.0,
        RWrist | LWrist => 38.0,
        RHip | LHip => 110.0,
        RKnee | LKnee => 70.0,
        RAnkle | LAnkle => 50.0,
        Neck => 0.0,
    }
}

/// Pinhole for the simulated ceiling cameras (640 x 480, f = 525 px).
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).expect("valid constants")
}

/// Three ceiling cameras around the table looking at `target`.
pub fn camera_rig(target: &Vector3<f64>) -> Vec<CameraModel> {
    let eyes = [
        ("cam1", Vector3::new(-1500.0, -1500.0, 2600.0)),
        ("cam2", Vector3::new(-1500.0, 1500.0, 2600.0)),
        ("cam3", Vector3::new(1800.0, 0.0, 2600.0)),
    ];
    eyes.iter()
        .map(|(id, eye)| {
            let eye = Vector3::new(target.x + eye.x, target.y + eye.y, eye.z);
            let e = Extrinsics::look_at(&eye, target, &Vector3::z()).expect("cameras look down at the table");
            CameraModel::new(*id, default_intrinsics(), e)
        })
        .collect()
}

fn cuboid(center: [f64; 3], size: [f64; 3]) -> Cuboid {
    Cuboid::axis_aligned(Vector3::from(center), Vector3::from(size))
}

fn obstacle(id: &str, shape: Primitive) -> Obstacle {
    Obstacle { id: id.to_string(), shape }
}

fn jitter(rng: &mut ChaCha8Rng, mm: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-mm..=mm), rng.random_range(-mm..=mm), rng.random_range(-mm..=mm))
}

/// Patient lying supine with the neck `head_gap` mm from the head end.
fn patient(rng: &mut ChaCha8Rng, template: &SkeletonTemplate, head_end: &Vector3<f64>, table_top: f64) -> BodyParams {
    let mut body = BodyParams::rest(template);
    body.root_position = Vector3::new(head_end.x - 300.0, head_end.y + rng.random_range(-20.0..=20.0), table_top + JOINT_HEIGHT);
    body.root_orientation = Rotation3::new(Vector3::z() * rng.random_range(-0.04..=0.04));
    let mut scale_of = std::collections::HashMap::new();
    for (i, b) in template.bones.iter().enumerate() {
        let key = b.child.name().trim_start_matches(['R', 'L']).to_string();
        let s = *scale_of.entry(key).or_insert_with(|| rng.random_range(0.94..=1.06));
        body.bone_scales[i] = s;
    }
    use JointId::*;
    let abduct: f64 = rng.random_range(0.03..=0.15);
    body.joint_rotations[RShoulder.index()] = Vector3::z() * -abduct;
    body.joint_rotations[LShoulder.index()] = Vector3::z() * rng.random_range(0.03..=0.15);
    body.joint_rotations[RElbow.index()] = Vector3::y() * rng.random_range(0.0..=0.25);
    body.joint_rotations[LElbow.index()] = Vector3::y() * rng.random_range(0.0..=0.25);
    body.joint_rotations[RKnee.index()] = Vector3::y() * rng.random_range(-0.08..=0.0);
    body.joint_rotations[LKnee.index()] = Vector3::y() * rng.random_range(-0.08..=0.0);
    body
}

/// Non-coplanar calibration points spread around the table.
fn markers(center: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let offsets = [
        [-900.0, -500.0, 0.0],
        [900.0, -500.0, 0.0],
        [-900.0, 500.0, 0.0],
        [900.0, 500.0, 0.0],
        [-600.0, -700.0, 1000.0],
        [600.0, 700.0, 1000.0],
        [0.0, -700.0, 1500.0],
        [0.0, 700.0, 1500.0],
        [-1000.0, 0.0, 600.0],
        [1000.0, 0.0, 600.0],
        [300.0, -300.0, 1800.0],
        [-300.0, 300.0, 400.0],
    ];
    offsets.iter().map(|o| Vector3::new(center.x + o[0], center.y + o[1], o[2])).collect()
}

/// Builds the deterministic scene for `(seed, preset)`.
pub fn generate_scene(seed: u64, preset: &str) -> Result<Scene, SceneError> {
    let mut rng = stream_rng(seed, preset, 0);
    let template = SkeletonTemplate::default();
    let vtr_index = VTR_PRESETS.iter().position(|p| *p == preset);
    let (support, arm_slot) = match vtr_index {
        Some(_) => (0, 0),
        None => {
            let b = preset.as_bytes();
            match (preset.strip_prefix("pos-s"), b.len()) {
                (Some(_), 9) if b[6] == b'-' && b[7] == b'c' && (b'1'..=b'3').contains(&b[5]) && (b'1'..=b'3').contains(&b[8]) => {
                    ((b[5] - b'1') as usize, (b[8] - b'1') as usize)
                }
                _ => return Err(SceneError::UnknownPreset(preset.to_string())),
            }
        }
    };

    // Support positions: table translation (x, y) and height change.
    let supports = [[0.0, 0.0, 0.0], [200.0, 100.0, 60.0], [-150.0, -120.0, -50.0]];
    let s = supports[support];
    let table_top = TABLE_TOP + s[2];
    let head_end = Vector3::new(600.0 + s[0], s[1], table_top);
    let bed = vec![
        cuboid([head_end.x - 1000.0, head_end.y, table_top - 40.0], [2000.0, 600.0, 80.0]),
        cuboid([head_end.x - 1400.0, head_end.y, (table_top - 80.0) / 2.0], [500.0, 400.0, table_top - 80.0]),
    ];
    let body = patient(&mut rng, &template, &head_end, table_top);
    let neck = body.root_position;
    let iso = Vector3::new(neck.x + 100.0, neck.y, table_top + 150.0);
    let look = Vector3::new(head_end.x - 700.0, head_end.y, table_top);
    let cameras = camera_rig(&look);

    let mut obstacles = Vec::new();
    let mut carm_pose = CArmPose::new(iso, 0.0);
    let mut protocol = TrajectoryProtocol::head_scan(iso);
    let mut script = MotionScript::default();
    let (ix, iy, iz) = (iso.x, iso.y, iso.z);
    let lamp = |rng: &mut ChaCha8Rng, lift: f64| {
        // Ceiling cameras only see the top and sides, so the colliding
        // surface has to be a side face.
        let c = Vector3::new(ix, iy + 50.0, iz + 950.0 + lift) + jitter(rng, 20.0);
        obstacle("surgical_light", Primitive::Cuboid(Cuboid::axis_aligned(c, Vector3::new(500.0, 500.0, 150.0))))
    };
    let pole = |rng: &mut ChaCha8Rng, side: f64| {
        let base = Vector3::new(ix - 20.0, iy + side * 930.0, 0.0) + jitter(rng, 15.0).component_mul(&Vector3::new(1.0, 1.0, 0.0));
        obstacle("iv_pole", Primitive::Cylinder(Cylinder { a: base, b: base + Vector3::new(0.0, 0.0, 1900.0), radius: 20.0 }))
    };
    let monitor = |rng: &mut ChaCha8Rng, side: f64| {
        let c = Vector3::new(ix, iy + side * 700.0, iz + 650.0) + jitter(rng, 20.0);
        obstacle("monitor_arm", Primitive::Cuboid(Cuboid::axis_aligned(c, Vector3::new(300.0, 200.0, 150.0))))
    };
    let table = |rng: &mut ChaCha8Rng, side: f64| {
        let c = Vector3::new(ix - 50.0, iy + side * 950.0, iz - 300.0) + jitter(rng, 20.0);
        obstacle("instrument_table", Primitive::Cuboid(Cuboid::axis_aligned(c, Vector3::new(500.0, 300.0, 60.0))))
    };
    let cart = |rng: &mut ChaCha8Rng| {
        let c = Vector3::new(ix + 750.0, iy, 650.0) + jitter(rng, 20.0);
        obstacle("anesthesia_cart", Primitive::Cuboid(Cuboid::axis_aligned(c, Vector3::new(400.0, 500.0, 1300.0))))
    };
    let cabinet = |rng: &mut ChaCha8Rng| {
        let c = Vector3::new(ix - 400.0, iy - 1800.0, 900.0) + jitter(rng, 20.0);
        obstacle("cabinet", Primitive::Cuboid(Cuboid::axis_aligned(c, Vector3::new(800.0, 400.0, 1800.0))))
    };
    match preset {
        "head-side-vertical" => obstacles.extend([lamp(&mut rng, 0.0), cart(&mut rng)]),
        "full-head-vertical" => {
            obstacles.extend([lamp(&mut rng, 0.0), cart(&mut rng), pole(&mut rng, 1.0), monitor(&mut rng, -1.0)]);
        }
        "left-side-vertical" => obstacles.extend([table(&mut rng, -1.0), cabinet(&mut rng)]),
        "right-side-vertical" => obstacles.extend([table(&mut rng, 1.0)]),
        "full-left-vertical" => {
            obstacles.extend([table(&mut rng, -1.0), monitor(&mut rng, -1.0), pole(&mut rng, -1.0), cabinet(&mut rng)]);
        }
        "full-right-vertical" => obstacles.extend([table(&mut rng, 1.0), monitor(&mut rng, 1.0), pole(&mut rng, 1.0)]),
        "clear-head-vertical" => obstacles.extend([lamp(&mut rng, 400.0), cart(&mut rng), cabinet(&mut rng)]),
        "head-side-oblique" => {
            protocol = TrajectoryProtocol::sweep("oblique-scan", iso, -40.0, 160.0, 60);
            carm_pose = CArmPose::new(iso, -40.0);
            obstacles.extend([lamp(&mut rng, 0.0), pole(&mut rng, -1.0)]);
        }
        "foot-side-vertical" => {
            let knee_iso = Vector3::new(neck.x - 1050.0, iy, iz);
            protocol = TrajectoryProtocol::sweep("knee-scan", knee_iso, -100.0, 100.0, 60);
            carm_pose = CArmPose::new(knee_iso, 0.0);
            let base = Vector3::new(knee_iso.x + 30.0, iy + 900.0, 0.0);
            obstacles.push(obstacle(
                "iv_pole",
                Primitive::Cylinder(Cylinder { a: base, b: base + Vector3::new(0.0, 0.0, 1900.0), radius: 20.0 }),
            ));
        }
        "cluttered-room" => {
            for k in 0..8 {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let radius = rng.random_range(700.0..1300.0);
                let c = Vector3::new(ix + rng.random_range(-300.0..300.0), iy + radius * angle.sin(), iz + radius * angle.cos());
                if c.z < 150.0 || (c.z < table_top + 150.0 && (c.y - iy).abs() < 500.0) {
                    continue;
                }
                let shape = if k % 2 == 0 {
                    Primitive::Sphere(Sphere { center: c, radius: rng.random_range(60.0..150.0) })
                } else {
                    let size = Vector3::new(rng.random_range(100.0..300.0), rng.random_range(100.0..300.0), rng.random_range(100.0..300.0));
                    Primitive::Cuboid(Cuboid::axis_aligned(c, size))
                };
                obstacles.push(obstacle(&format!("clutter_{k}"), shape));
            }
        }
        _ => {
            // Positioning grid: C-arm parked at the head, beside the chest
            // (lateral), or tilted over the pelvis.
            let chest = Vector3::new(neck.x - 250.0, iy, iz);
            let pelvis = Vector3::new(neck.x - 550.0, iy, iz);
            carm_pose = match arm_slot {
                0 => CArmPose::new(iso, 0.0),
                1 => CArmPose::new(chest, 90.0),
                _ => CArmPose::new(pelvis, -30.0),
            };
            protocol = TrajectoryProtocol::head_scan(iso);
            script = default_occlusion_script(&body, &template, &cameras);
        }
    }

    let noise = NoiseConfig { seed, ..NoiseConfig::default() };
    let targets = TargetName::ALL.iter().map(|t| AnatomicalTarget::preset(*t)).collect();
    Ok(Scene {
        preset: preset.to_string(),
        seed,
        markers: markers(&look),
        cameras,
        bed,
        template,
        body,
        obstacles,
        carm: CArmModel::default(),
        carm_pose,
        protocol,
        targets,
        noise,
        script,
    })
}

/// A staff member blocking one camera's view of the head and right arm,
/// followed by a drape covering the right forearm in every view.
fn default_occlusion_script(body: &BodyParams, template: &SkeletonTemplate, cameras: &[CameraModel]) -> MotionScript {
    let joints = forward_kinematics(template, body);
    let head = joints[JointId::HeadTop.index()];
    let cam = &cameras[1];
    let eye = cam.extrinsics.center();
    let near = head + (eye - head) * 0.35;
    let mut script = MotionScript::default();
    script.push(
        12,
        ScriptEvent::Occlude {
            camera: Some(cam.id.clone()),
            primitive: Primitive::Capsule(Capsule { a: near - Vector3::new(250.0, 0.0, 0.0), b: near + Vector3::new(100.0, 0.0, 0.0), radius: 140.0 }),
            duration: 10,
        },
    );
    let wrist = joints[JointId::RWrist.index()];
    let elbow = joints[JointId::RElbow.index()];
    let mid = (wrist + elbow) / 2.0 + Vector3::new(0.0, 0.0, 90.0);
    script.push(
        26,
        ScriptEvent::Occlude {
            camera: None,
            primitive: Primitive::Cuboid(Cuboid::axis_aligned(mid, Vector3::new(500.0, 260.0, 20.0))),
            duration: 8,
        },
    );
    script
}

/// Applies every event with `timestep <= t`.
pub fn state_at(scene: &Scene, script: &MotionScript, t: u64) -> SceneState {
    let mut joints = forward_kinematics(&scene.template, &scene.body);
    let mut obstacles = scene.obstacles.clone();
    let mut noise = scene.noise;
    let mut occluders = Vec::new();
    for ev in script.events.iter().take_while(|e| e.timestep <= t) {
        match &ev.event {
            ScriptEvent::MoveJoint { joint, delta } => joints[joint.index()] += delta,
            ScriptEvent::Occlude { camera, primitive, duration } => {
                if t < ev.timestep + duration {
                    occluders.push((camera.clone(), *primitive));
                }
            }
            ScriptEvent::MoveObstacle { id, delta } => {
                for o in obstacles.iter_mut().filter(|o| &o.id == id) {
                    o.shape = o.shape.translated(delta);
                }
            }
            ScriptEvent::NoiseChange { noise: n } => noise = *n,
        }
    }
    SceneState { timestep: t, joints, obstacles, noise, occluders }
}

pub fn ground_truth(scene: &Scene, timestep: u64, script: &MotionScript) -> GroundTruth {
    let state = state_at(scene, script, timestep);
    let targets = scene
        .targets
        .iter()
        .filter_map(|t| locate_in(&state.joints, &scene.body.root_orientation, t).ok().map(|p| (t.name, p)))
        .collect();
    GroundTruth { timestep, joints: state.joints, targets, obstacles: state.obstacles }
}

impl Scene {
    pub fn state(&self, t: u64) -> SceneState {
        state_at(self, &self.script, t)
    }

    pub fn camera(&self, id: &str) -> Option<&CameraModel> {
        self.cameras.iter().find(|c| c.id == id)
    }

    /// C-arm surfaces for rendering: cylinder segments along the arc joined
    /// by spheres, plus the detector and source boxes.
    pub fn carm_primitives(&self, pose: &CArmPose) -> Vec<Primitive> {
        let m = &self.carm;
        let iso = pose.isometry();
        let r = m.tube_cross_section / 2.0;
        let (lo, hi) = m.arc_limits();
        // Joint spheres must sit at least a tube radius apart or the first
        // one bulges past the flat end cap.
        let n = (((hi - lo) * m.arc_radius / r).floor() as usize).clamp(1, 32);
        let pts: Vec<_> = (0..=n).map(|i| m.arc_point(lo + (hi - lo) * i as f64 / n as f64)).collect();
        let mut out: Vec<Primitive> = pts.windows(2).map(|w| Primitive::Cylinder(Cylinder { a: w[0], b: w[1], radius: r })).collect();
        out.extend(pts[1..n].iter().map(|c| Primitive::Sphere(Sphere { center: *c, radius: r })));
        out.push(Primitive::Cuboid(m.detector()));
        out.push(Primitive::Cuboid(m.source()));
        out.iter().map(|p| p.transformed(&iso)).collect()
    }

    pub fn patient_primitives(&self, joints: &JointPositions) -> Vec<Primitive> {
        self.template
            .bones
            .iter()
            .map(|b| {
                Primitive::Capsule(Capsule { a: joints[b.parent.index()], b: joints[b.child.index()], radius: segment_radius(b.child) })
            })
            .collect()
    }

    /// Every surface a depth camera sees at `state`.
    pub fn depth_primitives(&self, state: &SceneState) -> Vec<Primitive> {
        let mut prims: Vec<Primitive> = self.bed.iter().map(|b| Primitive::Cuboid(*b)).collect();
        prims.extend(self.patient_primitives(&state.joints));
        prims.extend(state.obstacles.iter().map(|o| o.shape));
        prims.extend(self.carm_primitives(&self.carm_pose));
        prims
    }

    /// Primitives that can hide a joint from `camera_id`. The patient's own
    /// body is not treated as an occluder.
    pub fn occluders_for(&self, state: &SceneState, camera_id: &str) -> Vec<Primitive> {
        let mut prims: Vec<Primitive> = state.obstacles.iter().map(|o| o.shape).collect();
        prims.extend(self.carm_primitives(&self.carm_pose));
        prims.extend(
            state
                .occluders
                .iter()
                .filter(|(cam, _)| cam.as_deref().is_none_or(|c| c == camera_id))
                .map(|(_, p)| *p),
        );
        prims
    }

    pub fn observe(&self, state: &SceneState, camera: &CameraModel) -> FrameObservations {
        synth_detect(&state.joints, camera, &self.occluders_for(state, &camera.id), &state.noise, state.timestep)
    }

    pub fn render(&self, state: &SceneState, camera: &CameraModel) -> DepthImage {
        render_depth(&self.depth_primitives(state), camera)
    }

    /// Marker correspondences per camera; markers outside a view are skipped.
    pub fn marker_observations(&self, pixel_sigma: f64, seed: u64) -> Vec<(String, Vec<Correspondence>)> {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, pixel_sigma.max(0.0)).expect("finite sigma");
        self.cameras
            .iter()
            .map(|cam| {
                let mut rng = stream_rng(seed, &cam.id, u64::MAX);
                let list = self
                    .markers
                    .iter()
                    .filter_map(|m| {
                        let px = project(cam, m).ok().filter(|p| cam.intrinsics.contains(p))?;
                        let noise = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                        Some(Correspondence { point_room: *m, point_pixel: px + noise })
                    })
                    .collect();
                (cam.id.clone(), list)
            })
            .collect()
    }
}

/// Camera-z depth of the nearest surface per pixel; 0 where nothing is hit.
pub fn render_depth(primitives: &[Primitive], camera: &CameraModel) -> DepthImage {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let bounds: Vec<_> = primitives.iter().map(|p| p.bounding_sphere()).collect();
    let rows = par::map_range(h as usize, |v| {
        (0..w)
            .map(|u| {
                let ray = camera.pixel_ray(&Vector2::new(u as f64, v as f64));
                let dir2 = ray.dir.norm_squared();
                let mut best = f64::INFINITY;
                for (prim, (c, r)) in primitives.iter().zip(&bounds) {
                    // Skip primitives whose bounding sphere the ray misses or
                    // that lie entirely behind the current nearest hit.
                    let oc = c - ray.origin;
                    let along = oc.dot(&ray.dir) / dir2;
                    let miss2 = (oc - ray.dir * along).norm_squared();
                    if miss2 > r * r || (along - r / dir2.sqrt()) > best {
                        continue;
                    }
                    if let Some(t) = prim.intersect(&ray) {
                        best = best.min(t);
                    }
                }
                if best.is_finite() { best } else { 0.0 }
            })
            .collect::<Vec<f64>>()
    });
    DepthImage { width: w, height: h, values: rows.concat() }
}
