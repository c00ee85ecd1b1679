//! Perception and safety core for a vision-guided robotic C-arm.
//!
//! The crate covers the path from calibrated multi-view cameras to a scan
//! decision:
//!
//! 1. [`geometry`]: pinhole projection, PnP calibration, depth unprojection.
//! 2. [`observation`]: per-view 2D keypoints and a seeded oracle detector.
//! 3. [`triangulation`]: confidence-weighted triangulation over camera subsets.
//! 4. [`temporal`]: KS-windowing drift detection and per-joint consolidation.
//! 5. [`bodyfit`]: scaled-bone skeleton fit and anatomical target lookup.
//! 6. [`vtr`]: virtual test run, i.e. voxel collision checks along a C-arm sweep.
//! 7. [`scenesim`]: synthetic operating-room scenes providing ground truth.
//! 8. [`metrics`]: MPJPE, PCK, collision precision/recall and timing.
//!
//! [`pipeline`] wires the stages together for the CLI and the acceptance suite.
//! Inner loops run on rayon when the `parallel` feature is enabled (default).

pub mod bodyfit;
pub mod cloud;
pub mod geometry;
pub mod io;
pub mod lsq;
pub mod metrics;
pub mod observation;
pub mod par;
pub mod pipeline;
pub mod primitives;
pub mod scenesim;
pub mod temporal;
pub mod triangulation;
pub mod vtr;

pub use cloud::PointCloud;
pub use geometry::{CameraModel, Extrinsics, Intrinsics};
pub use observation::JointId;
