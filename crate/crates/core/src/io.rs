//! On-disk formats: versioned JSON documents, JSON-lines record streams and
//! CSV depth rasters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, Correspondence, DepthImage, Intrinsics};
use crate::observation::FrameObservations;
use crate::triangulation::ScoredKeypoint3D;

/// Version stamped into every JSON document this crate writes.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json { path: path.into(), line: 0, source })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| IoError::Json { path: path.into(), line: source.line(), source })
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|source| IoError::Json { path: path.into(), line: 0, source })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| IoError::Json { path: path.into(), line: i + 1, source })?);
    }
    Ok(out)
}

fn check_version(path: &Path, found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(IoError::Version { path: path.into(), found });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigCamera {
    #[serde(flatten)]
    pub camera: CameraModel,
    /// Marker reprojection RMS from calibration, px.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rms_px: Option<f64>,
}

/// Calibrated camera rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub format_version: u32,
    pub cameras: Vec<RigCamera>,
}

impl RigFile {
    pub fn new(cameras: Vec<RigCamera>) -> Self {
        Self { format_version: FORMAT_VERSION, cameras }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let rig: Self = read_json(path)?;
        check_version(path, rig.format_version)?;
        Ok(rig)
    }

    pub fn camera_models(&self) -> Vec<CameraModel> {
        self.cameras.iter().map(|c| c.camera.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSet {
    pub camera_id: String,
    pub intrinsics: Intrinsics,
    pub correspondences: Vec<Correspondence>,
}

/// Calibration input: marker correspondences per camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerFile {
    pub format_version: u32,
    pub cameras: Vec<MarkerSet>,
}

impl MarkerFile {
    pub fn new(cameras: Vec<MarkerSet>) -> Self {
        Self { format_version: FORMAT_VERSION, cameras }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file: Self = read_json(path)?;
        check_version(path, file.format_version)?;
        Ok(file)
    }
}

/// One line of the observation stream; re-inserted on read so ordering and
/// uniqueness are enforced.
pub fn read_observations(path: &Path) -> Result<Vec<FrameObservations>> {
    let raw: Vec<FrameObservations> = read_jsonl(path)?;
    raw.into_iter()
        .map(|f| {
            let mut clean = FrameObservations::new(f.camera_id.clone(), f.timestep);
            for o in f.observations() {
                o.validate()
                    .and_then(|_| clean.insert(*o))
                    .map_err(|e| IoError::Invalid { path: path.into(), msg: e.to_string() })?;
            }
            Ok(clean)
        })
        .collect()
}

/// A 3D keypoint as written to `keypoints3d` and `consolidated` streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    /// Timestep of the frame that produced this record.
    pub frame: u64,
    pub consolidated: bool,
    #[serde(flatten)]
    pub keypoint: ScoredKeypoint3D,
}

/// Depth raster as CSV, one image row per line, millimeters.
pub fn write_depth_csv(path: &Path, depth: &DepthImage) -> Result<()> {
    let mut w = create(path)?;
    for row in depth.values.chunks(depth.width as usize) {
        let line: Vec<String> = row.iter().map(|d| format!("{d}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_depth_csv(path: &Path) -> Result<DepthImage> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0u32;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| IoError::Invalid { path: path.into(), msg: format!("line {}: {e}", i + 1) })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(IoError::Invalid { path: path.into(), msg: format!("line {} has {} values, expected {w}", i + 1, row.len()) })
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    DepthImage::new(width.unwrap_or(0) as u32, height, values).map_err(|e| IoError::Invalid { path: path.into(), msg: e.to_string() })
}
