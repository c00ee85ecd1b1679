//! Room-frame point clouds with ASCII PLY and CSV persistence.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed point cloud at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        debug_assert!(points.iter().all(|p| p.iter().all(|x| x.is_finite())));
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    pub fn concat<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> PointCloud {
        let mut out = PointCloud::default();
        for c in clouds {
            out.extend(c);
        }
        out
    }

    /// Keeps points inside the half-open box `[min, max)`.
    pub fn cropped(&self, min: &Vector3<f64>, max: &Vector3<f64>) -> PointCloud {
        let inside = |p: &Vector3<f64>| (0..3).all(|i| p[i] >= min[i] && p[i] < max[i]);
        PointCloud::new(self.points.iter().copied().filter(inside).collect())
    }

    pub fn write_ply<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.points.len())?;
        writeln!(w, "property double x")?;
        writeln!(w, "property double y")?;
        writeln!(w, "property double z")?;
        writeln!(w, "end_header")?;
        for p in &self.points {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
        Ok(())
    }

    /// Reads ASCII PLY; only the first three vertex properties are used.
    pub fn read_ply<R: BufRead>(r: R) -> Result<PointCloud, CloudIoError> {
        let mut lines = r.lines().enumerate();
        let mut count: Option<usize> = None;
        let mut saw_magic = false;
        for (i, line) in lines.by_ref() {
            let line = line?;
            let t = line.trim();
            if i == 0 {
                if t != "ply" {
                    return Err(CloudIoError::Parse { line: 1, msg: "missing 'ply' magic".into() });
                }
                saw_magic = true;
                continue;
            }
            if t.starts_with("format") && !t.contains("ascii") {
                return Err(CloudIoError::Parse { line: i + 1, msg: "only ascii PLY is supported".into() });
            }
            if let Some(rest) = t.strip_prefix("element vertex") {
                count = rest.trim().parse().ok();
            }
            if t == "end_header" {
                break;
            }
        }
        if !saw_magic {
            return Err(CloudIoError::Parse { line: 1, msg: "empty file".into() });
        }
        let count = count.ok_or(CloudIoError::Parse { line: 0, msg: "no vertex element".into() })?;
        let mut points = Vec::with_capacity(count);
        for (i, line) in lines.take(count) {
            points.push(parse_xyz(&line?, i + 1, char::is_whitespace)?);
        }
        if points.len() != count {
            return Err(CloudIoError::Parse { line: 0, msg: format!("expected {count} vertices, got {}", points.len()) });
        }
        Ok(PointCloud::new(points))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y,z")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.x, p.y, p.z)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<PointCloud, CloudIoError> {
        let mut points = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || (i == 0 && t.starts_with('x')) {
                continue;
            }
            points.push(parse_xyz(t, i + 1, |c| c == ',')?);
        }
        Ok(PointCloud::new(points))
    }
}

fn parse_xyz(line: &str, lineno: usize, sep: impl Fn(char) -> bool) -> Result<Vector3<f64>, CloudIoError> {
    let vals: Vec<f64> = line
        .split(sep)
        .filter(|s| !s.is_empty())
        .take(3)
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CloudIoError::Parse { line: lineno, msg: e.to_string() })?;
    if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
        return Err(CloudIoError::Parse { line: lineno, msg: "expected three finite coordinates".into() });
    }
    Ok(Vector3::new(vals[0], vals[1], vals[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ply_and_csv_roundtrip(pts in proptest::collection::vec((-1e4f64..1e4, -1e4f64..1e4, -1e4f64..1e4), 0..50)) {
            let cloud = PointCloud::new(pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect());
            let mut buf = Vec::new();
            cloud.write_ply(&mut buf).unwrap();
            prop_assert_eq!(&PointCloud::read_ply(&buf[..]).unwrap(), &cloud);
            let mut buf = Vec::new();
            cloud.write_csv(&mut buf).unwrap();
            prop_assert_eq!(&PointCloud::read_csv(&buf[..]).unwrap(), &cloud);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(PointCloud::read_ply(&b"nope\n"[..]).is_err());
        assert!(PointCloud::read_csv(&b"x,y,z\n1,2\n"[..]).is_err());
        let truncated = b"ply\nformat ascii 1.0\nelement vertex 2\nend_header\n1 2 3\n";
        assert!(PointCloud::read_ply(&truncated[..]).is_err());
    }

    #[test]
    fn crop_is_half_open() {
        let c = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.5, 0.5)]);
        let out = c.cropped(&Vector3::zeros(), &Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(out.len(), 1);
    }
}
