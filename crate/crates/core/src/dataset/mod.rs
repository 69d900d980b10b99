//! Dataset types: camera intrinsics, RGB-D frames, trajectories.
//!
//! Depth convention: in-memory depth is the Euclidean distance along the
//! pixel's unit ray (what the renderer composites against). TUM-layout files
//! store z-depth; the loader and exporter convert between the two.

pub mod synth;
pub mod tum;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::diff::PoseParam;
use crate::error::{Result, SlamError};
use crate::math::{vec, Quat, Real};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Depth image units per meter (TUM convention: 5000).
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(SlamError::invalid("focal lengths must be positive"));
        }
        if !(0.0 < self.cx && self.cx < self.width as f64)
            || !(0.0 < self.cy && self.cy < self.height as f64)
        {
            return Err(SlamError::invalid("principal point must be inside the image"));
        }
        if self.depth_scale <= 0.0 {
            return Err(SlamError::invalid("depth_scale must be positive"));
        }
        Ok(())
    }

    /// Unit ray direction of pixel (u, v) in the camera frame
    /// (x right, y down, z forward).
    pub fn pixel_dir<T: Real>(&self, u: f64, v: f64) -> [T; 3] {
        let d = [
            T::of((u - self.cx) / self.fx),
            T::of((v - self.cy) / self.fy),
            T::one(),
        ];
        vec::normalize(d)
    }

    /// Conversion factor from z-depth to ray depth at pixel (u, v).
    pub fn ray_depth_factor(&self, u: f64, v: f64) -> f64 {
        let x = (u - self.cx) / self.fx;
        let y = (v - self.cy) / self.fy;
        (x * x + y * y + 1.0).sqrt()
    }

    /// Projects a camera-frame point; returns (u, v, z) when z > 0.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        Some((
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
            p[2],
        ))
    }
}

/// One RGB-D frame. Color channels in [0,1]; depth in meters along the unit
/// pixel ray, 0 = invalid.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: usize,
    pub timestamp: f64,
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
}

impl Frame {
    pub fn color_at(&self, x: usize, y: usize) -> [f32; 3] {
        self.color[y * self.width + x]
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f32 {
        self.depth[y * self.width + x]
    }

    /// Luma image for the corner detector.
    pub fn grayscale(&self) -> Vec<f32> {
        self.color
            .iter()
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect()
    }
}

/// Timestamped poses (world-from-camera).
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub stamps: Vec<f64>,
    pub poses: Vec<PoseParam<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn push(&mut self, stamp: f64, pose: PoseParam<f64>) {
        self.stamps.push(stamp);
        self.poses.push(pose);
    }
}

/// An RGB-D sequence with optional ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    pub gt_trajectory: Option<Trajectory>,
    pub gt_mesh: Option<crate::eval::mesh::TriangleMesh>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let mut prev = f64::NEG_INFINITY;
        for f in &self.frames {
            if f.width != w || f.height != h {
                return Err(SlamError::invalid(format!(
                    "frame {} is {}x{}, intrinsics say {w}x{h}",
                    f.id, f.width, f.height
                )));
            }
            if f.timestamp < prev {
                return Err(SlamError::invalid("frames are not time-ordered"));
            }
            prev = f.timestamp;
        }
        Ok(())
    }
}

/// Writes a trajectory in TUM format: `timestamp tx ty tz qx qy qz qw`,
/// one line per pose, nine decimals.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# timestamp tx ty tz qx qy qz qw")?;
    for (stamp, pose) in traj.stamps.iter().zip(&traj.poses) {
        let q = pose.rotation.normalized();
        let t = pose.translation;
        writeln!(
            f,
            "{stamp:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            t[0], t[1], t[2], q.x, q.y, q.z, q.w
        )?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut traj = Trajectory::default();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(SlamError::format(format!(
                "trajectory line {}: expected 8 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut v = [0.0f64; 8];
        for (k, s) in fields.iter().enumerate() {
            v[k] = s.parse().map_err(|_| {
                SlamError::format(format!("trajectory line {}: bad number '{s}'", lineno + 1))
            })?;
        }
        traj.push(
            v[0],
            PoseParam::new(Quat::new(v[7], v[4], v[5], v[6]), [v[1], v[2], v[3]]),
        );
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_dir_is_unit_and_centered() {
        let k = CameraIntrinsics {
            fx: 300.0,
            fy: 300.0,
            cx: 160.0,
            cy: 120.0,
            width: 320,
            height: 240,
            depth_scale: 5000.0,
        };
        let d: [f64; 3] = k.pixel_dir(160.0, 120.0);
        assert!((d[0]).abs() < 1e-12 && (d[1]).abs() < 1e-12 && (d[2] - 1.0).abs() < 1e-12);
        let d: [f64; 3] = k.pixel_dir(0.0, 0.0);
        assert!((vec::norm(d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let mut traj = Trajectory::default();
        for i in 0..5 {
            let q = Quat::from_axis_angle([0.1, 0.9, -0.3], 0.2 * i as f64);
            traj.push(
                1000.0 + i as f64 * 0.05,
                PoseParam::new(q, [i as f64 * 0.1, -0.2, 1.0]),
            );
        }
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for i in 0..traj.len() {
            assert!((back.stamps[i] - traj.stamps[i]).abs() < 1e-8);
            for k in 0..3 {
                assert!((back.poses[i].translation[k] - traj.poses[i].translation[k]).abs() < 1e-8);
            }
            assert!(back.poses[i].rotation.angle_to(traj.poses[i].rotation) < 1e-7);
        }
    }

    #[test]
    fn empty_trajectory_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        write_trajectory(&path, &Trajectory::default()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with('#'));
        assert_eq!(read_trajectory(&path).unwrap().len(), 0);
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "# header\n1.0 2.0 3.0\n").unwrap();
        let err = read_trajectory(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
