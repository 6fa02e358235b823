//! Organized scans, sensor poses, and motion compensation.
//!
//! A scan is a fixed-size range image: `rows * cols` point records stored in
//! row-major order. Invalid pixels keep their slot so that image adjacency
//! stays intact for the range-image stages. Trajectories are sparse pose
//! samples interpolated per point timestamp when a scan is undistorted.

use nalgebra::{Point3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

/// One pixel of an organized scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Sensor-frame ray length in metres, kept verbatim through undistortion.
    pub range: f32,
    pub intensity: f32,
    /// Capture time in seconds.
    pub timestamp: f64,
    pub valid: bool,
}

impl PointRecord {
    /// Placeholder for pixels without a return.
    pub const INVALID: PointRecord = PointRecord {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        range: 0.0,
        intensity: 0.0,
        timestamp: 0.0,
        valid: false,
    };

    pub fn position(&self) -> Point3<f64> {
        Point3::new(self.x as f64, self.y as f64, self.z as f64)
    }
}

/// Row-major range image with per-point timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganizedScan {
    rows: usize,
    cols: usize,
    /// Nominal start-of-revolution time in seconds.
    pub frame_timestamp: f64,
    points: Vec<PointRecord>,
}

impl OrganizedScan {
    /// Creates a scan filled with invalid pixels.
    pub fn new(rows: usize, cols: usize, frame_timestamp: f64) -> Self {
        OrganizedScan {
            rows,
            cols,
            frame_timestamp,
            points: vec![PointRecord::INVALID; rows * cols],
        }
    }

    /// Wraps an existing point buffer. Panics if the length is not rows*cols.
    pub fn from_points(
        rows: usize,
        cols: usize,
        frame_timestamp: f64,
        points: Vec<PointRecord>,
    ) -> Self {
        assert_eq!(points.len(), rows * cols, "point buffer must be rows*cols");
        OrganizedScan {
            rows,
            cols,
            frame_timestamp,
            points,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    pub fn point(&self, row: usize, col: usize) -> &PointRecord {
        &self.points[row * self.cols + col]
    }

    pub fn point_mut(&mut self, row: usize, col: usize) -> &mut PointRecord {
        &mut self.points[row * self.cols + col]
    }

    pub fn points(&self) -> &[PointRecord] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [PointRecord] {
        &mut self.points
    }

    /// Flat indices and records of valid points.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, &PointRecord)> {
        self.points.iter().enumerate().filter(|(_, p)| p.valid)
    }

    /// 4-adjacent pixel coordinates. Columns wrap (full revolution), rows do
    /// not. Order: up, down, left, right.
    pub fn neighbors4(&self, row: usize, col: usize) -> [Option<(usize, usize)>; 4] {
        let up = (row > 0).then(|| (row - 1, col));
        let down = (row + 1 < self.rows).then(|| (row + 1, col));
        let left = Some((row, (col + self.cols - 1) % self.cols));
        let right = Some((row, (col + 1) % self.cols));
        [up, down, left, right]
    }
}

/// Rigid sensor pose at a point in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity(timestamp: f64) -> Self {
        Pose {
            timestamp,
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation.transform_point(p) + self.translation
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory is empty")]
    Empty,
    #[error("trajectory timestamps must be strictly increasing (pose {index})")]
    NotSorted { index: usize },
    #[error("timestamp {t} outside trajectory span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
}

/// Pose samples with strictly increasing timestamps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

/// Timestamps within this slack of the span are clamped to the span edge;
/// absorbs text round-trip rounding of pose files.
const TIME_SLACK: f64 = 1e-9;

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self, TrajectoryError> {
        if poses.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        for i in 1..poses.len() {
            if poses[i].timestamp <= poses[i - 1].timestamp {
                return Err(TrajectoryError::NotSorted { index: i });
            }
        }
        Ok(Trajectory { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn start_time(&self) -> f64 {
        self.poses[0].timestamp
    }

    pub fn end_time(&self) -> f64 {
        self.poses[self.poses.len() - 1].timestamp
    }

    pub fn covers(&self, t: f64) -> bool {
        t >= self.start_time() - TIME_SLACK && t <= self.end_time() + TIME_SLACK
    }
}

/// Pose at time `t`: linear interpolation of translation and spherical linear
/// interpolation of rotation between the bracketing samples.
pub fn interpolate_pose(traj: &Trajectory, t: f64) -> Result<Pose, TrajectoryError> {
    let poses = traj.poses();
    if !traj.covers(t) {
        return Err(TrajectoryError::OutOfRange {
            t,
            start: traj.start_time(),
            end: traj.end_time(),
        });
    }
    let t = t.clamp(traj.start_time(), traj.end_time());
    // First sample with timestamp >= t.
    let hi = poses.partition_point(|p| p.timestamp < t);
    if hi == 0 {
        return Ok(Pose { timestamp: t, ..poses[0] });
    }
    if hi == poses.len() {
        return Ok(Pose {
            timestamp: t,
            ..poses[poses.len() - 1]
        });
    }
    let (a, b) = (&poses[hi - 1], &poses[hi]);
    if b.timestamp == t {
        return Ok(Pose { timestamp: t, ..*b });
    }
    let u = (t - a.timestamp) / (b.timestamp - a.timestamp);
    Ok(Pose {
        timestamp: t,
        translation: a.translation.lerp(&b.translation, u),
        rotation: slerp_shortest(&a.rotation, &b.rotation, u),
    })
}

/// Slerp along the shorter arc; falls back to normalized lerp when the
/// rotations are too close for the spherical formula.
fn slerp_shortest(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, u: f64) -> UnitQuaternion<f64> {
    let b = if a.coords.dot(&b.coords) < 0.0 {
        UnitQuaternion::new_unchecked(Quaternion::from(-b.coords))
    } else {
        *b
    };
    a.try_slerp(&b, u, 1e-12).unwrap_or_else(|| {
        let l = a.lerp(&b, u);
        UnitQuaternion::try_new(l, 1e-15).unwrap_or(*a)
    })
}

/// Motion-compensates a scan: every valid point is mapped to the world frame
/// through the pose interpolated at its own timestamp. Ranges, intensities,
/// timestamps, and invalid pixels are carried over unchanged.
pub fn undistort(scan: &OrganizedScan, traj: &Trajectory) -> Result<OrganizedScan, TrajectoryError> {
    let mut out = scan.clone();
    for p in out.points_mut().iter_mut().filter(|p| p.valid) {
        let pose = interpolate_pose(traj, p.timestamp)?;
        let w = pose.transform_point(&Point3::new(p.x as f64, p.y as f64, p.z as f64));
        p.x = w.x as f32;
        p.y = w.y as f32;
        p.z = w.z as f32;
    }
    Ok(out)
}
