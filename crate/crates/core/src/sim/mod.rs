//! Synthetic scene simulator: declarative scenes rendered into organized
//! scan sequences with per-point ground-truth motion labels.
//!
//! A scene is static geometry (axis planes and boxes), movers on timed
//! piecewise-linear paths, and a sensor on its own path. Scenes load from
//! TOML; four presets ship built in.

mod primitives;
mod render;

pub use primitives::Prim;
pub use render::{generate_sequence, render_scan, sequence_trajectory, RenderedScan};

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::io::IoError;

/// Speed below which a path segment counts as stationary, in m/s.
pub const STATIONARY_SPEED: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("scene: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?}; available: static-room, movers-mixed, stop-and-go, crowd")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub scan_count: usize,
    /// Stationary spells no longer than this, bounded by motion on both
    /// sides, still count as moving in the truth labels.
    #[serde(default = "default_pause_grace")]
    pub pause_grace: f64,
    pub sensor: SensorSpec,
    pub sensor_path: Vec<Waypoint>,
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default)]
    pub movers: Vec<MoverSpec>,
}

fn default_pause_grace() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub rows: usize,
    pub cols: usize,
    pub rate_hz: f64,
    /// Elevation of row 0, degrees above horizontal.
    pub fov_up_deg: f64,
    /// Elevation of the last row.
    pub fov_down_deg: f64,
    pub max_range: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub pos: [f64; 3],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub axis: Axis,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoverSpec {
    pub shape: MoverShape,
    /// Shape parameters: sphere `[radius]`, box half-extents `[hx, hy, hz]`,
    /// cylinder `[radius, height]` with the anchor at the bottom center,
    /// biped `[height]` with the anchor at the ground contact.
    pub size: Vec<f64>,
    pub path: Vec<Waypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoverShape {
    Sphere,
    Box,
    Cylinder,
    Biped,
}

impl MoverShape {
    fn size_arity(self) -> usize {
        match self {
            MoverShape::Sphere | MoverShape::Biped => 1,
            MoverShape::Cylinder => 2,
            MoverShape::Box => 3,
        }
    }
}

impl SceneSpec {
    pub fn from_toml_str(text: &str) -> Result<SceneSpec, SimError> {
        let spec: SceneSpec =
            toml::from_str(text).map_err(|e| SimError::Invalid(format!("parse: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<SceneSpec, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(IoError::Io(e)))?;
        SceneSpec::from_toml_str(&text)
    }

    pub fn duration(&self) -> f64 {
        self.scan_count as f64 / self.sensor.rate_hz
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Invalid(m));
        if self.scan_count == 0 {
            return err("scan_count must be at least 1".into());
        }
        let s = &self.sensor;
        if s.rows == 0 || s.cols == 0 {
            return err("sensor rows and cols must be positive".into());
        }
        if s.rows > u16::MAX as usize || s.cols > u16::MAX as usize {
            return err("sensor rows and cols must fit in 16 bits".into());
        }
        if !(s.rate_hz > 0.0) {
            return err("sensor rate_hz must be positive".into());
        }
        if !(s.fov_up_deg > s.fov_down_deg) {
            return err("fov_up_deg must exceed fov_down_deg".into());
        }
        if !(s.max_range > 0.0) {
            return err("max_range must be positive".into());
        }
        if !(s.noise_sigma >= 0.0) {
            return err("noise_sigma must be non-negative".into());
        }
        if !(self.pause_grace >= 0.0) {
            return err("pause_grace must be non-negative".into());
        }
        validate_path("sensor_path", &self.sensor_path)?;
        for (i, m) in self.movers.iter().enumerate() {
            if m.size.len() != m.shape.size_arity() {
                return err(format!(
                    "mover {i}: {:?} takes {} size values, found {}",
                    m.shape,
                    m.shape.size_arity(),
                    m.size.len()
                ));
            }
            if m.size.iter().any(|&v| !(v > 0.0)) {
                return err(format!("mover {i}: size values must be positive"));
            }
            validate_path(&format!("mover {i} path"), &m.path)?;
        }
        Ok(())
    }
}

fn validate_path(what: &str, waypoints: &[Waypoint]) -> Result<(), SimError> {
    if waypoints.is_empty() {
        return Err(SimError::Invalid(format!("{what}: needs a waypoint")));
    }
    for pair in waypoints.windows(2) {
        if !(pair[1].t > pair[0].t) {
            return Err(SimError::Invalid(format!(
                "{what}: waypoint times must strictly increase ({} then {})",
                pair[0].t, pair[1].t
            )));
        }
    }
    if waypoints
        .iter()
        .any(|w| !w.t.is_finite() || w.pos.iter().any(|v| !v.is_finite()))
    {
        return Err(SimError::Invalid(format!("{what}: non-finite value")));
    }
    Ok(())
}

/// Piecewise-linear position over timed waypoints, clamped at both ends,
/// with precomputed arc length and stationary-interval analysis.
#[derive(Debug, Clone)]
pub struct PiecewisePath {
    times: Vec<f64>,
    positions: Vec<Vector3<f64>>,
    /// Arc length accumulated up to each waypoint.
    arc: Vec<f64>,
    /// Maximal stationary [start, end] spells that the pause grace covers.
    graced: Vec<(f64, f64)>,
}

impl PiecewisePath {
    pub fn new(waypoints: &[Waypoint], pause_grace: f64) -> PiecewisePath {
        let times: Vec<f64> = waypoints.iter().map(|w| w.t).collect();
        let positions: Vec<Vector3<f64>> = waypoints
            .iter()
            .map(|w| Vector3::new(w.pos[0], w.pos[1], w.pos[2]))
            .collect();
        let mut arc = vec![0.0];
        for i in 1..positions.len() {
            let len = (positions[i] - positions[i - 1]).norm();
            arc.push(arc[i - 1] + len);
        }

        // Merge consecutive stationary segments into maximal spells; a spell
        // is graced when it is short and flanked by motion on both sides.
        let moving: Vec<bool> = (1..positions.len())
            .map(|i| {
                let dt = times[i] - times[i - 1];
                (positions[i] - positions[i - 1]).norm() / dt > STATIONARY_SPEED
            })
            .collect();
        let mut graced = Vec::new();
        let mut i = 0;
        while i < moving.len() {
            if moving[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i < moving.len() && !moving[i] {
                i += 1;
            }
            let bounded = start > 0 && i < moving.len();
            let span = times[i] - times[start];
            if bounded && span <= pause_grace {
                graced.push((times[start], times[i]));
            }
        }

        PiecewisePath {
            times,
            positions,
            arc,
            graced,
        }
    }

    /// Index of the segment containing t, clamped to the path span.
    fn segment(&self, t: f64) -> usize {
        if self.times.len() < 2 {
            return 0;
        }
        let n = self.times.partition_point(|&wt| wt <= t);
        n.clamp(1, self.times.len() - 1) - 1
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        if self.times.len() == 1 || t <= self.times[0] {
            return self.positions[0];
        }
        if t >= *self.times.last().unwrap() {
            return *self.positions.last().unwrap();
        }
        let i = self.segment(t);
        let f = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.positions[i].lerp(&self.positions[i + 1], f)
    }

    pub fn speed(&self, t: f64) -> f64 {
        if self.times.len() == 1 || t < self.times[0] || t >= *self.times.last().unwrap() {
            return 0.0;
        }
        let i = self.segment(t);
        let dt = self.times[i + 1] - self.times[i];
        (self.positions[i + 1] - self.positions[i]).norm() / dt
    }

    /// Distance travelled along the path up to t.
    pub fn arc_length(&self, t: f64) -> f64 {
        if self.times.len() == 1 || t <= self.times[0] {
            return 0.0;
        }
        if t >= *self.times.last().unwrap() {
            return *self.arc.last().unwrap();
        }
        let i = self.segment(t);
        let f = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.arc[i] + (self.arc[i + 1] - self.arc[i]) * f
    }

    /// Unit travel direction in the xy plane; looks back past stationary
    /// segments, falling back to +x before any motion.
    pub fn heading_xy(&self, t: f64) -> Vector3<f64> {
        let mut i = self.segment(t).min(self.times.len().saturating_sub(2));
        loop {
            if self.times.len() >= 2 {
                let d = self.positions[i + 1] - self.positions[i];
                let flat = Vector3::new(d.x, d.y, 0.0);
                if flat.norm() > 1e-9 {
                    return flat.normalize();
                }
            }
            if i == 0 {
                return Vector3::x();
            }
            i -= 1;
        }
    }

    /// True when the truth labels should call the object moving at t:
    /// actually moving, or inside a graced pause.
    pub fn dynamic_at(&self, t: f64) -> bool {
        if self.speed(t) > STATIONARY_SPEED {
            return true;
        }
        self.graced.iter().any(|&(a, b)| t >= a && t < b)
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

impl MoverSpec {
    /// World-space solids of this mover at path position `pos`.
    /// `path` provides gait phase and heading for the biped.
    pub(crate) fn prims_at(&self, path: &PiecewisePath, t: f64) -> Vec<Prim> {
        let pos = path.position(t);
        let anchor = Point3::from(pos);
        match self.shape {
            MoverShape::Sphere => vec![Prim::Sphere {
                center: anchor,
                radius: self.size[0],
            }],
            MoverShape::Box => {
                let h = Vector3::new(self.size[0], self.size[1], self.size[2]);
                vec![Prim::Aabb {
                    min: anchor - h,
                    max: anchor + h,
                }]
            }
            MoverShape::Cylinder => vec![Prim::Cylinder {
                base: anchor,
                radius: self.size[0],
                height: self.size[1],
            }],
            MoverShape::Biped => {
                let h = self.size[0];
                let heading = path.heading_xy(t);
                let lateral = Vector3::new(-heading.y, heading.x, 0.0);
                let phase = std::f64::consts::TAU * path.arc_length(t) / 0.7;
                let swing = 0.2 * phase.sin();
                let leg_r = 0.06 * h;
                let leg_h = 0.5 * h;
                let leg_off = 0.09 * h;
                let torso_center = anchor + Vector3::new(0.0, 0.0, 0.7 * h);
                vec![
                    Prim::Cylinder {
                        base: anchor + lateral * leg_off + heading * swing,
                        radius: leg_r,
                        height: leg_h,
                    },
                    Prim::Cylinder {
                        base: anchor - lateral * leg_off - heading * swing,
                        radius: leg_r,
                        height: leg_h,
                    },
                    Prim::Ellipsoid {
                        center: torso_center,
                        radii: Vector3::new(0.13 * h, 0.13 * h, 0.25 * h),
                    },
                ]
            }
        }
    }
}

pub const PRESET_NAMES: [&str; 4] = ["static-room", "movers-mixed", "stop-and-go", "crowd"];

/// Built-in scene by name; the same definitions ship as files under
/// `scenes/`.
pub fn preset(name: &str) -> Result<SceneSpec, SimError> {
    let text = match name {
        "static-room" => include_str!("../../../../scenes/static-room.toml"),
        "movers-mixed" => include_str!("../../../../scenes/movers-mixed.toml"),
        "stop-and-go" => include_str!("../../../../scenes/stop-and-go.toml"),
        "crowd" => include_str!("../../../../scenes/crowd.toml"),
        other => return Err(SimError::UnknownPreset(other.to_string())),
    };
    SceneSpec::from_toml_str(text)
}
