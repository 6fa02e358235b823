//! Scan rendering and sequence generation.

use super::primitives::Prim;
use super::{PiecewisePath, SceneSpec, SimError};
use crate::io::{self, SequenceLayout, SequenceManifest};
use crate::scan::{OrganizedScan, PointRecord, Pose, Trajectory};
use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

/// One rendered revolution: the scan plus per-pixel truth labels
/// (1 = moving object, 0 = static or no return).
pub struct RenderedScan {
    pub scan: OrganizedScan,
    pub truth: Vec<u32>,
}

/// Renders one revolution. Deterministic in (spec, scan_index): the noise
/// stream is keyed to the scan index, never to render order.
pub fn render_scan(spec: &SceneSpec, scan_index: usize) -> RenderedScan {
    let s = &spec.sensor;
    let (rows, cols) = (s.rows, s.cols);
    let t0 = scan_index as f64 / s.rate_hz;
    let col_dt = 1.0 / (s.rate_hz * cols as f64);

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(scan_index as u64);
    let noise = Normal::new(0.0, s.noise_sigma).expect("validated sigma");

    let sensor_path = PiecewisePath::new(&spec.sensor_path, spec.pause_grace);
    let mover_paths: Vec<PiecewisePath> = spec
        .movers
        .iter()
        .map(|m| PiecewisePath::new(&m.path, spec.pause_grace))
        .collect();

    let mut static_prims: Vec<Prim> = Vec::new();
    for p in &spec.planes {
        static_prims.push(Prim::AxisPlane {
            axis: p.axis.index(),
            offset: p.offset,
        });
    }
    for b in &spec.boxes {
        static_prims.push(Prim::Aabb {
            min: Point3::new(b.min[0], b.min[1], b.min[2]),
            max: Point3::new(b.max[0], b.max[1], b.max[2]),
        });
    }

    // Row directions depend only on elevation; azimuth rotates per column.
    let elevations: Vec<(f64, f64)> = (0..rows)
        .map(|r| {
            let el = if rows == 1 {
                s.fov_up_deg
            } else {
                s.fov_up_deg + (s.fov_down_deg - s.fov_up_deg) * r as f64 / (rows - 1) as f64
            };
            let el = el.to_radians();
            (el.cos(), el.sin())
        })
        .collect();

    let mut scan = OrganizedScan::new(rows, cols, t0);
    let mut truth = vec![0u32; rows * cols];

    for c in 0..cols {
        let t = t0 + c as f64 * col_dt;
        let origin = Point3::from(sensor_path.position(t));
        let az = std::f64::consts::TAU * c as f64 / cols as f64;
        let (cos_az, sin_az) = (az.cos(), az.sin());

        let movers_now: Vec<(Vec<Prim>, bool)> = spec
            .movers
            .iter()
            .zip(&mover_paths)
            .map(|(m, path)| (m.prims_at(path, t), path.dynamic_at(t)))
            .collect();

        for r in 0..rows {
            let (cos_el, sin_el) = elevations[r];
            let dir = Vector3::new(cos_el * cos_az, cos_el * sin_az, sin_el);

            let mut best: Option<(f64, bool)> = None;
            let mut consider = |dist: f64, dynamic: bool| {
                if best.is_none_or(|(b, _)| dist < b) {
                    best = Some((dist, dynamic));
                }
            };
            for prim in &static_prims {
                if let Some(h) = prim.hit(&origin, &dir) {
                    consider(h, false);
                }
            }
            for (prims, dynamic) in &movers_now {
                for prim in prims {
                    if let Some(h) = prim.hit(&origin, &dir) {
                        consider(h, *dynamic);
                    }
                }
            }

            let Some((dist, dynamic)) = best.filter(|&(d, _)| d <= s.max_range) else {
                continue;
            };
            let range = (dist + noise.sample(&mut rng)).max(1e-3);
            let p = dir * range;
            let idx = scan.index(r, c);
            scan.points_mut()[idx] = PointRecord {
                x: p.x as f32,
                y: p.y as f32,
                z: p.z as f32,
                range: range as f32,
                intensity: (1.0 / (1.0 + dist)) as f32,
                timestamp: t,
                valid: true,
            };
            truth[idx] = dynamic as u32;
        }
    }

    RenderedScan { scan, truth }
}

/// Sensor poses for the whole sequence: every scan boundary plus every
/// sensor waypoint inside the span, so linear interpolation reproduces the
/// path exactly.
pub fn sequence_trajectory(spec: &SceneSpec) -> Trajectory {
    let path = PiecewisePath::new(&spec.sensor_path, spec.pause_grace);
    let duration = spec.duration();
    let mut times: Vec<f64> = (0..=spec.scan_count)
        .map(|k| k as f64 / spec.sensor.rate_hz)
        .collect();
    times.extend(
        spec.sensor_path
            .iter()
            .map(|w| w.t)
            .filter(|&t| t > 0.0 && t < duration),
    );
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

    let poses: Vec<Pose> = times
        .into_iter()
        .map(|t| Pose {
            timestamp: t,
            translation: path.position(t),
            rotation: UnitQuaternion::identity(),
        })
        .collect();
    Trajectory::new(poses).expect("times are sorted and deduplicated")
}

/// Renders the whole sequence into `out_root`: `scans/`, `truth/`,
/// `trajectory.txt`, and a `manifest.json` with digests of every file.
pub fn generate_sequence(spec: &SceneSpec, out_root: &Path) -> Result<SequenceManifest, SimError> {
    spec.validate()?;
    let layout = SequenceLayout::new(out_root);
    std::fs::create_dir_all(layout.scan_dir()).map_err(io::IoError::Io)?;
    std::fs::create_dir_all(layout.truth_dir()).map_err(io::IoError::Io)?;

    let rendered: Vec<RenderedScan> = (0..spec.scan_count)
        .into_par_iter()
        .map(|i| render_scan(spec, i))
        .collect();

    let mut files = BTreeMap::new();
    let mut digest_into = |rel: String, path: &Path| -> Result<(), io::IoError> {
        files.insert(rel, io::digest_file(path)?);
        Ok(())
    };
    for (i, r) in rendered.iter().enumerate() {
        let scan_path = layout.scan_path(i);
        let truth_path = layout.truth_path(i);
        io::write_scan(&scan_path, &r.scan)?;
        io::write_labels(&truth_path, &r.truth)?;
        digest_into(format!("scans/scan_{i:06}.bin"), &scan_path)?;
        digest_into(format!("truth/labels_{i:06}.bin"), &truth_path)?;
    }

    let traj = sequence_trajectory(spec);
    io::write_trajectory(&layout.trajectory_path(), &traj)?;
    digest_into("trajectory.txt".to_string(), &layout.trajectory_path())?;

    let mut extra = BTreeMap::new();
    extra.insert("seed".to_string(), spec.seed.to_string());
    extra.insert(
        "noise_sigma".to_string(),
        format!("{}", spec.sensor.noise_sigma),
    );
    extra.insert("pause_grace".to_string(), format!("{}", spec.pause_grace));
    extra.insert("movers".to_string(), spec.movers.len().to_string());
    let manifest = SequenceManifest {
        name: spec.name.clone(),
        scan_count: spec.scan_count,
        rows: spec.sensor.rows,
        cols: spec.sensor.cols,
        rate_hz: spec.sensor.rate_hz,
        files,
        extra,
    };
    io::write_manifest(&layout.manifest_path(), &manifest)?;
    Ok(manifest)
}
