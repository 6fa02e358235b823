//! Edge/plane feature extraction from organized scans, label-based feature
//! classification, and cleaned aggregate map building.
//!
//! Smoothness follows the classic odometry convention: per point, the
//! absolute sum of range differences across a symmetric same-row window,
//! normalized by window size and range. High-smoothness points are corners
//! (edge features), low ones lie on planar patches.

use crate::scan::{undistort, OrganizedScan, Trajectory, TrajectoryError};
use nalgebra::Point3;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Neighbors on each side of a point contributing to its smoothness.
pub const SMOOTHNESS_HALF_WINDOW: usize = 5;
pub const SECTORS_PER_ROW: usize = 6;
pub const EDGES_PER_SECTOR: usize = 2;
pub const PLANES_PER_SECTOR: usize = 4;
pub const DEFAULT_MAP_RANGE: f64 = 30.0;
pub const DEFAULT_MAP_DOWNSAMPLE: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("sequences misaligned: {0}")]
    MisalignedSequences(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Edge,
    Plane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureClass {
    Static,
    Dynamic,
}

#[derive(Debug, Clone)]
pub struct Feature {
    pub kind: FeatureKind,
    /// Flat index of the feature point in its scan.
    pub point_index: usize,
    pub smoothness: f64,
    /// The feature point plus the window points its smoothness summed over.
    pub contributing_indices: Vec<usize>,
    /// Meaningful only after `classify_features`; extraction leaves Static.
    pub classification: FeatureClass,
}

/// Per-pixel smoothness, `None` where the symmetric window would leave the
/// row or cross an invalid pixel. Rows do not wrap: border columns carry no
/// score even on full-circle scans, which keeps sector buckets contiguous.
pub fn compute_smoothness(scan: &OrganizedScan) -> Vec<Option<f64>> {
    let (rows, cols) = (scan.rows(), scan.cols());
    let h = SMOOTHNESS_HALF_WINDOW;
    let mut out = vec![None; scan.len()];
    if cols < 2 * h + 1 {
        return out;
    }
    for row in 0..rows {
        for col in h..cols - h {
            let center = scan.point(row, col);
            if !center.valid || center.range <= 0.0 {
                continue;
            }
            let mut sum = 0.0f64;
            let mut whole_window = true;
            for j in col - h..=col + h {
                if j == col {
                    continue;
                }
                let p = scan.point(row, j);
                if !p.valid {
                    whole_window = false;
                    break;
                }
                sum += p.range as f64 - center.range as f64;
            }
            if whole_window {
                out[scan.index(row, col)] =
                    Some(sum.abs() / (2.0 * h as f64 * center.range as f64));
            }
        }
    }
    out
}

/// Selects features row by row: each row splits into equal column sectors,
/// and within a sector the two highest-smoothness points become edges and
/// the four lowest become planes. Ties break toward the lower column, so
/// extraction is deterministic.
pub fn extract_features(scan: &OrganizedScan) -> Vec<Feature> {
    let smooth = compute_smoothness(scan);
    let (rows, cols) = (scan.rows(), scan.cols());
    let h = SMOOTHNESS_HALF_WINDOW;
    let mut features = Vec::new();
    for row in 0..rows {
        for sector in 0..SECTORS_PER_ROW {
            let lo = sector * cols / SECTORS_PER_ROW;
            let hi = (sector + 1) * cols / SECTORS_PER_ROW;
            let mut eligible: Vec<(usize, f64)> = (lo..hi)
                .filter_map(|col| smooth[scan.index(row, col)].map(|c| (col, c)))
                .collect();
            if eligible.is_empty() {
                continue;
            }
            eligible.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let n_edges = eligible.len().min(EDGES_PER_SECTOR);
            let mut rest = eligible.split_off(n_edges);
            for (col, c) in eligible {
                features.push(make_feature(scan, row, col, c, FeatureKind::Edge, h));
            }
            rest.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            rest.truncate(PLANES_PER_SECTOR);
            for (col, c) in rest {
                features.push(make_feature(scan, row, col, c, FeatureKind::Plane, h));
            }
        }
    }
    features
}

fn make_feature(
    scan: &OrganizedScan,
    row: usize,
    col: usize,
    smoothness: f64,
    kind: FeatureKind,
    h: usize,
) -> Feature {
    Feature {
        kind,
        point_index: scan.index(row, col),
        smoothness,
        contributing_indices: (col - h..=col + h).map(|j| scan.index(row, j)).collect(),
        classification: FeatureClass::Static,
    }
}

/// Tags each feature Static when every contributing point is labeled static
/// (0 or the ground-debug value 2), Dynamic as soon as one is labeled 1.
pub fn classify_features(features: &[Feature], labels: &[u32]) -> Result<Vec<Feature>, MapError> {
    features
        .iter()
        .map(|f| {
            let mut out = f.clone();
            for &idx in &f.contributing_indices {
                if idx >= labels.len() {
                    return Err(MapError::MisalignedSequences(format!(
                        "feature at point {} references index {idx} outside {} labels",
                        f.point_index,
                        labels.len()
                    )));
                }
            }
            out.classification = if f.contributing_indices.iter().any(|&i| labels[i] == 1) {
                FeatureClass::Dynamic
            } else {
                FeatureClass::Static
            };
            Ok(out)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Aggregate maps

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub position: Point3<f64>,
    pub intensity: f32,
    pub label: u32,
    pub scan_index: usize,
    pub point_index: usize,
}

/// World-frame map with at most one point per downsample voxel, split into a
/// static layer and an optional dynamic layer for visualization.
#[derive(Debug, Clone)]
pub struct AggregateMap {
    pub downsample: f64,
    pub static_points: Vec<MapPoint>,
    pub dynamic_points: Vec<MapPoint>,
}

fn voxel_key(p: &Point3<f64>, size: f64) -> (i64, i64, i64) {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

fn centroid_dist2(p: &Point3<f64>, key: (i64, i64, i64), size: f64) -> f64 {
    let c = Point3::new(
        (key.0 as f64 + 0.5) * size,
        (key.1 as f64 + 0.5) * size,
        (key.2 as f64 + 0.5) * size,
    );
    (p - c).norm_squared()
}

/// Keeps the point nearest the voxel centroid; earlier insertions win ties,
/// so scan order pins the result.
fn downsample_points(points: impl Iterator<Item = MapPoint>, size: f64) -> Vec<MapPoint> {
    let mut cells: BTreeMap<(i64, i64, i64), (f64, MapPoint)> = BTreeMap::new();
    for mp in points {
        let key = voxel_key(&mp.position, size);
        let d2 = centroid_dist2(&mp.position, key, size);
        match cells.get_mut(&key) {
            Some(best) if d2 >= best.0 => {}
            Some(best) => *best = (d2, mp),
            None => {
                cells.insert(key, (d2, mp));
            }
        }
    }
    cells.into_values().map(|(_, mp)| mp).collect()
}

/// Builds the cleaned world-frame map: undistorted static-labeled points
/// within `max_range` of the sensor, one representative per `downsample`
/// voxel. Dynamic-labeled points go through the same filter and downsample
/// into the separate dynamic layer.
pub fn build_clean_map(
    scans: &[OrganizedScan],
    labels: &[Vec<u32>],
    traj: &Trajectory,
    max_range: f64,
    downsample: f64,
) -> Result<AggregateMap, MapError> {
    if scans.len() != labels.len() {
        return Err(MapError::MisalignedSequences(format!(
            "{} scans vs {} label rasters",
            scans.len(),
            labels.len()
        )));
    }
    for (i, (s, l)) in scans.iter().zip(labels).enumerate() {
        if s.len() != l.len() {
            return Err(MapError::MisalignedSequences(format!(
                "scan {i}: {} points vs {} labels",
                s.len(),
                l.len()
            )));
        }
    }
    let per_scan: Vec<Result<(Vec<MapPoint>, Vec<MapPoint>), MapError>> = scans
        .par_iter()
        .zip(labels)
        .enumerate()
        .map(|(scan_index, (scan, l))| {
            let world = undistort(scan, traj)?;
            let mut stat = Vec::new();
            let mut dyna = Vec::new();
            for (idx, p) in world.iter_valid() {
                if p.range as f64 > max_range {
                    continue;
                }
                let mp = MapPoint {
                    position: p.position(),
                    intensity: p.intensity,
                    label: l[idx],
                    scan_index,
                    point_index: idx,
                };
                if l[idx] == 1 {
                    dyna.push(mp);
                } else {
                    stat.push(mp);
                }
            }
            Ok((stat, dyna))
        })
        .collect();
    let mut stat = Vec::new();
    let mut dyna = Vec::new();
    for r in per_scan {
        let (s, d) = r?;
        stat.extend(s);
        dyna.extend(d);
    }
    Ok(AggregateMap {
        downsample,
        static_points: downsample_points(stat.into_iter(), downsample),
        dynamic_points: downsample_points(dyna.into_iter(), downsample),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::{Pose, PointRecord};
    use nalgebra::{UnitQuaternion, Vector3};
    use proptest::prelude::*;

    fn row_scan(ranges: &[f32]) -> OrganizedScan {
        let mut scan = OrganizedScan::new(1, ranges.len(), 0.0);
        for (i, &r) in ranges.iter().enumerate() {
            if r <= 0.0 {
                continue;
            }
            *scan.point_mut(0, i) = PointRecord {
                x: r,
                y: i as f32 * 0.01,
                z: 0.0,
                range: r,
                intensity: 0.0,
                timestamp: 0.0,
                valid: true,
            };
        }
        scan
    }

    #[test]
    fn corner_smoothness_matches_hand_arithmetic() {
        // Flat at 10 through col 5, then a ramp of +2 per column. At the
        // corner (col 5) the left half cancels and the right half sums to
        // 80 - 50 = 30, so c = 30 / (10 * 10) = 0.3. At col 10 the window
        // is fully linear and cancels to zero.
        let ranges: Vec<f32> = (0..16)
            .map(|i| if i <= 5 { 10.0 } else { 10.0 + 2.0 * (i - 5) as f32 })
            .collect();
        let scan = row_scan(&ranges);
        let c = compute_smoothness(&scan);
        assert!((c[5].unwrap() - 0.3).abs() < 1e-9);
        assert!(c[10].unwrap().abs() < 1e-9);
        assert!(c[4].is_none(), "col 4 has no full window");
        assert!(c[11].is_none(), "col 11 has no full window");
    }

    #[test]
    fn flat_wall_scores_zero_and_fills_plane_slots() {
        let scan = row_scan(&[7.5; 60]);
        let c = compute_smoothness(&scan);
        for col in 5..55 {
            assert_eq!(c[col], Some(0.0));
        }
        let features = extract_features(&scan);
        assert!(features.iter().all(|f| f.smoothness == 0.0));
        let planes = features
            .iter()
            .filter(|f| f.kind == FeatureKind::Plane)
            .count();
        assert!(planes >= features.len() / 2, "wall points fill the plane slots");
    }

    #[test]
    fn two_wall_corner_is_the_smoothness_peak_and_an_edge() {
        // Walls x = 5 and y = 3 seen from the origin; the range profile is
        // r(az) = min(5/cos az, 3/sin az) with the crease at atan(3/5).
        let cols = 64;
        let az = |col: usize| (5.0 + 50.0 * col as f64 / (cols - 1) as f64).to_radians();
        let ranges: Vec<f32> = (0..cols)
            .map(|col| {
                let a = az(col);
                (5.0 / a.cos()).min(3.0 / a.sin()) as f32
            })
            .collect();
        let scan = row_scan(&ranges);
        let c = compute_smoothness(&scan);
        let peak = (5..cols - 5)
            .max_by(|&a, &b| c[a].unwrap().partial_cmp(&c[b].unwrap()).unwrap())
            .unwrap();
        let crease = (3.0f64 / 5.0).atan();
        assert!(
            (az(peak) - crease).abs() <= (az(1) - az(0)) * 1.5,
            "peak col {peak} is not at the crease"
        );
        let features = extract_features(&scan);
        let at_peak = features
            .iter()
            .find(|f| f.point_index == peak)
            .expect("crease pixel must be selected");
        assert_eq!(at_peak.kind, FeatureKind::Edge);
    }

    #[test]
    fn short_rows_produce_no_features() {
        let scan = row_scan(&[4.0; 10]);
        assert!(compute_smoothness(&scan).iter().all(|c| c.is_none()));
        assert!(extract_features(&scan).is_empty());
    }

    #[test]
    fn windows_touching_invalid_pixels_are_excluded() {
        let mut ranges = vec![6.0f32; 30];
        ranges[14] = 0.0; // invalid pixel
        let scan = row_scan(&ranges);
        let c = compute_smoothness(&scan);
        for col in 9..=19 {
            assert!(c[col].is_none(), "col {col} window crosses the hole");
        }
        assert!(c[8].is_some());
        assert!(c[20].is_some());
        let features = extract_features(&scan);
        assert!(features
            .iter()
            .all(|f| !(9..=19).contains(&f.point_index)));
    }

    #[test]
    fn sectors_pick_two_edges_and_four_planes() {
        // 60 columns, wavy but deterministic ranges.
        let ranges: Vec<f32> = (0..60)
            .map(|i| 8.0 + ((i * 37) % 11) as f32 * 0.05)
            .collect();
        let scan = row_scan(&ranges);
        let features = extract_features(&scan);
        for sector in 0..SECTORS_PER_ROW {
            let lo = sector * 60 / SECTORS_PER_ROW;
            let hi = (sector + 1) * 60 / SECTORS_PER_ROW;
            let in_sector: Vec<&Feature> = features
                .iter()
                .filter(|f| (lo..hi).contains(&f.point_index))
                .collect();
            let edges: Vec<&&Feature> = in_sector
                .iter()
                .filter(|f| f.kind == FeatureKind::Edge)
                .collect();
            let planes: Vec<&&Feature> = in_sector
                .iter()
                .filter(|f| f.kind == FeatureKind::Plane)
                .collect();
            assert!(edges.len() <= EDGES_PER_SECTOR);
            assert!(planes.len() <= PLANES_PER_SECTOR);
            if !edges.is_empty() && !planes.is_empty() {
                let min_edge = edges.iter().map(|f| f.smoothness).fold(f64::MAX, f64::min);
                let max_plane = planes.iter().map(|f| f.smoothness).fold(0.0, f64::max);
                assert!(max_plane <= min_edge);
            }
        }
    }

    #[test]
    fn one_dynamic_contributor_flips_the_feature() {
        let scan = row_scan(&[5.0; 16]);
        let features = extract_features(&scan);
        assert!(!features.is_empty());
        let f = &features[0];
        let mut labels = vec![0u32; 16];
        let tagged = classify_features(&features, &labels).unwrap();
        assert!(tagged.iter().all(|f| f.classification == FeatureClass::Static));

        labels[f.contributing_indices[3]] = 1;
        let tagged = classify_features(&features, &labels).unwrap();
        let again = tagged.iter().find(|t| t.point_index == f.point_index).unwrap();
        assert_eq!(again.classification, FeatureClass::Dynamic);
    }

    #[test]
    fn ground_debug_labels_keep_features_static() {
        let scan = row_scan(&[5.0; 16]);
        let features = extract_features(&scan);
        let labels = vec![2u32; 16];
        let tagged = classify_features(&features, &labels).unwrap();
        assert!(tagged.iter().all(|f| f.classification == FeatureClass::Static));
    }

    #[test]
    fn classification_checks_label_alignment() {
        let scan = row_scan(&[5.0; 16]);
        let features = extract_features(&scan);
        assert!(matches!(
            classify_features(&features, &vec![0u32; 4]),
            Err(MapError::MisalignedSequences(_))
        ));
        assert!(classify_features(&[], &[]).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn flipping_labels_to_dynamic_never_unflags_a_feature(
            flip_at in 0usize..16,
            base in proptest::collection::vec(0u32..3, 16),
        ) {
            let scan = row_scan(&[5.0; 16]);
            let features = extract_features(&scan);
            let before = classify_features(&features, &base).unwrap();
            let mut flipped = base.clone();
            flipped[flip_at] = 1;
            let after = classify_features(&features, &flipped).unwrap();
            for (b, a) in before.iter().zip(&after) {
                if b.classification == FeatureClass::Dynamic {
                    prop_assert_eq!(a.classification, FeatureClass::Dynamic);
                }
            }
        }
    }

    // -- map building --

    fn static_traj() -> Trajectory {
        Trajectory::new(vec![
            Pose {
                timestamp: -1.0,
                translation: Vector3::zeros(),
                rotation: UnitQuaternion::identity(),
            },
            Pose {
                timestamp: 10.0,
                translation: Vector3::zeros(),
                rotation: UnitQuaternion::identity(),
            },
        ])
        .unwrap()
    }

    fn scan_of(points: &[(f32, f32, f32)]) -> OrganizedScan {
        let mut scan = OrganizedScan::new(1, points.len(), 0.0);
        for (i, &(x, y, z)) in points.iter().enumerate() {
            *scan.point_mut(0, i) = PointRecord {
                x,
                y,
                z,
                range: (x * x + y * y + z * z).sqrt(),
                intensity: 0.25,
                timestamp: 0.0,
                valid: true,
            };
        }
        scan
    }

    #[test]
    fn static_scan_maps_to_its_downsampled_self() {
        let scan = scan_of(&[(1.0, 0.0, 0.0), (2.0, 0.0, 0.0), (2.0, 2.0, 0.5)]);
        let labels = vec![vec![0u32; 3]];
        let map = build_clean_map(&[scan], &labels, &static_traj(), 30.0, 0.1).unwrap();
        assert_eq!(map.static_points.len(), 3);
        assert!(map.dynamic_points.is_empty());
    }

    #[test]
    fn points_beyond_the_range_limit_are_dropped() {
        let scan = scan_of(&[(31.0, 0.0, 0.0), (29.0, 0.0, 0.0)]);
        let labels = vec![vec![0u32; 2]];
        let map = build_clean_map(&[scan], &labels, &static_traj(), 30.0, 0.1).unwrap();
        assert_eq!(map.static_points.len(), 1);
        assert!((map.static_points[0].position.x - 29.0).abs() < 1e-6);
    }

    #[test]
    fn coincident_points_collapse_to_one() {
        let a = scan_of(&[(3.0, 1.0, 0.0)]);
        let b = scan_of(&[(3.0, 1.0, 0.0)]);
        let labels = vec![vec![0u32; 1], vec![0u32; 1]];
        let map = build_clean_map(&[a, b], &labels, &static_traj(), 30.0, 0.1).unwrap();
        assert_eq!(map.static_points.len(), 1);
        assert_eq!(map.static_points[0].scan_index, 0, "first scan wins ties");
    }

    #[test]
    fn the_survivor_is_nearest_the_voxel_centroid() {
        // Same 0.1 m voxel: one point at its centroid, one in a corner.
        let near = (1.05f32, 1.05, 1.05);
        let far = (1.012f32, 1.012, 1.012);
        for order in [[near, far], [far, near]] {
            let scan = scan_of(&order);
            let labels = vec![vec![0u32; 2]];
            let map = build_clean_map(&[scan], &labels, &static_traj(), 30.0, 0.1).unwrap();
            assert_eq!(map.static_points.len(), 1);
            assert!((map.static_points[0].position.x - 1.05).abs() < 1e-6);
        }
    }

    #[test]
    fn dynamic_labels_go_to_the_separate_layer() {
        let scan = scan_of(&[(1.0, 0.0, 0.0), (2.0, 0.0, 0.0), (3.0, 0.0, 0.0)]);
        let labels = vec![vec![0u32, 1, 2]];
        let map = build_clean_map(&[scan], &labels, &static_traj(), 30.0, 0.1).unwrap();
        assert_eq!(map.static_points.len(), 2, "labels 0 and 2 are static");
        assert_eq!(map.dynamic_points.len(), 1);
        assert!((map.dynamic_points[0].position.x - 2.0).abs() < 1e-6);
    }

    #[test]
    fn alignment_errors_are_loud() {
        let scan = scan_of(&[(1.0, 0.0, 0.0)]);
        assert!(matches!(
            build_clean_map(&[scan.clone()], &[], &static_traj(), 30.0, 0.1),
            Err(MapError::MisalignedSequences(_))
        ));
        assert!(matches!(
            build_clean_map(&[scan], &[vec![0, 0]], &static_traj(), 30.0, 0.1),
            Err(MapError::MisalignedSequences(_))
        ));
    }

    proptest! {
        #[test]
        fn no_two_map_points_share_a_voxel(
            coords in proptest::collection::vec((-50i32..50, -50i32..50, -10i32..10), 1..80)
        ) {
            let pts: Vec<(f32, f32, f32)> = coords
                .iter()
                .map(|&(x, y, z)| (x as f32 * 0.031, y as f32 * 0.031, z as f32 * 0.031))
                .collect();
            let scan = scan_of(&pts);
            let labels = vec![vec![0u32; pts.len()]];
            let map = build_clean_map(&[scan], &labels, &static_traj(), 30.0, 0.1).unwrap();
            let mut seen = std::collections::HashSet::new();
            for p in &map.static_points {
                prop_assert!(seen.insert(voxel_key(&p.position, 0.1)));
            }
        }

        #[test]
        fn map_building_is_deterministic(
            coords in proptest::collection::vec((-20i32..20, -20i32..20, -5i32..5), 1..40)
        ) {
            let pts: Vec<(f32, f32, f32)> = coords
                .iter()
                .map(|&(x, y, z)| (x as f32 * 0.07, y as f32 * 0.07, z as f32 * 0.07))
                .collect();
            let scan = scan_of(&pts);
            let labels = vec![vec![0u32; pts.len()]];
            let a = build_clean_map(&[scan.clone()], &labels, &static_traj(), 30.0, 0.1).unwrap();
            let b = build_clean_map(&[scan], &labels, &static_traj(), 30.0, 0.1).unwrap();
            prop_assert_eq!(a.static_points, b.static_points);
        }
    }
}
