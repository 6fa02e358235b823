//! Ground and ceiling removal on organized scans.
//!
//! Candidate pixels are selected by the elevation angle between vertically
//! adjacent returns, support planes are fitted with a seeded RANSAC, and the
//! final mask grows from the plane inliers across the range image, confined
//! to a band around the planes, so sloped or cluttered ground nearby is still
//! captured without swallowing objects that stand on it.

use crate::scan::OrganizedScan;
use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

/// Tunables for plane fitting and mask growth.
#[derive(Debug, Clone)]
pub struct GroundParams {
    /// Eligibility threshold on the per-point elevation angle, degrees.
    pub max_point_angle_deg: f64,
    /// RANSAC inlier distance to the plane, metres.
    pub inlier_dist: f64,
    pub ransac_iterations: usize,
    /// A ground fit with fewer inliers than this is rejected outright.
    pub min_ground_inliers: usize,
    /// Minimum eligible above-sensor points before a ceiling fit is tried.
    pub ceiling_min_points: usize,
    /// Maximum plane tilt from the vertical axis, degrees.
    pub max_plane_tilt_deg: f64,
    /// Pairwise angle limit for mask growth, degrees.
    pub growth_angle_deg: f64,
    pub seed: u64,
}

impl Default for GroundParams {
    fn default() -> Self {
        GroundParams {
            max_point_angle_deg: 30.0,
            inlier_dist: 0.25,
            ransac_iterations: 200,
            min_ground_inliers: 100,
            ceiling_min_points: 500,
            max_plane_tilt_deg: 30.0,
            growth_angle_deg: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneKind {
    Ground,
    Ceiling,
}

/// Fitted horizontal support plane, normal oriented toward +z, n . p = offset.
#[derive(Debug, Clone)]
pub struct SupportPlane {
    pub kind: PlaneKind,
    pub normal: Vector3<f64>,
    pub offset: f64,
    /// Inlier distance the plane was fitted with, metres. Mask growth is
    /// confined to twice this band around the plane.
    pub inlier_threshold: f64,
    /// Flat indices of the eligible points within `inlier_threshold` of the
    /// plane.
    pub inliers: Vec<usize>,
}

impl SupportPlane {
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        (self.normal.dot(&p.coords) - self.offset).abs()
    }
}

#[derive(Debug, Error)]
pub enum GroundError {
    #[error("no ground plane: {found} inliers, {required} required")]
    NoPlane { found: usize, required: usize },
}

/// Elevation angle between the two points in degrees: the inclination of the
/// connecting segment against the horizontal plane.
pub fn pair_elevation_deg(p: &Point3<f64>, q: &Point3<f64>) -> f64 {
    let d = q - p;
    d.z.abs().atan2(d.xy().norm()).to_degrees()
}

/// Per-point elevation angles in degrees.
///
/// Each valid point is paired with its vertical neighbor in the same column
/// (next row down, or up at the bottom edge). Points without a valid vertical
/// neighbor, and invalid pixels, report 90 degrees so they never look flat.
pub fn compute_elevation_angles(scan: &OrganizedScan) -> Vec<f64> {
    let mut out = vec![90.0; scan.len()];
    for row in 0..scan.rows() {
        for col in 0..scan.cols() {
            let p = scan.point(row, col);
            if !p.valid {
                continue;
            }
            let below = (row + 1 < scan.rows()).then(|| scan.point(row + 1, col));
            let above = (row > 0).then(|| scan.point(row - 1, col));
            let neighbor = match (below, above) {
                (Some(q), _) if q.valid => Some(q),
                (_, Some(q)) if q.valid => Some(q),
                _ => None,
            };
            if let Some(q) = neighbor {
                out[scan.index(row, col)] = pair_elevation_deg(&p.position(), &q.position());
            }
        }
    }
    out
}

/// Fits the ground plane (and, when enough points lie above the sensor, a
/// ceiling plane) to the angle-eligible points with a seeded RANSAC.
///
/// Eligible points below the sensor origin feed the ground fit; a ceiling fit
/// is attempted when at least `ceiling_min_points` eligible points lie above.
/// Plane normals must stay within `max_plane_tilt_deg` of vertical. Fails
/// only when the ground fit has fewer than `min_ground_inliers` inliers.
pub fn fit_support_planes(
    scan: &OrganizedScan,
    angles: &[f64],
    sensor_origin: &Point3<f64>,
    params: &GroundParams,
) -> Result<Vec<SupportPlane>, GroundError> {
    assert_eq!(angles.len(), scan.len(), "angle buffer length mismatch");
    let eligible = |i: usize| angles[i] < params.max_point_angle_deg;
    let mut ground_pool = Vec::new();
    let mut ceiling_pool = Vec::new();
    for (i, p) in scan.iter_valid() {
        if !eligible(i) {
            continue;
        }
        if (p.z as f64) < sensor_origin.z {
            ground_pool.push(i);
        } else if (p.z as f64) > sensor_origin.z {
            ceiling_pool.push(i);
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let mut planes = Vec::new();
    match ransac_plane(scan, &ground_pool, params, &mut rng) {
        Some((normal, offset, inliers)) if inliers.len() >= params.min_ground_inliers => {
            planes.push(SupportPlane {
                kind: PlaneKind::Ground,
                normal,
                offset,
                inlier_threshold: params.inlier_dist,
                inliers,
            });
        }
        other => {
            return Err(GroundError::NoPlane {
                found: other.map_or(0, |(_, _, inl)| inl.len()),
                required: params.min_ground_inliers,
            })
        }
    }

    if ceiling_pool.len() >= params.ceiling_min_points {
        if let Some((normal, offset, inliers)) = ransac_plane(scan, &ceiling_pool, params, &mut rng) {
            if inliers.len() >= params.min_ground_inliers {
                planes.push(SupportPlane {
                    kind: PlaneKind::Ceiling,
                    normal,
                    offset,
                    inlier_threshold: params.inlier_dist,
                    inliers,
                });
            }
        }
    }
    Ok(planes)
}

fn ransac_plane(
    scan: &OrganizedScan,
    pool: &[usize],
    params: &GroundParams,
    rng: &mut ChaCha20Rng,
) -> Option<(Vector3<f64>, f64, Vec<usize>)> {
    if pool.len() < 3 {
        return None;
    }
    let min_vertical = params.max_plane_tilt_deg.to_radians().cos();
    let pos = |i: usize| scan.points()[i].position();

    let mut best: Option<(Vector3<f64>, f64, usize)> = None;
    for _ in 0..params.ransac_iterations {
        let picks = rand::seq::index::sample(rng, pool.len(), 3);
        let a = pos(pool[picks.index(0)]);
        let b = pos(pool[picks.index(1)]);
        let c = pos(pool[picks.index(2)]);
        let mut n = (b - a).cross(&(c - a));
        let norm = n.norm();
        if norm < 1e-12 {
            continue;
        }
        n /= norm;
        if n.z < 0.0 {
            n = -n;
        }
        if n.z < min_vertical {
            continue;
        }
        let offset = n.dot(&a.coords);
        let count = pool
            .iter()
            .filter(|&&i| (n.dot(&pos(i).coords) - offset).abs() <= params.inlier_dist)
            .count();
        if best.as_ref().map_or(true, |(_, _, c)| count > *c) {
            best = Some((n, offset, count));
        }
    }
    let (mut normal, mut offset, _) = best?;

    let collect = |n: &Vector3<f64>, d: f64| -> Vec<usize> {
        pool.iter()
            .copied()
            .filter(|&i| (n.dot(&pos(i).coords) - d).abs() <= params.inlier_dist)
            .collect()
    };
    let mut inliers = collect(&normal, offset);

    // Least-squares refit over the consensus set; keep the sample plane if
    // the refit tilts out of tolerance.
    if let Some((n, d)) = fit_plane_lsq(scan, &inliers) {
        if n.z >= min_vertical {
            normal = n;
            offset = d;
            inliers = collect(&normal, offset);
        }
    }
    Some((normal, offset, inliers))
}

/// Least-squares plane through the indexed points: centroid plus the smallest
/// principal direction. Normal is z-positive.
fn fit_plane_lsq(scan: &OrganizedScan, indices: &[usize]) -> Option<(Vector3<f64>, f64)> {
    if indices.len() < 3 {
        return None;
    }
    let mut centroid = Vector3::zeros();
    for &i in indices {
        centroid += scan.points()[i].position().coords;
    }
    centroid /= indices.len() as f64;
    let mut cov = nalgebra::Matrix3::zeros();
    for &i in indices {
        let d = scan.points()[i].position().coords - centroid;
        cov += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut min_i = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let mut n = eig.eigenvectors.column(min_i).into_owned();
    let norm = n.norm();
    if norm < 1e-12 {
        return None;
    }
    n /= norm;
    if n.z < 0.0 {
        n = -n;
    }
    Some((n, n.dot(&centroid)))
}

/// Grows the ground mask from the plane inliers across the range image.
///
/// BFS over 4-adjacency (columns wrap): a valid neighbor joins when its own
/// elevation angle (the per-point column slope from `angles`) stays below
/// `growth_angle_deg` and it lies within twice the inlier threshold of one of
/// the planes. Judging the neighbor by its column slope keeps growth off
/// vertical structure: a face pixel reads ~90 degrees no matter which side
/// the front approaches from, while the bottom ring of an object, whose slope
/// runs into the floor, is still absorbed. The band bounds how far up sloped
/// terrain the mask can wander. The result always contains every plane
/// inlier.
pub fn grow_ground_mask(
    scan: &OrganizedScan,
    planes: &[SupportPlane],
    angles: &[f64],
    growth_angle_deg: f64,
) -> Vec<bool> {
    assert_eq!(angles.len(), scan.len(), "angle buffer length mismatch");
    let in_band = |q: &Point3<f64>| {
        planes
            .iter()
            .any(|pl| pl.distance(q) <= 2.0 * pl.inlier_threshold)
    };
    let mut mask = vec![false; scan.len()];
    let mut queue = std::collections::VecDeque::new();
    let mut seeds: Vec<usize> = planes.iter().flat_map(|p| p.inliers.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    for i in seeds {
        if scan.points()[i].valid && !mask[i] {
            mask[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (row, col) = (i / scan.cols(), i % scan.cols());
        for (nr, nc) in scan.neighbors4(row, col).into_iter().flatten() {
            let j = scan.index(nr, nc);
            if mask[j] || !scan.points()[j].valid || angles[j] >= growth_angle_deg {
                continue;
            }
            if in_band(&scan.points()[j].position()) {
                mask[j] = true;
                queue.push_back(j);
            }
        }
    }
    mask
}
