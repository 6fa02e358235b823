//! Two-phase scan integration into the occupancy grid.
//!
//! Phase 1 derives three voxel sets from the scan without touching the grid:
//! O (voxels holding current points), B (voxels shielded from carving this
//! scan), and F (voxels traversed by rays and eligible for free space).
//! Phase 2 applies them with fixed precedence Occupied > Blocked > Free.
//! Because the sets are complete before any write, the result is independent
//! of point order and of how rays are scheduled across threads.

use super::{
    traversal::traverse_ray_entries, voxel_index_of, VoxelGrid, VoxelIndex, VoxelState,
};
use crate::scan::OrganizedScan;
use nalgebra::Point3;
use rayon::prelude::*;
use std::collections::{HashMap, HashSet};

/// Grid update mode for one pass over the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationMode {
    /// Accumulate free/blocked evidence only; observed voxels stay untouched.
    FreeSpaceOnly,
    /// Full update; free-to-occupied transitions become candidate voxels.
    Occupancy,
}

/// Per-scan integration output.
#[derive(Debug, Clone, Default)]
pub struct ScanIntegrationResult {
    /// Voxels that changed Free -> Occupied this scan (empty outside
    /// Occupancy mode). Always a subset of `occupied_voxels`.
    pub candidate_voxels: HashSet<VoxelIndex>,
    /// Voxels holding at least one current-scan point.
    pub occupied_voxels: HashSet<VoxelIndex>,
}

/// Flags range-image discontinuities that occlude the space behind them.
///
/// For each pair of 4-adjacent valid pixels (columns wrap, rows do not) with
/// sensor-frame ranges r2 > r1 and r2 - r1 > voxel_size, the farther point is
/// annotated with the nearer range; voxels beyond that range along its ray
/// must not be carved free. The annotation keeps the minimum such r1.
pub fn detect_blocked_rays(scan: &OrganizedScan, voxel_size: f64) -> Vec<Option<f64>> {
    let mut out = vec![None; scan.len()];
    for row in 0..scan.rows() {
        for col in 0..scan.cols() {
            let p = scan.point(row, col);
            if !p.valid {
                continue;
            }
            let r2 = p.range as f64;
            let mut cutoff: Option<f64> = None;
            for neighbor in scan.neighbors4(row, col).into_iter().flatten() {
                let q = scan.point(neighbor.0, neighbor.1);
                if !q.valid {
                    continue;
                }
                let r1 = q.range as f64;
                if r2 - r1 > voxel_size {
                    cutoff = Some(cutoff.map_or(r1, |c: f64| c.min(r1)));
                }
            }
            out[scan.index(row, col)] = cutoff;
        }
    }
    out
}

/// Integrates one motion-compensated scan into the grid.
///
/// `scan` must be in the world frame; `blocked_from` is the per-point
/// annotation from [`detect_blocked_rays`] (computed on the same scan, whose
/// range image the undistortion preserves). Rays are traced from
/// `sensor_origin` to the closest point of each occupied voxel; traversal
/// stops at the first voxel of O, skips voxels of B, and marks the rest free.
/// Voxels of B \ O keep their prior state; only Unobserved ones are stored as
/// Blocked. In Occupancy mode, voxels of O
/// whose state at scan start was Free are reported as candidates, then all of
/// O becomes Occupied; in FreeSpaceOnly mode O is left unmodified.
pub fn integrate_scan(
    grid: &mut VoxelGrid,
    scan: &OrganizedScan,
    blocked_from: &[Option<f64>],
    sensor_origin: &Point3<f64>,
    mode: IntegrationMode,
) -> ScanIntegrationResult {
    assert_eq!(blocked_from.len(), scan.len(), "annotation length mismatch");
    let h = grid.voxel_size();

    // Phase 1a: occupied set and one representative ray per occupied voxel.
    // The representative is the closest point; ties break on coordinates so
    // the choice is independent of point order.
    let mut occupied: HashSet<VoxelIndex> = HashSet::new();
    let mut reps: HashMap<VoxelIndex, (f64, [f32; 3])> = HashMap::new();
    for (_, p) in scan.iter_valid() {
        let pos = p.position();
        let v = voxel_index_of(&pos, h);
        occupied.insert(v);
        let dist = (pos - sensor_origin).norm();
        let key = (dist, [p.x, p.y, p.z]);
        match reps.entry(v) {
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(key);
            }
            std::collections::hash_map::Entry::Occupied(mut e) => {
                let cur = e.get();
                if (key.0, key.1[0], key.1[1], key.1[2]) < (cur.0, cur.1[0], cur.1[1], cur.1[2]) {
                    e.insert(key);
                }
            }
        }
    }

    // Phase 1b: blocked set. Discontinuity rays shield every traversed voxel
    // whose span extends beyond the annotated cutoff; neighbor shielding
    // covers the 26-ring around every observed voxel (pose/noise slack).
    let disc: Vec<(Point3<f64>, f64)> = scan
        .iter_valid()
        .filter_map(|(i, p)| blocked_from[i].map(|r1| (p.position(), r1)))
        .collect();
    let mut blocked: HashSet<VoxelIndex> = disc
        .par_iter()
        .fold(HashSet::new, |mut acc, (endpoint, r1)| {
            if let Ok(walk) = traverse_ray_entries(sensor_origin, endpoint, h) {
                let n = walk.entries.len();
                for (i, &(v, _)) in walk.entries.iter().enumerate() {
                    let exit = if i + 1 < n {
                        walk.entries[i + 1].1
                    } else {
                        walk.stop_distance
                    };
                    if exit > *r1 {
                        acc.insert(v);
                    }
                }
            }
            acc
        })
        .reduce(HashSet::new, |a, b| {
            if a.len() < b.len() {
                return reduce_into(b, a);
            }
            reduce_into(a, b)
        });
    for &v in &occupied {
        for n in v.neighbors26() {
            if !occupied.contains(&n) {
                blocked.insert(n);
            }
        }
    }
    blocked.retain(|v| !occupied.contains(v));

    // Phase 1c: free set. One ray per occupied voxel, cut short at the first
    // currently observed voxel (the space behind it is occluded).
    let rays: Vec<[f32; 3]> = reps.values().map(|(_, p)| *p).collect();
    let free: HashSet<VoxelIndex> = rays
        .par_iter()
        .fold(HashSet::new, |mut acc, p| {
            let endpoint = Point3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            if let Ok(walk) = traverse_ray_entries(sensor_origin, &endpoint, h) {
                for (v, _) in walk.entries {
                    if occupied.contains(&v) {
                        break;
                    }
                    if !blocked.contains(&v) {
                        acc.insert(v);
                    }
                }
            }
            acc
        })
        .reduce(HashSet::new, |a, b| {
            if a.len() < b.len() {
                return reduce_into(b, a);
            }
            reduce_into(a, b)
        });

    // Phase 2: candidate detection reads states as of scan start (B and F are
    // disjoint from O, so the order of writes below cannot mask a prior Free).
    let mut result = ScanIntegrationResult {
        candidate_voxels: HashSet::new(),
        occupied_voxels: occupied,
    };
    if mode == IntegrationMode::Occupancy {
        for &v in &result.occupied_voxels {
            if grid.state(v) == VoxelState::Free {
                result.candidate_voxels.insert(v);
            }
        }
    }
    for &v in &free {
        grid.set_free(v);
    }
    // Shielding is an in-scan exclusion, not evidence: a voxel of B keeps
    // whatever state earlier scans established and only Unobserved voxels
    // are stamped Blocked. Demoting Free here would hide every slow mover,
    // since its next position always lies inside the current neighbor ring.
    for &v in &blocked {
        if grid.state(v) == VoxelState::Unobserved {
            grid.set_blocked(v);
        }
    }
    if mode == IntegrationMode::Occupancy {
        for &v in &result.occupied_voxels {
            grid.set_occupied(v);
        }
    }
    result
}

fn reduce_into(mut big: HashSet<VoxelIndex>, small: HashSet<VoxelIndex>) -> HashSet<VoxelIndex> {
    big.extend(small);
    big
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::PointRecord;

    const H: f64 = 0.3;

    fn record(x: f64, y: f64, z: f64) -> PointRecord {
        let (x, y, z) = (x as f32, y as f32, z as f32);
        PointRecord {
            x,
            y,
            z,
            range: (x * x + y * y + z * z).sqrt(),
            intensity: 0.0,
            timestamp: 0.0,
            valid: true,
        }
    }

    fn scan_of(points: Vec<PointRecord>) -> OrganizedScan {
        let cols = points.len();
        OrganizedScan::from_points(1, cols, 0.0, points)
    }

    fn integrate(
        grid: &mut VoxelGrid,
        scan: &OrganizedScan,
        mode: IntegrationMode,
    ) -> ScanIntegrationResult {
        let blocked = detect_blocked_rays(scan, grid.voxel_size());
        integrate_scan(grid, scan, &blocked, &Point3::new(0.05, 0.05, 0.05), mode)
    }

    #[test]
    fn discontinuity_annotates_the_farther_point_with_the_nearer_range() {
        // Ranges 5.0 and 5.4 on adjacent pixels: the 0.4 jump exceeds the
        // voxel size, so the far point is annotated with 5.0.
        let scan = scan_of(vec![record(5.0, 0.0, 0.0), record(5.4, 0.0, 0.0)]);
        let blocked = detect_blocked_rays(&scan, H);
        assert_eq!(blocked[0], None);
        assert_eq!(blocked[1], Some(5.0));
    }

    #[test]
    fn small_range_steps_are_not_discontinuities() {
        let scan = scan_of(vec![record(5.0, 0.0, 0.0), record(5.2, 0.0, 0.0)]);
        let blocked = detect_blocked_rays(&scan, H);
        assert_eq!(blocked, vec![None, None]);
    }

    #[test]
    fn annotation_keeps_the_minimum_neighbor_range() {
        let scan = scan_of(vec![record(4.0, 0.0, 0.0), record(6.0, 0.0, 0.0), record(4.8, 0.0, 0.0)]);
        let blocked = detect_blocked_rays(&scan, H);
        // Middle pixel jumps against both neighbors; the min cutoff wins.
        assert_eq!(blocked[1], Some(4.0));
    }

    #[test]
    fn isolated_points_get_no_annotation() {
        let mut far = record(6.0, 0.0, 0.0);
        far.valid = true;
        let scan = scan_of(vec![PointRecord::INVALID, far, PointRecord::INVALID]);
        let blocked = detect_blocked_rays(&scan, H);
        assert_eq!(blocked[1], None);
    }

    #[test]
    fn column_adjacency_wraps_around_the_seam() {
        let scan = scan_of(vec![record(5.4, 0.0, 0.0), record(2.0, 0.0, 0.0), record(5.0, 0.0, 0.0)]);
        let blocked = detect_blocked_rays(&scan, H);
        // Last column is adjacent to the first: 5.0 jumps against 2.0 only,
        // 5.4 jumps against both 2.0 and (across the seam) 5.0.
        assert_eq!(blocked[0], Some(2.0));
        assert_eq!(blocked[2], Some(2.0));
    }

    #[test]
    fn free_space_pass_never_occupies_and_sets_ever_free() {
        let mut grid = VoxelGrid::new(H);
        let scan = scan_of(vec![record(1.55, 0.05, 0.05)]);
        let res = integrate(&mut grid, &scan, IntegrationMode::FreeSpaceOnly);
        assert!(res.candidate_voxels.is_empty());
        let target = VoxelIndex::new(5, 0, 0);
        assert_eq!(res.occupied_voxels.len(), 1);
        assert!(res.occupied_voxels.contains(&target));
        // The observed voxel is untouched; the path to it is free except the
        // blocked neighbor ring.
        assert_eq!(grid.state(target), VoxelState::Unobserved);
        assert_eq!(grid.state(VoxelIndex::new(0, 0, 0)), VoxelState::Free);
        assert!(grid.ever_free(VoxelIndex::new(1, 0, 0)));
        assert_eq!(grid.state(VoxelIndex::new(4, 0, 0)), VoxelState::Blocked);
    }

    #[test]
    fn occupancy_from_unobserved_is_not_a_candidate() {
        let mut grid = VoxelGrid::new(H);
        let scan = scan_of(vec![record(1.55, 0.05, 0.05)]);
        let res = integrate(&mut grid, &scan, IntegrationMode::Occupancy);
        assert!(res.candidate_voxels.is_empty());
        assert_eq!(grid.state(VoxelIndex::new(5, 0, 0)), VoxelState::Occupied);
    }

    #[test]
    fn occupancy_from_free_is_a_candidate() {
        let mut grid = VoxelGrid::new(H);
        let target = VoxelIndex::new(5, 0, 0);
        grid.set_free(target);
        let scan = scan_of(vec![record(1.55, 0.05, 0.05)]);
        let res = integrate(&mut grid, &scan, IntegrationMode::Occupancy);
        assert_eq!(res.candidate_voxels.len(), 1);
        assert!(res.candidate_voxels.contains(&target));
        assert_eq!(grid.state(target), VoxelState::Occupied);
        assert!(grid.ever_free(target));
    }

    #[test]
    fn occupancy_from_blocked_is_not_a_candidate() {
        let mut grid = VoxelGrid::new(H);
        let target = VoxelIndex::new(5, 0, 0);
        grid.set_blocked(target);
        let scan = scan_of(vec![record(1.55, 0.05, 0.05)]);
        let res = integrate(&mut grid, &scan, IntegrationMode::Occupancy);
        assert!(res.candidate_voxels.is_empty());
        assert_eq!(grid.state(target), VoxelState::Occupied);
        assert!(!grid.ever_free(target));
    }

    #[test]
    fn observed_voxels_win_over_blocking_and_freeing() {
        let mut grid = VoxelGrid::new(H);
        // Two points in adjacent voxels: each is inside the other's neighbor
        // ring, yet both must end up Occupied.
        let scan = scan_of(vec![record(1.55, 0.05, 0.05), record(1.85, 0.05, 0.05)]);
        integrate(&mut grid, &scan, IntegrationMode::Occupancy);
        assert_eq!(grid.state(VoxelIndex::new(5, 0, 0)), VoxelState::Occupied);
        assert_eq!(grid.state(VoxelIndex::new(6, 0, 0)), VoxelState::Occupied);
    }

    #[test]
    fn traversal_stops_at_observed_voxels() {
        let mut grid = VoxelGrid::new(H);
        // Near point occludes the segment behind it; the far ray may not
        // carve free space past the near voxel.
        let near = record(1.55, 0.05, 0.05);
        let far = record(3.05, 0.05, 0.05);
        let scan = OrganizedScan::from_points(2, 1, 0.0, vec![near, far]);
        let blocked = detect_blocked_rays(&scan, H);
        integrate_scan(
            &mut grid,
            &scan,
            &blocked,
            &Point3::new(0.05, 0.05, 0.05),
            IntegrationMode::Occupancy,
        );
        // Between near (voxel 5) and far (voxel 10): voxel 7 is past the
        // near return and its neighbor ring; it must not be Free.
        assert_ne!(grid.state(VoxelIndex::new(7, 0, 0)), VoxelState::Free);
        assert_eq!(grid.state(VoxelIndex::new(2, 0, 0)), VoxelState::Free);
    }

    #[test]
    fn discontinuity_blocks_the_gap_instead_of_freeing_it() {
        let mut grid = VoxelGrid::new(H);
        // Adjacent pixels at 2.0 and 4.0: the far ray's voxels past 2.0 are
        // shielded even though nothing occupies them.
        let scan = scan_of(vec![record(2.0, 0.05, 0.05), record(4.0, 0.05, 0.05)]);
        integrate(&mut grid, &scan, IntegrationMode::Occupancy);
        // Voxel around x = 3.1 lies on the far ray beyond the 2.0 cutoff.
        let mid = VoxelIndex::new(10, 0, 0);
        assert_eq!(grid.state(mid), VoxelState::Blocked);
        assert!(!grid.ever_free(mid));
    }

    #[test]
    fn shielded_voxels_keep_their_prior_state() {
        let mut grid = VoxelGrid::new(H);
        let v = VoxelIndex::new(10, 0, 0);
        grid.set_free(v);
        let scan = scan_of(vec![record(2.0, 0.05, 0.05), record(4.0, 0.05, 0.05)]);
        integrate(&mut grid, &scan, IntegrationMode::Occupancy);
        // v lies in the occluded gap: it is exempt from carving this scan,
        // but the Free state observed earlier stands.
        assert_eq!(grid.state(v), VoxelState::Free);
        assert!(grid.ever_free(v));
    }

    #[test]
    fn result_is_independent_of_point_order() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let mut points = Vec::new();
        for i in 0..40 {
            let a = i as f64 * 0.157;
            points.push(record(3.0 + (a.sin()), 2.0 * a.cos(), 0.4 * a.sin()));
        }
        let scan = scan_of(points.clone());
        let blocked = detect_blocked_rays(&scan, H);
        let origin = Point3::new(0.0, 0.0, 0.0);

        let mut grid_a = VoxelGrid::new(H);
        grid_a.set_free(VoxelIndex::new(9, 0, 0));
        let mut grid_b = grid_a.clone();

        let res_a = integrate_scan(&mut grid_a, &scan, &blocked, &origin, IntegrationMode::Occupancy);

        let mut order: Vec<usize> = (0..points.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<PointRecord> = order.iter().map(|&i| points[i]).collect();
        let shuffled_blocked: Vec<Option<f64>> = order.iter().map(|&i| blocked[i]).collect();
        let scan_b = scan_of(shuffled);
        let res_b =
            integrate_scan(&mut grid_b, &scan_b, &shuffled_blocked, &origin, IntegrationMode::Occupancy);

        assert_eq!(res_a.candidate_voxels, res_b.candidate_voxels);
        assert_eq!(res_a.occupied_voxels, res_b.occupied_voxels);
        assert_eq!(grid_a.sorted_touched(), grid_b.sorted_touched());
    }

    #[test]
    fn candidates_are_a_subset_of_occupied() {
        let mut grid = VoxelGrid::new(H);
        for x in 0..12 {
            grid.set_free(VoxelIndex::new(x, 0, 0));
        }
        let scan = scan_of(vec![record(1.55, 0.05, 0.05), record(3.05, 0.05, 0.05)]);
        let res = integrate(&mut grid, &scan, IntegrationMode::Occupancy);
        assert!(res.candidate_voxels.is_subset(&res.occupied_voxels));
        assert!(!res.candidate_voxels.is_empty());
    }
}
