//! Two-stage clustering of candidate points into validated object clusters.
//!
//! Stage 1 groups the candidate points alone by euclidean proximity and keeps
//! the groups that are large enough to seed an object. Stage 2 grows each
//! seed across the full range image so the cluster covers the whole object,
//! including points whose voxels never produced candidates. Validation then
//! accepts clusters whose candidate support is strong enough.

use crate::scan::OrganizedScan;
use nalgebra::Point3;
use std::collections::VecDeque;

/// A grown cluster: flat point indices plus how many of them are candidates.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub points: Vec<usize>,
    pub candidate_count: usize,
}

impl Cluster {
    pub fn candidate_ratio(&self) -> f64 {
        if self.points.is_empty() {
            0.0
        } else {
            self.candidate_count as f64 / self.points.len() as f64
        }
    }
}

/// Validation outcome for one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterVerdict {
    Accepted,
    /// Too few points; takes precedence over the ratio check.
    RejectedSize,
    /// Candidate ratio below threshold.
    RejectedRatio,
}

/// Stage 1: euclidean connected components over the candidate points.
///
/// Points within `radius` of each other (via a spatial hash with 27-cell
/// probes) share a component. Components whose diameter is not strictly
/// greater than `min_diameter` are discarded; the diameter is exact for up to
/// 5000 points and the bounding-box diagonal (an upper bound, so nothing is
/// wrongly discarded) beyond that. Components and their points are sorted.
pub fn cluster_candidates(
    scan: &OrganizedScan,
    candidates: &[usize],
    radius: f64,
    min_diameter: f64,
) -> Vec<Vec<usize>> {
    let pos: Vec<Point3<f64>> = candidates
        .iter()
        .map(|&i| scan.points()[i].position())
        .collect();

    let cell_of = |p: &Point3<f64>| {
        (
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        )
    };
    let mut cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (k, p) in pos.iter().enumerate() {
        cells.entry(cell_of(p)).or_default().push(k);
    }

    let mut uf = UnionFind::new(pos.len());
    let r2 = radius * radius;
    for (k, p) in pos.iter().enumerate() {
        let (cx, cy, cz) = cell_of(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &j in bucket {
                        if j > k && (pos[j] - p).norm_squared() <= r2 {
                            uf.union(k, j);
                        }
                    }
                }
            }
        }
    }

    let mut groups: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for k in 0..pos.len() {
        groups.entry(uf.find(k)).or_default().push(k);
    }
    let mut components: Vec<Vec<usize>> = groups
        .into_values()
        .filter(|members| component_diameter(&pos, members) > min_diameter)
        .map(|members| {
            let mut indices: Vec<usize> = members.iter().map(|&k| candidates[k]).collect();
            indices.sort_unstable();
            indices
        })
        .collect();
    components.sort_by_key(|c| c[0]);
    components
}

/// Exact diameter up to 5000 members, bounding-box diagonal above.
fn component_diameter(pos: &[Point3<f64>], members: &[usize]) -> f64 {
    if members.len() <= 1 {
        return 0.0;
    }
    if members.len() <= 5000 {
        let mut max2: f64 = 0.0;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                max2 = max2.max((pos[i] - pos[j]).norm_squared());
            }
        }
        max2.sqrt()
    } else {
        let mut lo = pos[members[0]];
        let mut hi = pos[members[0]];
        for &i in &members[1..] {
            let p = pos[i];
            lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        (hi - lo).norm()
    }
}

/// Angle under which the segment between two returns is seen from the sensor
/// ray of the farther return, in degrees. Flat surfaces score near 90, depth
/// discontinuities near 0.
pub fn beta_angle_deg(p: &crate::scan::PointRecord, q: &crate::scan::PointRecord) -> f64 {
    let (rp, rq) = (p.range as f64, q.range as f64);
    let (r_far, r_near) = if rp >= rq { (rp, rq) } else { (rq, rp) };
    if r_near <= 0.0 {
        return 0.0;
    }
    let u = p.position().coords.normalize();
    let v = q.position().coords.normalize();
    let dpsi = u.dot(&v).clamp(-1.0, 1.0).acos();
    (r_near * dpsi.sin())
        .atan2(r_far - r_near * dpsi.cos())
        .to_degrees()
}

/// Stage 2: grows the seed components across the range image.
///
/// Multi-source BFS over 4-adjacency (columns wrap): a valid neighbor joins
/// when the angle criterion exceeds `beta_threshold_deg`. Ground-masked
/// points may be absorbed at a cluster boundary but never propagate growth,
/// and belong to at most one cluster. Seeds whose growth fronts meet merge
/// into a single cluster. `candidate_flags` marks the candidate points for
/// the ratio bookkeeping.
pub fn grow_clusters(
    scan: &OrganizedScan,
    seeds: &[Vec<usize>],
    ground_mask: &[bool],
    candidate_flags: &[bool],
    beta_threshold_deg: f64,
) -> Vec<Cluster> {
    assert_eq!(ground_mask.len(), scan.len());
    assert_eq!(candidate_flags.len(), scan.len());

    let mut owner: Vec<Option<usize>> = vec![None; scan.len()];
    let mut uf = UnionFind::new(seeds.len());
    let mut queue = VecDeque::new();
    for (sid, seed) in seeds.iter().enumerate() {
        for &i in seed {
            if owner[i].is_none() {
                owner[i] = Some(sid);
                queue.push_back(i);
            } else {
                // Overlapping seed sets describe one object.
                uf.union(owner[i].unwrap(), sid);
            }
        }
    }

    while let Some(i) = queue.pop_front() {
        let sid = owner[i].unwrap();
        let (row, col) = (i / scan.cols(), i % scan.cols());
        let p = &scan.points()[i];
        for (nr, nc) in scan.neighbors4(row, col).into_iter().flatten() {
            let j = scan.index(nr, nc);
            let q = &scan.points()[j];
            if !q.valid {
                continue;
            }
            if beta_angle_deg(p, q) <= beta_threshold_deg {
                continue;
            }
            if ground_mask[j] {
                // Absorb the boundary pixel, do not grow through it.
                if owner[j].is_none() {
                    owner[j] = Some(sid);
                }
            } else {
                match owner[j] {
                    None => {
                        owner[j] = Some(sid);
                        queue.push_back(j);
                    }
                    Some(other) => uf.union(other, sid),
                }
            }
        }
    }

    let mut by_root: std::collections::HashMap<usize, Cluster> = std::collections::HashMap::new();
    for (i, sid) in owner.iter().enumerate() {
        let Some(sid) = sid else { continue };
        let entry = by_root.entry(uf.find(*sid)).or_insert_with(|| Cluster {
            points: Vec::new(),
            candidate_count: 0,
        });
        entry.points.push(i);
        if candidate_flags[i] {
            entry.candidate_count += 1;
        }
    }
    let mut clusters: Vec<Cluster> = by_root.into_values().collect();
    for c in &mut clusters {
        c.points.sort_unstable();
    }
    clusters.sort_by_key(|c| c.points[0]);
    clusters
}

/// Accepts a cluster iff it has at least `min_points` points and its
/// candidate ratio is at least `ratio_threshold`. The size check takes
/// precedence in the reported verdict.
pub fn validate_clusters(
    clusters: &[Cluster],
    min_points: usize,
    ratio_threshold: f64,
) -> Vec<ClusterVerdict> {
    clusters
        .iter()
        .map(|c| {
            if c.points.len() < min_points {
                ClusterVerdict::RejectedSize
            } else if c.candidate_ratio() < ratio_threshold {
                ClusterVerdict::RejectedRatio
            } else {
                ClusterVerdict::Accepted
            }
        })
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so merged ids stay stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::{OrganizedScan, PointRecord};

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

    fn row_scan(points: Vec<PointRecord>) -> OrganizedScan {
        let cols = points.len();
        OrganizedScan::from_points(1, cols, 0.0, points)
    }

    #[test]
    fn stage1_groups_by_radius_and_drops_small_components() {
        let scan = row_scan(vec![
            record(0.0, 2.0, 0.0),
            record(0.5, 2.0, 0.0),
            record(1.3, 2.0, 0.0),
        ]);
        let comps = cluster_candidates(&scan, &[0, 1, 2], 0.6, 0.2);
        // 0 and 1 link (0.5 <= 0.6); 2 is 0.8 away and stays alone, then its
        // zero diameter drops it.
        assert_eq!(comps, vec![vec![0, 1]]);
    }

    #[test]
    fn stage1_diameter_boundary_is_strict() {
        // 0.25 is exact in f32, so the first pair sits exactly on the
        // threshold and must be discarded; only strictly wider survives.
        let close = row_scan(vec![record(0.0, 2.0, 0.0), record(0.25, 2.0, 0.0)]);
        assert!(cluster_candidates(&close, &[0, 1], 0.6, 0.25).is_empty());
        let wider = row_scan(vec![record(0.0, 2.0, 0.0), record(0.375, 2.0, 0.0)]);
        assert_eq!(cluster_candidates(&wider, &[0, 1], 0.6, 0.25).len(), 1);
    }

    #[test]
    fn stage1_chains_through_intermediate_points() {
        let scan = row_scan(vec![
            record(0.0, 2.0, 0.0),
            record(0.5, 2.0, 0.0),
            record(1.0, 2.0, 0.0),
        ]);
        let comps = cluster_candidates(&scan, &[0, 1, 2], 0.6, 0.2);
        assert_eq!(comps, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn stage1_large_components_use_the_bbox_bound() {
        // 5001 collinear points over half a metre: the bbox diagonal equals
        // the true diameter here, so the component survives.
        let n = 5001;
        let points: Vec<PointRecord> = (0..n)
            .map(|i| record(i as f64 * (0.5 / (n - 1) as f64), 3.0, 0.0))
            .collect();
        let scan = row_scan(points);
        let all: Vec<usize> = (0..n).collect();
        let comps = cluster_candidates(&scan, &all, 0.6, 0.2);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].len(), n);
    }

    #[test]
    fn beta_angle_matches_the_worked_example() {
        // Adjacent pixels 0.176 degrees apart at ranges 3 and 5: the segment
        // is seen nearly end-on, far below a 10 degree join threshold.
        let dpsi = 0.176f64.to_radians();
        let p = record(3.0, 0.0, 0.0);
        let q = record(5.0 * dpsi.cos(), 5.0 * dpsi.sin(), 0.0);
        let beta = beta_angle_deg(&p, &q);
        assert!((beta - 0.264).abs() < 2e-3, "beta = {beta}");
        assert!(beta <= 10.0);
    }

    #[test]
    fn beta_angle_is_steep_on_flat_surfaces() {
        let dpsi = 0.35f64.to_radians();
        let p = record(5.0, 0.0, 0.0);
        let q = record(5.0 * dpsi.cos(), 5.0 * dpsi.sin(), 0.0);
        let beta = beta_angle_deg(&p, &q);
        assert!(beta > 80.0, "beta = {beta}");
    }

    /// One row of pixels spread 0.35 degrees apart: `ranges[i]` sets the
    /// range of pixel i; None leaves the pixel invalid.
    fn arc_scan(ranges: &[Option<f64>]) -> OrganizedScan {
        let step = 0.35f64.to_radians();
        let points: Vec<PointRecord> = ranges
            .iter()
            .enumerate()
            .map(|(i, r)| match r {
                Some(r) => {
                    let az = i as f64 * step;
                    record(r * az.cos(), r * az.sin(), 0.0)
                }
                None => PointRecord::INVALID,
            })
            .collect();
        row_scan(points)
    }

    #[test]
    fn growth_covers_the_object_but_not_the_background() {
        // Pixels 0..=4 on a near object (range 3), 5..=9 on a far wall
        // (range 5): the depth gap keeps the wall out.
        let ranges: Vec<Option<f64>> = (0..10)
            .map(|i| Some(if i < 5 { 3.0 } else { 5.0 }))
            .collect();
        let scan = arc_scan(&ranges);
        let ground = vec![false; scan.len()];
        let mut cand = vec![false; scan.len()];
        cand[1] = true;
        cand[2] = true;
        let clusters = grow_clusters(&scan, &[vec![1, 2]], &ground, &cand, 10.0);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].points, vec![0, 1, 2, 3, 4]);
        assert_eq!(clusters[0].candidate_count, 2);
    }

    #[test]
    fn growth_stops_at_invalid_pixels() {
        // Pixel 3 is still reachable around the column seam (3 is the left
        // neighbor of 0), but never through the invalid pixel 2.
        let ranges = vec![Some(3.0), Some(3.0), None, Some(3.0)];
        let scan = arc_scan(&ranges);
        let ground = vec![false; scan.len()];
        let cand = vec![false; scan.len()];
        let clusters = grow_clusters(&scan, &[vec![0]], &ground, &cand, 10.0);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].points, vec![0, 1, 3]);
    }

    #[test]
    fn merged_fronts_become_one_cluster() {
        let ranges: Vec<Option<f64>> = (0..8).map(|_| Some(3.0)).collect();
        let scan = arc_scan(&ranges);
        let ground = vec![false; scan.len()];
        let cand = vec![false; scan.len()];
        let clusters = grow_clusters(&scan, &[vec![0], vec![6]], &ground, &cand, 10.0);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].points.len(), 8);
    }

    #[test]
    fn ground_is_absorbed_but_does_not_propagate() {
        // Flat arc, ground-masked at 3 and 4, invalid at 5. Pixel 3 is
        // absorbed at the cluster boundary; pixel 4 is reachable only by
        // growing through 3 (ground) or 5 (invalid) and must stay out.
        let ranges = vec![
            Some(3.0),
            Some(3.0),
            Some(3.0),
            Some(3.0),
            Some(3.0),
            None,
            Some(3.0),
        ];
        let scan = arc_scan(&ranges);
        let mut ground = vec![false; scan.len()];
        ground[3] = true;
        ground[4] = true;
        let cand = vec![false; scan.len()];
        let clusters = grow_clusters(&scan, &[vec![0, 1]], &ground, &cand, 10.0);
        assert_eq!(clusters.len(), 1);
        // Pixel 6 joins around the column seam.
        assert_eq!(clusters[0].points, vec![0, 1, 2, 3, 6]);
    }

    #[test]
    fn ground_pixels_belong_to_at_most_one_cluster() {
        // Two objects separated by depth flank two shared ground pixels;
        // each ground pixel is absorbed by exactly one side.
        let ranges = vec![
            Some(3.0),
            Some(3.0),
            Some(3.0),
            Some(6.0),
            Some(6.0),
            Some(6.0),
        ];
        let scan = arc_scan(&ranges);
        let mut ground = vec![false; scan.len()];
        ground[2] = true;
        ground[3] = true;
        let cand = vec![false; scan.len()];
        let clusters = grow_clusters(&scan, &[vec![0], vec![4]], &ground, &cand, 10.0);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].points, vec![0, 1, 2]);
        assert_eq!(clusters[1].points, vec![3, 4, 5]);
    }

    fn brute_components(scan: &OrganizedScan, candidates: &[usize], radius: f64) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::new(candidates.len());
        for a in 0..candidates.len() {
            for b in a + 1..candidates.len() {
                let pa = scan.points()[candidates[a]].position();
                let pb = scan.points()[candidates[b]].position();
                if (pa - pb).norm_squared() <= radius * radius {
                    uf.union(a, b);
                }
            }
        }
        let mut groups: std::collections::HashMap<usize, Vec<usize>> = Default::default();
        for k in 0..candidates.len() {
            groups.entry(uf.find(k)).or_default().push(candidates[k]);
        }
        let mut out: Vec<Vec<usize>> = groups
            .into_values()
            .map(|mut v| {
                v.sort_unstable();
                v
            })
            .collect();
        out.sort_by_key(|c| c[0]);
        out
    }

    proptest::proptest! {
        #[test]
        fn stage1_matches_a_pairwise_reference(
            coords in proptest::collection::vec(
                (-2.0f64..2.0, -2.0f64..2.0, -1.0f64..1.0),
                1..40,
            ),
            radius in 0.3f64..1.0,
        ) {
            let points: Vec<PointRecord> =
                coords.iter().map(|&(x, y, z)| record(x, y, z)).collect();
            let scan = row_scan(points);
            let all: Vec<usize> = (0..scan.len()).collect();
            // A negative diameter floor keeps every component, singletons
            // included, so the partitions compare exactly.
            let got = cluster_candidates(&scan, &all, radius, -1.0);
            let want = brute_components(&scan, &all, radius);
            proptest::prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn validation_boundaries_are_inclusive() {
        let mk = |n: usize, cand: usize| Cluster {
            points: (0..n).collect(),
            candidate_count: cand,
        };
        let clusters = vec![mk(5, 3), mk(4, 4), mk(10, 5), mk(3, 0), mk(5, 2)];
        let verdicts = validate_clusters(&clusters, 5, 0.6);
        assert_eq!(
            verdicts,
            vec![
                ClusterVerdict::Accepted,      // exactly 5 points, ratio exactly 0.6
                ClusterVerdict::RejectedSize,  // 4 points, perfect ratio
                ClusterVerdict::RejectedRatio, // 0.5 < 0.6
                ClusterVerdict::RejectedSize,  // size precedence over ratio
                ClusterVerdict::RejectedRatio, // 0.4
            ]
        );
    }
}
