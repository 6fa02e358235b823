//! Two-pass sequence labeling.
//!
//! Pass 1 walks the whole sequence carving free space into the voxel grid,
//! so the grid knows everything that was ever observably empty before any
//! label is decided. Pass 2 replays the sequence with occupancy updates:
//! voxels flipping from free to occupied become candidates, candidate points
//! are clustered in two stages, and validated clusters are written out as
//! per-point labels. Nothing is emitted until pass 1 has seen every point.

use crate::cluster::{cluster_candidates, grow_clusters, validate_clusters, ClusterVerdict};
use crate::ground::{
    compute_elevation_angles, fit_support_planes, grow_ground_mask, GroundError, GroundParams,
};
use crate::io::{self, IoError, SequenceLayout};
use crate::scan::{interpolate_pose, undistort, OrganizedScan, Trajectory, TrajectoryError};
use crate::voxel::{
    detect_blocked_rays, integrate_scan, IntegrationMode, VoxelGrid, VoxelIndex,
};
use nalgebra::Point3;
use std::collections::{HashSet, VecDeque};
use std::path::Path;
use std::time::{Duration, Instant};

pub const LABEL_STATIC: u32 = 0;
pub const LABEL_DYNAMIC: u32 = 1;
pub const LABEL_GROUND: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config {key}: cannot parse {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("config: {0}")]
    Invalid(String),
}

/// Every tunable of the labeling pipeline. Field names double as the keys
/// accepted in config files and `--set` overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceConfig {
    /// Edge length of the occupancy voxels, metres.
    pub voxel_size: f64,
    /// How many previous scans contribute their candidate voxels when the
    /// current scan selects candidate points.
    pub window: usize,
    /// Minimum fraction of candidate points for a cluster to be accepted.
    pub candidate_ratio: f64,
    /// Minimum cluster size in points.
    pub min_cluster_points: usize,
    /// Seed components no wider than this are discarded, metres.
    pub min_seed_diameter: f64,
    /// Seed linking radius as a multiple of voxel_size.
    pub seed_radius_factor: f64,
    /// Depth-gap angle above which neighboring pixels join a cluster.
    pub beta_deg: f64,
    /// Eligibility limit on per-point elevation angles for plane fitting.
    pub ground_point_angle_deg: f64,
    /// RANSAC inlier distance for support planes, metres.
    pub ground_inlier_dist: f64,
    /// Column-slope limit below which the ground mask grows, degrees.
    pub ground_growth_deg: f64,
    /// Maximum support-plane tilt from vertical, degrees.
    pub plane_tilt_deg: f64,
    pub ransac_iterations: usize,
    /// Minimum inliers for a support plane to count.
    pub min_ground_inliers: usize,
    /// Minimum eligible above-sensor points before a ceiling fit is tried.
    pub ceiling_min_points: usize,
    /// Feed accepted-cluster voxels into the next scan's candidate window.
    pub use_feedback: bool,
    /// Also emit label 2 on ground-masked points.
    pub emit_ground_labels: bool,
    /// Base seed for the per-scan plane fitting.
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            voxel_size: 0.3,
            window: 5,
            candidate_ratio: 0.6,
            min_cluster_points: 5,
            min_seed_diameter: 0.2,
            seed_radius_factor: 2.0,
            beta_deg: 10.0,
            ground_point_angle_deg: 30.0,
            ground_inlier_dist: 0.25,
            ground_growth_deg: 10.0,
            plane_tilt_deg: 30.0,
            ransac_iterations: 200,
            min_ground_inliers: 100,
            ceiling_min_points: 500,
            use_feedback: true,
            emit_ground_labels: false,
            seed: 0,
        }
    }
}

impl SequenceConfig {
    /// Applies one `key = value` override; keys are the field names.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
            match value {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    reason: "expected true/false/1/0".to_string(),
                }),
            }
        }
        match key {
            "voxel_size" => self.voxel_size = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "candidate_ratio" => self.candidate_ratio = parse(key, value)?,
            "min_cluster_points" => self.min_cluster_points = parse(key, value)?,
            "min_seed_diameter" => self.min_seed_diameter = parse(key, value)?,
            "seed_radius_factor" => self.seed_radius_factor = parse(key, value)?,
            "beta_deg" => self.beta_deg = parse(key, value)?,
            "ground_point_angle_deg" => self.ground_point_angle_deg = parse(key, value)?,
            "ground_inlier_dist" => self.ground_inlier_dist = parse(key, value)?,
            "ground_growth_deg" => self.ground_growth_deg = parse(key, value)?,
            "plane_tilt_deg" => self.plane_tilt_deg = parse(key, value)?,
            "ransac_iterations" => self.ransac_iterations = parse(key, value)?,
            "min_ground_inliers" => self.min_ground_inliers = parse(key, value)?,
            "ceiling_min_points" => self.ceiling_min_points = parse(key, value)?,
            "use_feedback" => self.use_feedback = parse_bool(key, value)?,
            "emit_ground_labels" => self.emit_ground_labels = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        for (k, v) in pairs {
            self.apply(k, v)?;
        }
        Ok(())
    }

    /// Every field as a `(key, value)` pair accepted back by `apply`, in
    /// declaration order. Output manifests echo these for reproducibility.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let pair = |k: &str, v: String| (k.to_string(), v);
        vec![
            pair("voxel_size", self.voxel_size.to_string()),
            pair("window", self.window.to_string()),
            pair("candidate_ratio", self.candidate_ratio.to_string()),
            pair("min_cluster_points", self.min_cluster_points.to_string()),
            pair("min_seed_diameter", self.min_seed_diameter.to_string()),
            pair("seed_radius_factor", self.seed_radius_factor.to_string()),
            pair("beta_deg", self.beta_deg.to_string()),
            pair("ground_point_angle_deg", self.ground_point_angle_deg.to_string()),
            pair("ground_inlier_dist", self.ground_inlier_dist.to_string()),
            pair("ground_growth_deg", self.ground_growth_deg.to_string()),
            pair("plane_tilt_deg", self.plane_tilt_deg.to_string()),
            pair("ransac_iterations", self.ransac_iterations.to_string()),
            pair("min_ground_inliers", self.min_ground_inliers.to_string()),
            pair("ceiling_min_points", self.ceiling_min_points.to_string()),
            pair("use_feedback", self.use_feedback.to_string()),
            pair("emit_ground_labels", self.emit_ground_labels.to_string()),
            pair("seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return err("voxel_size must be positive and finite".into());
        }
        if !(0.0..=1.0).contains(&self.candidate_ratio) {
            return err("candidate_ratio must lie in [0, 1]".into());
        }
        if self.min_cluster_points == 0 {
            return err("min_cluster_points must be at least 1".into());
        }
        if !(self.min_seed_diameter >= 0.0) {
            return err("min_seed_diameter must be non-negative".into());
        }
        if !(self.seed_radius_factor > 0.0) {
            return err("seed_radius_factor must be positive".into());
        }
        for (name, v) in [
            ("beta_deg", self.beta_deg),
            ("ground_point_angle_deg", self.ground_point_angle_deg),
            ("ground_growth_deg", self.ground_growth_deg),
            ("plane_tilt_deg", self.plane_tilt_deg),
        ] {
            if !(v > 0.0 && v < 90.0) {
                return err(format!("{name} must lie in (0, 90) degrees"));
            }
        }
        if !(self.ground_inlier_dist > 0.0) {
            return err("ground_inlier_dist must be positive".into());
        }
        if self.ransac_iterations == 0 {
            return err("ransac_iterations must be at least 1".into());
        }
        if self.min_ground_inliers < 3 {
            return err("min_ground_inliers must be at least 3".into());
        }
        Ok(())
    }
}

/// Source of the scans a pipeline run consumes; both passes read each scan
/// once, in order.
pub trait ScanProvider {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<OrganizedScan, IoError>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scans already in memory.
pub struct SliceScans<'a>(pub &'a [OrganizedScan]);

impl ScanProvider for SliceScans<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, index: usize) -> Result<OrganizedScan, IoError> {
        Ok(self.0[index].clone())
    }
}

/// Scans streamed from a sequence directory.
pub struct DirectoryScans {
    layout: SequenceLayout,
    count: usize,
}

impl DirectoryScans {
    pub fn open(root: &Path) -> Result<DirectoryScans, IoError> {
        let layout = SequenceLayout::new(root);
        let count = layout.scan_indices()?.len();
        Ok(DirectoryScans { layout, count })
    }
}

impl ScanProvider for DirectoryScans {
    fn len(&self) -> usize {
        self.count
    }

    fn load(&self, index: usize) -> Result<OrganizedScan, IoError> {
        io::read_scan(&self.layout.scan_path(index))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub io: Duration,
    pub undistort: Duration,
    pub integrate: Duration,
    pub ground: Duration,
    pub cluster: Duration,
    pub validate: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.io + self.undistort + self.integrate + self.ground + self.cluster + self.validate
    }
}

#[derive(Debug, Clone)]
pub struct ScanStats {
    pub scan_index: usize,
    /// Voxels that flipped free -> occupied in this scan.
    pub candidate_voxels: usize,
    /// Size of the candidate window (ring union plus live feedback).
    pub window_voxels: usize,
    pub candidate_points: usize,
    pub ground_points: usize,
    pub clusters_total: usize,
    pub clusters_accepted: usize,
    pub dynamic_points: usize,
    pub timings: StageTimings,
}

pub struct PipelineSummary {
    pub stats: Vec<ScanStats>,
    /// Wall time of the free-space pass over the whole sequence.
    pub free_pass_seconds: f64,
    /// Final grid state, for dumps and invariance checks.
    pub grid: VoxelGrid,
}

/// Runs both passes. `on_labels` receives each scan's labels during pass 2,
/// in scan order; pass 1 completes before the first call.
pub fn run_two_pass<P: ScanProvider>(
    provider: &P,
    traj: &Trajectory,
    cfg: &SequenceConfig,
    mut on_labels: impl FnMut(usize, &OrganizedScan, &[u32], &ScanStats) -> Result<(), PipelineError>,
) -> Result<PipelineSummary, PipelineError> {
    cfg.validate()?;
    let n = provider.len();
    let mut grid = VoxelGrid::new(cfg.voxel_size);

    let pass1_start = Instant::now();
    for i in 0..n {
        let scan = provider.load(i)?;
        let world = undistort(&scan, traj)?;
        let origin = interpolate_pose(traj, scan.frame_timestamp)?.position();
        let blocked = detect_blocked_rays(&world, cfg.voxel_size);
        integrate_scan(
            &mut grid,
            &world,
            &blocked,
            &origin,
            IntegrationMode::FreeSpaceOnly,
        );
    }
    let free_pass_seconds = pass1_start.elapsed().as_secs_f64();

    let mut ring: VecDeque<HashSet<VoxelIndex>> = VecDeque::new();
    let mut feedback: HashSet<VoxelIndex> = HashSet::new();
    let mut stats_vec = Vec::with_capacity(n);

    for i in 0..n {
        let mut tm = StageTimings::default();

        let t = Instant::now();
        let scan = provider.load(i)?;
        tm.io = t.elapsed();

        let t = Instant::now();
        let world = undistort(&scan, traj)?;
        let origin = interpolate_pose(traj, scan.frame_timestamp)?.position();
        tm.undistort = t.elapsed();

        let t = Instant::now();
        let blocked = detect_blocked_rays(&world, cfg.voxel_size);
        let result = integrate_scan(
            &mut grid,
            &world,
            &blocked,
            &origin,
            IntegrationMode::Occupancy,
        );
        tm.integrate = t.elapsed();
        let candidate_voxels = result.candidate_voxels.len();

        // Current scan plus up to `window` predecessors.
        ring.push_back(result.candidate_voxels);
        while ring.len() > cfg.window + 1 {
            ring.pop_front();
        }

        let t = Instant::now();
        let angles = compute_elevation_angles(&scan);
        let gparams = GroundParams {
            max_point_angle_deg: cfg.ground_point_angle_deg,
            inlier_dist: cfg.ground_inlier_dist,
            ransac_iterations: cfg.ransac_iterations,
            min_ground_inliers: cfg.min_ground_inliers,
            ceiling_min_points: cfg.ceiling_min_points,
            max_plane_tilt_deg: cfg.plane_tilt_deg,
            growth_angle_deg: cfg.ground_growth_deg,
            seed: cfg.seed.wrapping_add(i as u64),
        };
        // The scan is in the sensor frame here, so the sensor sits at the
        // origin. A sequence without enough support points just runs with an
        // empty ground mask.
        let planes = match fit_support_planes(&scan, &angles, &Point3::origin(), &gparams) {
            Ok(planes) => planes,
            Err(GroundError::NoPlane { .. }) => Vec::new(),
        };
        let ground_mask = grow_ground_mask(&scan, &planes, &angles, cfg.ground_growth_deg);
        let ground_points = ground_mask.iter().filter(|&&g| g).count();
        tm.ground = t.elapsed();

        let t = Instant::now();
        let mut window_voxels: HashSet<VoxelIndex> = HashSet::new();
        for set in &ring {
            window_voxels.extend(set.iter().copied());
        }
        if cfg.use_feedback {
            // Feedback voxels stay live only while the grid still knows the
            // space was ever free.
            window_voxels.extend(feedback.iter().filter(|v| grid.ever_free(**v)));
        }

        let mut cand_flags = vec![false; scan.len()];
        let mut candidates = Vec::new();
        for (idx, p) in world.iter_valid() {
            if ground_mask[idx] {
                continue;
            }
            if window_voxels.contains(&grid.voxel_of(&p.position())) {
                cand_flags[idx] = true;
                candidates.push(idx);
            }
        }

        // Seeds group in world space (where occupancy lives); growth runs on
        // the sensor-frame range image.
        let seeds = cluster_candidates(
            &world,
            &candidates,
            cfg.seed_radius_factor * cfg.voxel_size,
            cfg.min_seed_diameter,
        );
        let clusters = grow_clusters(&scan, &seeds, &ground_mask, &cand_flags, cfg.beta_deg);
        tm.cluster = t.elapsed();

        let t = Instant::now();
        let verdicts = validate_clusters(&clusters, cfg.min_cluster_points, cfg.candidate_ratio);

        let mut labels = vec![LABEL_STATIC; scan.len()];
        if cfg.emit_ground_labels {
            for (idx, masked) in ground_mask.iter().enumerate() {
                if *masked {
                    labels[idx] = LABEL_GROUND;
                }
            }
        }
        feedback.clear();
        let mut dynamic_points = 0usize;
        let mut clusters_accepted = 0usize;
        for (cluster, verdict) in clusters.iter().zip(&verdicts) {
            if *verdict != ClusterVerdict::Accepted {
                continue;
            }
            clusters_accepted += 1;
            for &idx in &cluster.points {
                labels[idx] = LABEL_DYNAMIC;
                dynamic_points += 1;
                feedback.insert(grid.voxel_of(&world.points()[idx].position()));
            }
        }
        tm.validate = t.elapsed();

        let stats = ScanStats {
            scan_index: i,
            candidate_voxels,
            window_voxels: window_voxels.len(),
            candidate_points: candidates.len(),
            ground_points,
            clusters_total: clusters.len(),
            clusters_accepted,
            dynamic_points,
            timings: tm,
        };
        on_labels(i, &scan, &labels, &stats)?;
        stats_vec.push(stats);
    }

    Ok(PipelineSummary {
        stats: stats_vec,
        free_pass_seconds,
        grid,
    })
}

/// Labels a sequence directory into `out_root/labels/`, one raster per scan.
pub fn label_sequence(
    seq_root: &Path,
    out_root: &Path,
    cfg: &SequenceConfig,
) -> Result<PipelineSummary, PipelineError> {
    let provider = DirectoryScans::open(seq_root)?;
    let traj = io::read_trajectory(&SequenceLayout::new(seq_root).trajectory_path())?;
    let out_layout = SequenceLayout::new(out_root);
    std::fs::create_dir_all(out_layout.label_dir()).map_err(IoError::Io)?;
    run_two_pass(&provider, &traj, cfg, |i, _scan, labels, _stats| {
        io::write_labels(&out_layout.label_path(i), labels)?;
        Ok(())
    })
}
