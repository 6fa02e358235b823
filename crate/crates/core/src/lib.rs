//! Offline auto-labeling of dynamic objects in organized LiDAR sequences.
//!
//! The suite detects moving objects by change detection in a sparse occupancy
//! grid: a first pass accumulates free-space evidence over the whole sequence,
//! a second pass turns free-to-occupied transitions into candidate voxels,
//! and a two-stage clustering step grows and validates object clusters from
//! the candidate points. A scene simulator, an IoU evaluation harness, and a
//! static-map builder round out the toolchain.

pub mod cluster;
pub mod eval;
pub mod io;
pub mod mapping;
pub mod pipeline;
pub mod ground;
pub mod scan;
pub mod sim;
pub mod voxel;

pub use scan::{OrganizedScan, PointRecord, Pose, Trajectory};
pub use voxel::{IntegrationMode, VoxelGrid, VoxelIndex, VoxelState};
