//! Sparse four-state occupancy grid over an infinite voxel lattice.
//!
//! Storage is an associative map of 16x16x16 voxel blocks allocated on first
//! touch, so the grid covers arbitrary world extents while memory tracks the
//! observed volume. Every voxel carries its state plus a monotone `ever_free`
//! flag that survives later state changes.

mod integration;
mod traversal;

pub use integration::{detect_blocked_rays, integrate_scan, IntegrationMode, ScanIntegrationResult};
pub use traversal::{reference_traverse, traverse_ray, traverse_ray_entries, TraversalError};

use nalgebra::Point3;
use std::collections::HashMap;

/// Per-voxel occupancy state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VoxelState {
    Unobserved,
    Free,
    Occupied,
    Blocked,
}

impl VoxelState {
    pub fn name(self) -> &'static str {
        match self {
            VoxelState::Unobserved => "unobserved",
            VoxelState::Free => "free",
            VoxelState::Occupied => "occupied",
            VoxelState::Blocked => "blocked",
        }
    }
}

/// Integer lattice coordinates of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelIndex {
    pub fn new(x: i32, y: i32, z: i32) -> Self {
        VoxelIndex { x, y, z }
    }

    /// The 26 surrounding lattice cells.
    pub fn neighbors26(self) -> impl Iterator<Item = VoxelIndex> {
        let c = self;
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1).filter_map(move |dz| {
                    if dx == 0 && dy == 0 && dz == 0 {
                        None
                    } else {
                        Some(VoxelIndex::new(c.x + dx, c.y + dy, c.z + dz))
                    }
                })
            })
        })
    }
}

/// Voxel containing a world point: componentwise floor of p / voxel_size.
/// Boundary points belong to the voxel on the positive side.
pub fn voxel_index_of(p: &Point3<f64>, voxel_size: f64) -> VoxelIndex {
    VoxelIndex {
        x: (p.x / voxel_size).floor() as i32,
        y: (p.y / voxel_size).floor() as i32,
        z: (p.z / voxel_size).floor() as i32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelCell {
    pub state: VoxelState,
    pub ever_free: bool,
}

const UNTOUCHED: VoxelCell = VoxelCell {
    state: VoxelState::Unobserved,
    ever_free: false,
};

const BLOCK_DIM: i32 = 16;
const BLOCK_LEN: usize = (BLOCK_DIM * BLOCK_DIM * BLOCK_DIM) as usize;

#[derive(Clone)]
struct Block {
    cells: Box<[VoxelCell; BLOCK_LEN]>,
}

impl Block {
    fn new() -> Self {
        Block {
            cells: Box::new([UNTOUCHED; BLOCK_LEN]),
        }
    }
}

fn split_index(v: VoxelIndex) -> ((i32, i32, i32), usize) {
    let block = (
        v.x.div_euclid(BLOCK_DIM),
        v.y.div_euclid(BLOCK_DIM),
        v.z.div_euclid(BLOCK_DIM),
    );
    let (lx, ly, lz) = (
        v.x.rem_euclid(BLOCK_DIM),
        v.y.rem_euclid(BLOCK_DIM),
        v.z.rem_euclid(BLOCK_DIM),
    );
    let offset = ((lx * BLOCK_DIM + ly) * BLOCK_DIM + lz) as usize;
    (block, offset)
}

/// Sparse voxel grid keyed by 16^3 blocks.
#[derive(Clone)]
pub struct VoxelGrid {
    voxel_size: f64,
    blocks: HashMap<(i32, i32, i32), Block>,
}

impl VoxelGrid {
    /// Panics if voxel_size is not a positive finite number.
    pub fn new(voxel_size: f64) -> Self {
        assert!(
            voxel_size.is_finite() && voxel_size > 0.0,
            "voxel size must be positive"
        );
        VoxelGrid {
            voxel_size,
            blocks: HashMap::new(),
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn voxel_of(&self, p: &Point3<f64>) -> VoxelIndex {
        voxel_index_of(p, self.voxel_size)
    }

    /// State and ever_free flag; unallocated voxels read as Unobserved.
    pub fn query(&self, v: VoxelIndex) -> (VoxelState, bool) {
        let (b, off) = split_index(v);
        match self.blocks.get(&b) {
            Some(block) => {
                let c = block.cells[off];
                (c.state, c.ever_free)
            }
            None => (VoxelState::Unobserved, false),
        }
    }

    pub fn state(&self, v: VoxelIndex) -> VoxelState {
        self.query(v).0
    }

    pub fn ever_free(&self, v: VoxelIndex) -> bool {
        self.query(v).1
    }

    fn cell_mut(&mut self, v: VoxelIndex) -> &mut VoxelCell {
        let (b, off) = split_index(v);
        &mut self.blocks.entry(b).or_insert_with(Block::new).cells[off]
    }

    pub fn set_free(&mut self, v: VoxelIndex) {
        let cell = self.cell_mut(v);
        cell.state = VoxelState::Free;
        cell.ever_free = true;
    }

    pub fn set_blocked(&mut self, v: VoxelIndex) {
        self.cell_mut(v).state = VoxelState::Blocked;
    }

    pub fn set_occupied(&mut self, v: VoxelIndex) {
        self.cell_mut(v).state = VoxelState::Occupied;
    }

    pub fn allocated_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Voxels whose state or ever_free flag has ever been written, in
    /// unspecified order.
    pub fn iter_touched(&self) -> impl Iterator<Item = (VoxelIndex, VoxelCell)> + '_ {
        self.blocks.iter().flat_map(|(&(bx, by, bz), block)| {
            block.cells.iter().enumerate().filter_map(move |(off, &cell)| {
                if cell == UNTOUCHED {
                    return None;
                }
                let off = off as i32;
                let (lx, ly, lz) = (off / (BLOCK_DIM * BLOCK_DIM), (off / BLOCK_DIM) % BLOCK_DIM, off % BLOCK_DIM);
                Some((
                    VoxelIndex::new(bx * BLOCK_DIM + lx, by * BLOCK_DIM + ly, bz * BLOCK_DIM + lz),
                    cell,
                ))
            })
        })
    }

    /// Touched voxels sorted by index; the canonical order for dumps.
    pub fn sorted_touched(&self) -> Vec<(VoxelIndex, VoxelCell)> {
        let mut cells: Vec<_> = self.iter_touched().collect();
        cells.sort_by_key(|(v, _)| *v);
        cells
    }
}
