//! On-disk formats: organized scan files, label rasters, pose files, voxel
//! grid dumps, sequence manifests, and PLY point cloud export.
//!
//! All binary formats are little-endian. Scan files start with the magic
//! `DOLS` and a format version so corrupt or foreign files fail loudly.

use crate::scan::{OrganizedScan, PointRecord, Pose, Trajectory};
use crate::voxel::VoxelGrid;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const SCAN_MAGIC: [u8; 4] = *b"DOLS";
pub const SCAN_VERSION: u16 = 1;
const SCAN_HEADER_BYTES: u64 = 18;
const SCAN_RECORD_BYTES: u64 = 29;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {SCAN_MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported scan format version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated at byte {offset}")]
    Truncated { offset: u64 },
    #[error("{0}")]
    Format(String),
    #[error("digest mismatch for {path}: manifest {expected}, file {found}")]
    HashMismatch {
        path: String,
        expected: String,
        found: String,
    },
}

impl IoError {
    /// True for filesystem failures as opposed to malformed content.
    pub fn is_filesystem(&self) -> bool {
        matches!(self, IoError::Io(_))
    }
}

// ---------------------------------------------------------------------------
// Organized scan files

pub fn write_scan(path: &Path, scan: &OrganizedScan) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&SCAN_MAGIC)?;
    w.write_u16::<LittleEndian>(SCAN_VERSION)?;
    w.write_u16::<LittleEndian>(scan.rows() as u16)?;
    w.write_u16::<LittleEndian>(scan.cols() as u16)?;
    w.write_f64::<LittleEndian>(scan.frame_timestamp)?;
    for p in scan.points() {
        w.write_f32::<LittleEndian>(p.x)?;
        w.write_f32::<LittleEndian>(p.y)?;
        w.write_f32::<LittleEndian>(p.z)?;
        w.write_f32::<LittleEndian>(p.range)?;
        w.write_f32::<LittleEndian>(p.intensity)?;
        w.write_f64::<LittleEndian>(p.timestamp)?;
        w.write_u8(p.valid as u8)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scan(path: &Path) -> Result<OrganizedScan, IoError> {
    let bytes = std::fs::read(path)?;
    let total = bytes.len() as u64;
    let mut r = std::io::Cursor::new(bytes);

    let truncated = |e: std::io::Error, at: u64| -> IoError {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            IoError::Truncated { offset: at }
        } else {
            IoError::Io(e)
        }
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| truncated(e, total))?;
    if magic != SCAN_MAGIC {
        return Err(IoError::BadMagic { found: magic });
    }
    let version = r
        .read_u16::<LittleEndian>()
        .map_err(|e| truncated(e, total))?;
    if version != SCAN_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    if total < SCAN_HEADER_BYTES {
        return Err(IoError::Truncated { offset: total });
    }
    let rows = r.read_u16::<LittleEndian>().unwrap() as usize;
    let cols = r.read_u16::<LittleEndian>().unwrap() as usize;
    let frame_timestamp = r.read_f64::<LittleEndian>().unwrap();

    let expected = SCAN_HEADER_BYTES + (rows * cols) as u64 * SCAN_RECORD_BYTES;
    if total < expected {
        // Report the start of the record the file ran out in.
        let complete = (total - SCAN_HEADER_BYTES.min(total)) / SCAN_RECORD_BYTES;
        return Err(IoError::Truncated {
            offset: SCAN_HEADER_BYTES + complete * SCAN_RECORD_BYTES,
        });
    }
    if total > expected {
        return Err(IoError::Format(format!(
            "{} trailing bytes after the last point record",
            total - expected
        )));
    }

    let mut points = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let x = r.read_f32::<LittleEndian>().unwrap();
        let y = r.read_f32::<LittleEndian>().unwrap();
        let z = r.read_f32::<LittleEndian>().unwrap();
        let range = r.read_f32::<LittleEndian>().unwrap();
        let intensity = r.read_f32::<LittleEndian>().unwrap();
        let timestamp = r.read_f64::<LittleEndian>().unwrap();
        let valid = match r.read_u8().unwrap() {
            0 => false,
            1 => true,
            other => {
                return Err(IoError::Format(format!(
                    "point {i}: valid flag must be 0 or 1, found {other}"
                )))
            }
        };
        points.push(PointRecord {
            x,
            y,
            z,
            range,
            intensity,
            timestamp,
            valid,
        });
    }
    Ok(OrganizedScan::from_points(rows, cols, frame_timestamp, points))
}

// ---------------------------------------------------------------------------
// Label rasters

/// Row-major u32 labels, one per scan pixel, little-endian, no header.
pub fn write_labels(path: &Path, labels: &[u32]) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for &l in labels {
        w.write_u32::<LittleEndian>(l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>, IoError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(IoError::Truncated {
            offset: (bytes.len() - bytes.len() % 4) as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

// ---------------------------------------------------------------------------
// Pose files

/// One pose per line: `t tx ty tz qx qy qz qw`, 12 decimal places, `#`
/// starts a comment.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in traj.poses() {
        let q = p.rotation.quaternion();
        writeln!(
            w,
            "{:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}",
            p.timestamp,
            p.translation.x,
            p.translation.y,
            p.translation.z,
            q.coords.x,
            q.coords.y,
            q.coords.z,
            q.coords.w,
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut poses = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::Format(format!("pose line {}: {e}", lineno + 1)))?;
        if fields.len() != 8 {
            return Err(IoError::Format(format!(
                "pose line {}: expected 8 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let quat = Quaternion::new(fields[7], fields[4], fields[5], fields[6]);
        if quat.norm() < 1e-6 {
            return Err(IoError::Format(format!(
                "pose line {}: zero quaternion",
                lineno + 1
            )));
        }
        poses.push(Pose {
            timestamp: fields[0],
            translation: Vector3::new(fields[1], fields[2], fields[3]),
            rotation: UnitQuaternion::from_quaternion(quat),
        });
    }
    Trajectory::new(poses).map_err(|e| IoError::Format(format!("pose file: {e}")))
}

// ---------------------------------------------------------------------------
// Voxel grid dumps

/// One line per touched voxel, sorted by index:
/// `ix iy iz state ever_free` with state spelled out and ever_free 0/1.
pub fn grid_dump_string(grid: &VoxelGrid) -> String {
    let mut out = String::new();
    for (v, cell) in grid.sorted_touched() {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            v.x,
            v.y,
            v.z,
            cell.state.name(),
            cell.ever_free as u8
        ));
    }
    out
}

pub fn write_grid_dump(path: &Path, grid: &VoxelGrid) -> Result<(), IoError> {
    std::fs::write(path, grid_dump_string(grid))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sequence manifests

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileDigest {
    pub bytes: u64,
    pub sha256: String,
}

/// Inventory of a generated sequence directory. Maps are ordered so the
/// serialized form is byte-stable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceManifest {
    pub name: String,
    pub scan_count: usize,
    pub rows: usize,
    pub cols: usize,
    pub rate_hz: f64,
    pub files: BTreeMap<String, FileDigest>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<FileDigest, IoError> {
    let bytes = std::fs::read(path)?;
    Ok(FileDigest {
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

pub fn write_manifest(path: &Path, manifest: &SequenceManifest) -> Result<(), IoError> {
    let mut json = serde_json::to_string_pretty(manifest)
        .map_err(|e| IoError::Format(format!("manifest encode: {e}")))?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<SequenceManifest, IoError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::Format(format!("manifest parse: {e}")))
}

/// Recomputes every digest in the manifest against the files under `dir`.
pub fn verify_manifest(dir: &Path, manifest: &SequenceManifest) -> Result<(), IoError> {
    for (rel, expected) in &manifest.files {
        let found = digest_file(&dir.join(rel))?;
        if found != *expected {
            return Err(IoError::HashMismatch {
                path: rel.clone(),
                expected: expected.sha256.clone(),
                found: found.sha256,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PLY export

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    pub label: u32,
}

/// Binary little-endian PLY with x/y/z/intensity floats and a uint label.
pub fn write_ply(path: &Path, points: &[PlyPoint]) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float intensity\nproperty uint label\nend_header\n",
        points.len()
    )?;
    for p in points {
        w.write_f32::<LittleEndian>(p.x)?;
        w.write_f32::<LittleEndian>(p.y)?;
        w.write_f32::<LittleEndian>(p.z)?;
        w.write_f32::<LittleEndian>(p.intensity)?;
        w.write_u32::<LittleEndian>(p.label)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Flat key=value config files

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped. Returns pairs in file order; key semantics are the caller's.
pub fn parse_config_str(text: &str) -> Result<Vec<(String, String)>, IoError> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(IoError::Format(format!(
                "config line {}: expected key=value, found {body:?}",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(IoError::Format(format!(
                "config line {}: empty key",
                lineno + 1
            )));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, IoError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

// ---------------------------------------------------------------------------
// Sequence directory layout

/// Canonical file layout of a sequence directory.
pub struct SequenceLayout {
    pub root: PathBuf,
}

impl SequenceLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SequenceLayout { root: root.into() }
    }

    pub fn scan_dir(&self) -> PathBuf {
        self.root.join("scans")
    }

    pub fn truth_dir(&self) -> PathBuf {
        self.root.join("truth")
    }

    pub fn label_dir(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn scan_path(&self, index: usize) -> PathBuf {
        self.scan_dir().join(format!("scan_{index:06}.bin"))
    }

    pub fn truth_path(&self, index: usize) -> PathBuf {
        self.truth_dir().join(format!("labels_{index:06}.bin"))
    }

    pub fn label_path(&self, index: usize) -> PathBuf {
        self.label_dir().join(format!("labels_{index:06}.bin"))
    }

    pub fn trajectory_path(&self) -> PathBuf {
        self.root.join("trajectory.txt")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Scan indices present on disk: scan_NNNNNN.bin files, sorted. Gaps in
    /// the numbering are an error.
    pub fn scan_indices(&self) -> Result<Vec<usize>, IoError> {
        let mut indices = Vec::new();
        for entry in std::fs::read_dir(self.scan_dir())? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(num) = name
                .strip_prefix("scan_")
                .and_then(|s| s.strip_suffix(".bin"))
            {
                let idx: usize = num
                    .parse()
                    .map_err(|_| IoError::Format(format!("unexpected scan file name {name}")))?;
                indices.push(idx);
            }
        }
        indices.sort_unstable();
        for (want, &got) in indices.iter().enumerate() {
            if want != got {
                return Err(IoError::Format(format!(
                    "scan files are not contiguous: missing index {want}"
                )));
            }
        }
        Ok(indices)
    }
}
