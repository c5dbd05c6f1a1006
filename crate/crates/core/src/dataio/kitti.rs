//! KITTI odometry layout: velodyne scans as little-endian `f32` records
//! `(x, y, z, intensity)`, poses as one row-major 3×4 matrix per line.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::cloudproc::PointCloud;
use crate::error::{Error, Result};
use crate::geom3d::{compose, inverse, PoseSet, RigidTransform};

/// Drift from SO(3) above which a projected pose is worth a warning; smaller
/// drift is ordinary text rounding.
const DRIFT_WARNING: f64 = 1e-6;

const RECORD: usize = 16;

/// Reads one velodyne scan. Intensity is dropped.
pub fn read_kitti_scan(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    parse_kitti_scan(&bytes).map_err(|reason| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    })
}

fn parse_kitti_scan(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(format!("size {} is not a multiple of {RECORD}", bytes.len()));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let points = bytes
        .chunks_exact(RECORD)
        .map(|r| Vector3::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12])))
        .collect();
    Ok(PointCloud::from_points(points))
}

/// Writes the real points of `cloud` with zero intensity.
pub fn write_kitti_scan(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.real_count() * RECORD);
    for i in cloud.real_indices() {
        let p = cloud.points[i];
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn parse_kitti_poses(text: &str) -> Result<PoseSet> {
    let mut poses = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        let arr: [f64; 12] = values.as_slice().try_into().map_err(|_| Error::MalformedLine {
            line: line_no,
            reason: format!("expected 12 values, got {}", values.len()),
        })?;
        let (pose, drift) = RigidTransform::from_row_major_3x4(&arr).map_err(|e| Error::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        if drift > DRIFT_WARNING {
            log::warn!("pose on line {line_no} is off SO(3) by {drift:.3e}; projected");
        }
        poses.push(pose);
    }
    Ok(PoseSet::new(poses))
}

pub fn read_kitti_poses(path: &Path) -> Result<PoseSet> {
    parse_kitti_poses(&std::fs::read_to_string(path)?)
}

pub fn write_kitti_poses(poses: &PoseSet, path: &Path) -> Result<()> {
    std::fs::write(path, poses.to_kitti_string())?;
    Ok(())
}

/// The `Tr:` entry of a KITTI `calib.txt`: velodyne to camera-0.
pub fn read_kitti_calibration(path: &Path) -> Result<RigidTransform> {
    let text = std::fs::read_to_string(path)?;
    for (k, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("Tr:") {
            let poses = parse_kitti_poses(rest).map_err(|e| Error::MalformedLine {
                line: k + 1,
                reason: e.to_string(),
            })?;
            return poses.poses.first().copied().ok_or_else(|| Error::MalformedLine {
                line: k + 1,
                reason: "empty Tr entry".into(),
            });
        }
    }
    Err(Error::MalformedFile {
        path: path.to_path_buf(),
        reason: "no `Tr:` line".into(),
    })
}

/// Re-expresses camera-frame ground truth in the velodyne frame:
/// `Tr⁻¹ · P_k · Tr`.
pub fn camera_poses_to_lidar(poses: &PoseSet, tr: &RigidTransform) -> PoseSet {
    let inv = inverse(tr);
    PoseSet::new(poses.poses.iter().map(|p| compose(&compose(&inv, p), tr)).collect())
}

/// Scan files of a sequence directory in name order: `velodyne/*.bin` when
/// that subdirectory exists, else `*.bin` directly inside.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let velodyne = dir.join("velodyne");
    let root = if velodyne.is_dir() { velodyne } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    Ok(files)
}
