//! Reading and writing scan sequences, synthetic data, and run configuration.

mod config;
mod kitti;
mod ply;
mod synth;

pub use config::{RunConfig, TrainConfig};
pub use kitti::{
    camera_poses_to_lidar, list_scans, parse_kitti_poses, read_kitti_calibration, read_kitti_poses, read_kitti_scan,
    write_kitti_poses, write_kitti_scan,
};
pub use ply::{ply_string, read_ply, write_cloud_ply, write_ply, Rgb, PALETTE};
pub use synth::{synth_generate, synth_trajectory, synth_world, MotionModel, StructureSpec, SyntheticSceneSpec};

use std::path::Path;

use crate::cloudproc::PointCloud;
use crate::error::{Error, Result};
use crate::geom3d::PoseSet;

/// Name of the ground-truth file inside a sequence directory.
pub const POSES_FILE: &str = "poses.txt";

/// Ordered scans of one sequence, with ground truth when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequence {
    pub id: String,
    pub clouds: Vec<PointCloud>,
    pub truth: Option<PoseSet>,
}

impl ScanSequence {
    pub fn new(id: String, clouds: Vec<PointCloud>, truth: Option<PoseSet>) -> Result<Self> {
        if let Some(t) = &truth {
            if t.len() != clouds.len() {
                return Err(Error::LengthMismatch(clouds.len(), t.len()));
            }
        }
        Ok(ScanSequence { id, clouds, truth })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Writes `velodyne/NNNNNN.bin` per scan and `poses.txt` when the truth
    /// is known.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let velodyne = dir.join("velodyne");
        std::fs::create_dir_all(&velodyne)?;
        for (k, c) in self.clouds.iter().enumerate() {
            write_kitti_scan(c, &velodyne.join(format!("{k:06}.bin")))?;
        }
        if let Some(t) = &self.truth {
            write_kitti_poses(t, &dir.join(POSES_FILE))?;
        }
        Ok(())
    }

    /// Reads a directory laid out by [`ScanSequence::write_dir`] (or a bare
    /// directory of `.bin` scans). `poses` overrides the ground-truth path.
    pub fn read_dir(dir: &Path, poses: Option<&Path>) -> Result<Self> {
        let clouds = list_scans(dir)?.iter().map(|p| read_kitti_scan(p)).collect::<Result<Vec<_>>>()?;
        let default_poses = dir.join(POSES_FILE);
        let truth = match poses {
            Some(p) => Some(read_kitti_poses(p)?),
            None if default_poses.is_file() => Some(read_kitti_poses(&default_poses)?),
            None => None,
        };
        let id = dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        ScanSequence::new(id, clouds, truth)
    }
}
