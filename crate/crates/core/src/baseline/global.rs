//! Initialization-free registration: FPFH correspondences filtered by a
//! 3-point RANSAC with an edge-length consistency check.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fpfh::{compute_fpfh, Fpfh, FPFH_BINS};
use super::icp::{correspondences, kabsch};
use crate::cloudproc::{KdTree, PointCloud};
use crate::error::{Error, Result};
use crate::geom3d::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConfig {
    /// Neighborhood radius of the FPFH descriptors (meters).
    pub feature_radius: f64,
    /// Inlier distance for hypotheses and the final fitness (meters).
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    /// Minimum ratio of corresponding edge lengths within a sample.
    pub edge_length_ratio: f64,
    /// Registrations below this fitness are reported as failures.
    pub fitness_floor: f64,
    /// Minimum real points per cloud.
    pub min_points: usize,
}

impl GlobalConfig {
    pub fn for_voxel(voxel: f64) -> Self {
        GlobalConfig {
            feature_radius: 5.0 * voxel,
            max_correspondence_distance: 1.5 * voxel,
            max_iterations: 100_000,
            confidence: 0.999,
            edge_length_ratio: 0.9,
            fitness_floor: 0.05,
            min_points: 50,
        }
    }
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self::for_voxel(0.05)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalResult {
    pub transform: RigidTransform,
    pub fitness: f64,
    pub rmse: f64,
}

/// A cloud with its descriptors, so that each cloud's FPFH is computed once
/// when it takes part in many pairs.
#[derive(Debug, Clone)]
pub struct DescribedCloud {
    pub cloud: PointCloud,
    pub features: Vec<Fpfh>,
}

impl DescribedCloud {
    pub fn new(cloud: &PointCloud, cfg: &GlobalConfig) -> Result<Self> {
        let cloud = cloud.compact();
        let features = compute_fpfh(&cloud, cfg.feature_radius)?;
        Ok(DescribedCloud { cloud, features })
    }
}

/// Estimates the transform mapping `source` onto `target`.
pub fn global_register(source: &PointCloud, target: &PointCloud, cfg: &GlobalConfig, seed: u64) -> Result<GlobalResult> {
    let s = DescribedCloud::new(source, cfg)?;
    let t = DescribedCloud::new(target, cfg)?;
    global_register_described(&s, &t, cfg, seed)
}

fn nearest_feature(query: &Fpfh, features: &[Fpfh]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, f) in features.iter().enumerate() {
        let mut d = 0.0;
        for b in 0..FPFH_BINS {
            let x = query[b] - f[b];
            d += x * x;
        }
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

pub fn global_register_described(
    source: &DescribedCloud,
    target: &DescribedCloud,
    cfg: &GlobalConfig,
    seed: u64,
) -> Result<GlobalResult> {
    let (sp, tp) = (&source.cloud.points, &target.cloud.points);
    let need = cfg.min_points;
    for n in [sp.len(), tp.len()] {
        if n < need {
            return Err(Error::InsufficientPoints { needed: need - 1, available: n });
        }
    }
    let corr: Vec<(usize, usize)> = source
        .features
        .iter()
        .enumerate()
        .map(|(i, f)| (i, nearest_feature(f, &target.features)))
        .collect();
    let d2 = cfg.max_correspondence_distance.powi(2);
    let count_inliers = |t: &RigidTransform| {
        corr.iter()
            .filter(|&&(i, j)| (t.transform_point(&sp[i]) - tp[j]).norm_squared() <= d2)
            .count()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, RigidTransform)> = None;
    let mut budget = cfg.max_iterations;
    let mut it = 0;
    let n = corr.len();
    while it < budget {
        it += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let c = rng.random_range(0..n);
        if a == b || b == c || a == c {
            continue;
        }
        let sample = [corr[a], corr[b], corr[c]];
        if !edges_consistent(&sample, sp, tp, cfg.edge_length_ratio) {
            continue;
        }
        let src: Vec<Vector3<f64>> = sample.iter().map(|&(i, _)| sp[i]).collect();
        let dst: Vec<Vector3<f64>> = sample.iter().map(|&(_, j)| tp[j]).collect();
        let Ok(t) = kabsch(&src, &dst) else { continue };
        if src.iter().zip(&dst).any(|(s, d)| (t.transform_point(s) - d).norm_squared() > d2) {
            continue;
        }
        let inliers = count_inliers(&t);
        if best.as_ref().is_none_or(|(bi, _)| inliers > *bi) {
            best = Some((inliers, t));
            let w = inliers as f64 / n as f64;
            let needed = ((1.0 - cfg.confidence).ln() / (1.0 - w.powi(3)).ln()).ceil();
            if needed.is_finite() && needed >= 0.0 {
                budget = budget.min(needed as usize);
            }
        }
    }
    let Some((_, mut transform)) = best else {
        return Err(Error::RegistrationFailed {
            fitness: 0.0,
            floor: cfg.fitness_floor,
        });
    };
    // refit on the hypothesis' inliers
    let inl: Vec<(usize, usize)> = corr
        .iter()
        .copied()
        .filter(|&(i, j)| (transform.transform_point(&sp[i]) - tp[j]).norm_squared() <= d2)
        .collect();
    if inl.len() >= 3 {
        let src: Vec<Vector3<f64>> = inl.iter().map(|&(i, _)| sp[i]).collect();
        let dst: Vec<Vector3<f64>> = inl.iter().map(|&(_, j)| tp[j]).collect();
        if let Ok(t) = kabsch(&src, &dst) {
            if count_inliers(&t) >= inl.len() {
                transform = t;
            }
        }
    }
    let tree = KdTree::new(tp);
    let matches = correspondences(sp, &tree, &transform, cfg.max_correspondence_distance);
    let fitness = matches.len() as f64 / sp.len() as f64;
    if fitness < cfg.fitness_floor {
        return Err(Error::RegistrationFailed {
            fitness,
            floor: cfg.fitness_floor,
        });
    }
    let rmse = (matches.iter().map(|m| m.2).sum::<f64>() / matches.len() as f64).sqrt();
    Ok(GlobalResult { transform, fitness, rmse })
}

fn edges_consistent(sample: &[(usize, usize); 3], sp: &[Vector3<f64>], tp: &[Vector3<f64>], ratio: f64) -> bool {
    for (x, y) in [(0, 1), (1, 2), (0, 2)] {
        let ls = (sp[sample[x].0] - sp[sample[y].0]).norm();
        let lt = (tp[sample[x].1] - tp[sample[y].1]).norm();
        let (lo, hi) = if ls < lt { (ls, lt) } else { (lt, ls) };
        if hi == 0.0 || lo < ratio * hi {
            return false;
        }
    }
    true
}
