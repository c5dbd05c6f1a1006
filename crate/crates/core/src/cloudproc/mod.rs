//! Point-cloud preprocessing: voxel downsampling, ground-plane removal,
//! normal estimation, exact k-nearest-neighbor graphs, padding, and
//! farthest-point sampling.

mod kdtree;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kdtree::KdTree;

/// Points with optional unit normals and a validity mask (`false` = padding).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub mask: Vec<bool>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        let mask = vec![true; points.len()];
        PointCloud {
            points,
            normals: None,
            mask,
        }
    }

    pub fn with_normals(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::LengthMismatch(points.len(), normals.len()));
        }
        let mask = vec![true; points.len()];
        Ok(PointCloud {
            points,
            normals: Some(normals),
            mask,
        })
    }

    /// Total rows, padding included.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn real_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    /// Drops padding rows.
    pub fn compact(&self) -> PointCloud {
        self.select(&self.real_indices())
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            mask: indices.iter().map(|&i| self.mask[i]).collect(),
        }
    }
}

/// A plane `normal·p + offset = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneModel {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inlier_count: usize,
}

impl PlaneModel {
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        (self.normal.dot(p) + self.offset).abs()
    }
}

/// Per-row neighbor lists, each sorted by ascending distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    pub indices: Vec<Vec<usize>>,
    pub k: usize,
}

impl NeighborIndex {
    /// Neighbor lists concatenated row by row.
    pub fn flat(&self) -> Vec<usize> {
        self.indices.iter().flatten().copied().collect()
    }
}

/// Replaces the points of every occupied voxel by their centroid. Voxels are
/// keyed by `floor(p / voxel_size)` and emitted in key order, so the output
/// does not depend on input order.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidVoxelSize(voxel_size));
    }
    struct Acc {
        sum: Vector3<f64>,
        normal: Vector3<f64>,
        count: usize,
    }
    let mut voxels: BTreeMap<(i64, i64, i64), Acc> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if !cloud.mask[i] {
            continue;
        }
        let key = (
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        );
        let acc = voxels.entry(key).or_insert(Acc {
            sum: Vector3::zeros(),
            normal: Vector3::zeros(),
            count: 0,
        });
        acc.sum += p;
        acc.count += 1;
        if let Some(ns) = &cloud.normals {
            acc.normal += ns[i];
        }
    }
    let points = voxels.values().map(|a| a.sum / a.count as f64).collect();
    let normals = cloud.normals.as_ref().map(|_| {
        voxels
            .values()
            .map(|a| {
                let n = a.normal.norm();
                if n > 1e-12 {
                    a.normal / n
                } else {
                    Vector3::z()
                }
            })
            .collect()
    });
    let mask = vec![true; voxels.len()];
    Ok(PointCloud {
        points,
        normals,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundRemovalConfig {
    pub dist_thresh: f64,
    pub iterations: usize,
    /// Maximum angle between the plane normal and the gravity axis for the
    /// plane to count as ground (degrees).
    pub max_tilt_deg: f64,
    pub gravity: [f64; 3],
}

impl Default for GroundRemovalConfig {
    fn default() -> Self {
        GroundRemovalConfig {
            dist_thresh: 0.2,
            iterations: 200,
            max_tilt_deg: 30.0,
            gravity: [0.0, 0.0, 1.0],
        }
    }
}

fn all_collinear(points: &[Vector3<f64>]) -> bool {
    let p0 = points[0];
    let far = points
        .iter()
        .max_by(|a, b| (*a - p0).norm_squared().total_cmp(&(*b - p0).norm_squared()))
        .unwrap();
    let dir = far - p0;
    let len = dir.norm();
    if len < 1e-12 {
        return true;
    }
    let dir = dir / len;
    points.iter().all(|p| (p - p0).cross(&dir).norm() <= 1e-9)
}

/// Fits the dominant plane with RANSAC and, if it is close enough to
/// horizontal, removes its inliers. Returns the remaining cloud and the best
/// plane either way.
pub fn ransac_ground_removal(
    cloud: &PointCloud,
    cfg: &GroundRemovalConfig,
    seed: u64,
) -> Result<(PointCloud, PlaneModel)> {
    let real = cloud.real_indices();
    if real.len() < 3 {
        return Err(Error::DegenerateCloud(format!(
            "{} points, need at least 3",
            real.len()
        )));
    }
    let pts: Vec<Vector3<f64>> = real.iter().map(|&i| cloud.points[i]).collect();
    if all_collinear(&pts) {
        return Err(Error::DegenerateCloud("all points are collinear".into()));
    }
    let gravity = Vector3::from(cfg.gravity).normalize();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<PlaneModel> = None;
    let n = pts.len();
    let count_inliers = |normal: &Vector3<f64>, offset: f64| {
        pts.iter()
            .filter(|p| (normal.dot(p) + offset).abs() <= cfg.dist_thresh)
            .count()
    };
    let try_plane = |a: usize, b: usize, c: usize, best: &mut Option<PlaneModel>| {
        let nrm = (pts[b] - pts[a]).cross(&(pts[c] - pts[a]));
        let len = nrm.norm();
        if len < 1e-12 {
            return;
        }
        let mut normal = nrm / len;
        if normal.dot(&gravity) < 0.0 {
            normal = -normal;
        }
        let offset = -normal.dot(&pts[a]);
        let inlier_count = count_inliers(&normal, offset);
        if best.is_none_or(|b| inlier_count > b.inlier_count) {
            *best = Some(PlaneModel {
                normal,
                offset,
                inlier_count,
            });
        }
    };
    if n == 3 {
        try_plane(0, 1, 2, &mut best);
    } else {
        for _ in 0..cfg.iterations {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = rng.random_range(0..n - 2);
            for lo in [a.min(b), a.max(b)] {
                if c >= lo {
                    c += 1;
                }
            }
            try_plane(a, b, c, &mut best);
        }
    }
    let plane = best.ok_or_else(|| {
        Error::DegenerateCloud("no non-collinear sample found in the iteration budget".into())
    })?;
    let is_ground = plane.normal.dot(&gravity).abs() >= cfg.max_tilt_deg.to_radians().cos();
    if !is_ground {
        return Ok((cloud.clone(), plane));
    }
    let keep: Vec<usize> = real
        .iter()
        .copied()
        .filter(|&i| plane.distance(&cloud.points[i]) > cfg.dist_thresh)
        .collect();
    Ok((cloud.select(&keep), plane))
}

/// Normals from the smallest-eigenvalue direction of each point's
/// k-neighborhood covariance, flipped to face the sensor at the origin.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let real = cloud.real_count();
    if real < k + 1 {
        return Err(Error::InsufficientPoints {
            needed: k,
            available: real,
        });
    }
    let tree = KdTree::masked(&cloud.points, &cloud.mask);
    let normals = cloud
        .points
        .iter()
        .zip(&cloud.mask)
        .enumerate()
        .map(|(i, (p, &m))| {
            if !m {
                return Vector3::zeros();
            }
            let nbrs = tree.knn(p, k, Some(i));
            let mut centroid = *p;
            for (j, _) in &nbrs {
                centroid += cloud.points[*j];
            }
            centroid /= (nbrs.len() + 1) as f64;
            let mut cov = (p - centroid) * (p - centroid).transpose();
            for (j, _) in &nbrs {
                let d = cloud.points[*j] - centroid;
                cov += d * d.transpose();
            }
            let mut n = smallest_eigenvector(&cov);
            if n.dot(&(-p)) < 0.0 {
                n = -n;
            }
            n
        })
        .collect();
    Ok(PointCloud {
        points: cloud.points.clone(),
        normals: Some(normals),
        mask: cloud.mask.clone(),
    })
}

pub(crate) fn smallest_eigenvector(cov: &Matrix3<f64>) -> Vector3<f64> {
    if !cov.iter().all(|x| x.is_finite()) {
        return Vector3::z();
    }
    let eig = SymmetricEigen::new(*cov);
    let i = eig.eigenvalues.imin();
    let v = eig.eigenvectors.column(i).into_owned();
    let n = v.norm();
    if n.is_finite() && n > 1e-12 {
        v / n
    } else {
        Vector3::z()
    }
}

/// Exact k nearest neighbors of every row of a row-major `rows × dim` array,
/// restricted to rows with `mask = true` and excluding the query itself.
/// Ties go to the lower index.
pub fn knn(data: &[f64], dim: usize, mask: &[bool], k: usize) -> Result<NeighborIndex> {
    let rows = mask.len();
    if data.len() != rows * dim {
        return Err(Error::ShapeMismatch {
            op: "knn",
            lhs: vec![data.len()],
            rhs: vec![rows, dim],
        });
    }
    let real: Vec<usize> = (0..rows).filter(|&i| mask[i]).collect();
    if real.len() <= k {
        return Err(Error::InsufficientPoints {
            needed: k,
            available: real.len(),
        });
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(real.len());
    let indices = (0..rows)
        .map(|q| {
            cand.clear();
            let qr = row(q);
            for &j in &real {
                if j == q {
                    continue;
                }
                let d: f64 = qr.iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                cand.push((d, j));
            }
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_by(cmp);
            cand.iter().map(|c| c.1).collect()
        })
        .collect();
    Ok(NeighborIndex { indices, k })
}

/// Keeps the real rows in order and appends zero rows with `mask = false`
/// up to `target_len`.
pub fn pad_to_length(cloud: &PointCloud, target_len: usize) -> Result<PointCloud> {
    let real = cloud.real_count();
    if target_len < real {
        return Err(Error::TargetTooSmall {
            target: target_len,
            count: real,
        });
    }
    let mut out = if real == cloud.len() {
        cloud.clone()
    } else {
        cloud.compact()
    };
    let extra = target_len - real;
    out.points.extend(std::iter::repeat_n(Vector3::zeros(), extra));
    if let Some(ns) = out.normals.as_mut() {
        ns.extend(std::iter::repeat_n(Vector3::zeros(), extra));
    }
    out.mask.extend(std::iter::repeat_n(false, extra));
    Ok(out)
}

/// Pads every cloud to the largest real count in the batch.
pub fn pad_batch(clouds: &[PointCloud]) -> Result<Vec<PointCloud>> {
    let target = clouds.iter().map(|c| c.real_count()).max().unwrap_or(0);
    clouds.iter().map(|c| pad_to_length(c, target)).collect()
}

/// Settings of the model-input preparation chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub voxel_size: f64,
    pub remove_ground: bool,
    pub ground: GroundRemovalConfig,
    pub normal_k: usize,
    /// Farthest-point subsample size; clouds with fewer points are kept whole.
    pub max_points: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            voxel_size: 0.05,
            remove_ground: true,
            ground: GroundRemovalConfig::default(),
            normal_k: 16,
            max_points: 256,
        }
    }
}

/// Voxel downsampling, optional ground removal, normal estimation and a
/// farthest-point subsample, in that order. The output has no padding.
pub fn preprocess(cloud: &PointCloud, cfg: &PreprocessConfig, seed: u64) -> Result<PointCloud> {
    let mut c = voxel_downsample(&cloud.compact(), cfg.voxel_size)?;
    if cfg.remove_ground {
        c = ransac_ground_removal(&c, &cfg.ground, seed)?.0;
    }
    let c = estimate_normals(&c, cfg.normal_k)?;
    let keep = farthest_point_sampling(&c.points, cfg.max_points);
    Ok(c.select(&keep))
}

fn lex_less(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    (a.x, a.y, a.z) < (b.x, b.y, b.z)
}

/// Greedy farthest-point sampling of up to `count` indices among `points`.
///
/// The start point is the lexicographically smallest `(x, y, z)`, and
/// distance ties are broken the same way, so the selected sequence depends
/// only on the point set, never on its order.
pub fn farthest_point_sampling(points: &[Vector3<f64>], count: usize) -> Vec<usize> {
    let n = points.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut start = 0;
    for i in 1..n {
        if lex_less(&points[i], &points[start]) {
            start = i;
        }
    }
    let mut chosen = Vec::with_capacity(count);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = start;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == count {
            break;
        }
        let c = points[current];
        let mut next: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = (points[i] - c).norm_squared();
            if d < min_d[i] {
                min_d[i] = d;
            }
            next = match next {
                None => Some(i),
                Some(j) if min_d[i] > min_d[j] || (min_d[i] == min_d[j] && lex_less(&points[i], &points[j])) => Some(i),
                keep => keep,
            };
        }
        current = next.expect("unselected points remain");
    }
    chosen
}
