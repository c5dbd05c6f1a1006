use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::cloudproc::{KdTree, PointCloud};
use crate::error::{Error, Result};
use crate::geom3d::{compose, RigidTransform, Rotation3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcpVariant {
    PointToPoint,
    PointToPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Correspondences farther apart than this are ignored (meters).
    pub max_correspondence_distance: f64,
    /// Stop once the norm of the incremental twist falls below this.
    pub convergence: f64,
    pub variant: IcpVariant,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 50,
            max_correspondence_distance: 0.075,
            convergence: 1e-7,
            variant: IcpVariant::PointToPlane,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.max_correspondence_distance > 0.0) || !(self.convergence > 0.0) {
            return Err(Error::InvalidConfig(format!("ICP settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source points into the target frame.
    pub transform: RigidTransform,
    /// Fraction of real source points with a correspondence.
    pub fitness: f64,
    /// RMS distance over the correspondences (meters).
    pub rmse: f64,
    pub iterations: usize,
    /// RMSE after the initial guess and after each accepted step.
    pub rmse_history: Vec<f64>,
}

/// `(source index, target index, distance²)` under `transform`.
pub(crate) fn correspondences(
    source: &[Vector3<f64>],
    tree: &KdTree,
    transform: &RigidTransform,
    max_dist: f64,
) -> Vec<(usize, usize, f64)> {
    let max2 = max_dist * max_dist;
    source
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let q = transform.transform_point(p);
            tree.nearest(&q).filter(|(_, d2)| *d2 <= max2).map(|(j, d2)| (i, j, d2))
        })
        .collect()
}

fn rmse_of(c: &[(usize, usize, f64)]) -> f64 {
    (c.iter().map(|x| x.2).sum::<f64>() / c.len() as f64).sqrt()
}

/// Closed-form rigid fit mapping `src[k]` onto `dst[k]` in the least-squares
/// sense.
pub(crate) fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidTransform> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rot = Rotation3::renormalize(&r)?;
    let t = cd - rot.matrix() * cs;
    Ok(RigidTransform::new(rot, t))
}

/// Iterative closest point from `init`. A step is kept only if it does not
/// increase the correspondence RMSE; otherwise iteration stops at the
/// current estimate.
pub fn icp_register(source: &PointCloud, target: &PointCloud, init: &RigidTransform, cfg: &IcpConfig) -> Result<IcpResult> {
    cfg.validate()?;
    let src = source.compact();
    let tgt = target.compact();
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let normals = match (cfg.variant, &tgt.normals) {
        (IcpVariant::PointToPlane, Some(n)) => Some(n),
        (IcpVariant::PointToPlane, None) => {
            return Err(Error::DegenerateCloud("point-to-plane ICP needs target normals".into()))
        }
        (IcpVariant::PointToPoint, _) => None,
    };
    let tree = KdTree::new(&tgt.points);
    let d = cfg.max_correspondence_distance;
    let mut current = *init;
    let mut corr = correspondences(&src.points, &tree, &current, d);
    if corr.is_empty() {
        return Err(Error::NoCorrespondences(d));
    }
    let mut rmse = rmse_of(&corr);
    let mut history = vec![rmse];
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let moved: Vec<Vector3<f64>> = corr.iter().map(|&(i, _, _)| current.transform_point(&src.points[i])).collect();
        let matched: Vec<Vector3<f64>> = corr.iter().map(|&(_, j, _)| tgt.points[j]).collect();
        let step = match normals {
            None => kabsch(&moved, &matched)?,
            Some(ns) => {
                let nrm: Vec<Vector3<f64>> = corr.iter().map(|&(_, j, _)| ns[j]).collect();
                match point_to_plane_step(&moved, &matched, &nrm) {
                    Some(s) => s,
                    None => break,
                }
            }
        };
        let candidate = compose(&step, &current);
        let next = correspondences(&src.points, &tree, &candidate, d);
        if next.is_empty() {
            return Err(Error::NoCorrespondences(d));
        }
        let next_rmse = rmse_of(&next);
        if next_rmse > rmse {
            break;
        }
        current = candidate;
        corr = next;
        rmse = next_rmse;
        history.push(rmse);
        let twist = step.log_local();
        if twist.iter().map(|v| v * v).sum::<f64>().sqrt() < cfg.convergence {
            break;
        }
    }
    Ok(IcpResult {
        transform: current,
        fitness: corr.len() as f64 / src.len() as f64,
        rmse,
        iterations,
        rmse_history: history,
    })
}

/// Linearized point-to-plane update: minimizes Σ ((p + ω×p + t − q)·n)².
fn point_to_plane_step(p: &[Vector3<f64>], q: &[Vector3<f64>], n: &[Vector3<f64>]) -> Option<RigidTransform> {
    let mut a = Matrix6::zeros();
    let mut b = Vector6::zeros();
    for ((p, q), n) in p.iter().zip(q).zip(n) {
        let c = p.cross(n);
        let j = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
        let r = (p - q).dot(n);
        a += j * j.transpose();
        b -= j * r;
    }
    let x = a.cholesky()?.solve(&b);
    Some(RigidTransform::new(
        Rotation3::exp(&Vector3::new(x[0], x[1], x[2])),
        Vector3::new(x[3], x[4], x[5]),
    ))
}

/// Information matrix Σ JᵀJ over the correspondences of `source` placed by
/// `transform`, with `J = [−[q]×, I]` at each matched target point `q`
/// (rotation block first).
pub fn information_matrix(source: &PointCloud, target: &PointCloud, transform: &RigidTransform, max_dist: f64) -> Matrix6<f64> {
    let src = source.compact();
    let tgt = target.compact();
    let tree = KdTree::new(&tgt.points);
    let mut info = Matrix6::zeros();
    for (_, j, _) in correspondences(&src.points, &tree, transform, max_dist) {
        let q = tgt.points[j];
        let rows = [
            [0.0, q.z, -q.y, 1.0, 0.0, 0.0],
            [-q.z, 0.0, q.x, 0.0, 1.0, 0.0],
            [q.y, -q.x, 0.0, 0.0, 0.0, 1.0],
        ];
        for r in rows {
            let v = Vector6::from_row_slice(&r);
            info += v * v.transpose();
        }
    }
    info
}
