//! Fast point feature histograms: 33 bins, three 11-bin angle histograms
//! per point, combined with distance-weighted neighbor histograms.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::cloudproc::{KdTree, PointCloud};
use crate::error::{Error, Result};

pub const FPFH_BINS: usize = 33;
const SUB_BINS: usize = 11;

pub type Fpfh = [f64; FPFH_BINS];

/// Angle features `(f1, f2, f3, distance)` of an oriented point pair.
fn pair_features(p1: &Vector3<f64>, n1: &Vector3<f64>, p2: &Vector3<f64>, n2: &Vector3<f64>) -> Option<[f64; 4]> {
    let mut dp = p2 - p1;
    let f4 = dp.norm();
    if f4 == 0.0 {
        return None;
    }
    let a1 = n1.dot(&dp) / f4;
    let a2 = n2.dot(&dp) / f4;
    let (u, w2, f3) = if a1.abs().acos() > a2.abs().acos() {
        dp = -dp;
        (*n2, *n1, -a2)
    } else {
        (*n1, *n2, a1)
    };
    let v = dp.cross(&u);
    let vn = v.norm();
    if vn == 0.0 {
        return None;
    }
    let v = v / vn;
    let w = u.cross(&v);
    let f2 = v.dot(&w2);
    let f1 = w.dot(&w2).atan2(u.dot(&w2));
    Some([f1, f2, f3, f4])
}

fn bin(x: f64) -> usize {
    ((SUB_BINS as f64 * x).floor().max(0.0) as usize).min(SUB_BINS - 1)
}

/// FPFH of every real point using neighbors within `radius`.
pub fn compute_fpfh(cloud: &PointCloud, radius: f64) -> Result<Vec<Fpfh>> {
    let c = cloud.compact();
    let normals = c
        .normals
        .as_ref()
        .ok_or_else(|| Error::DegenerateCloud("FPFH needs normals".into()))?;
    let tree = KdTree::new(&c.points);
    let neighborhoods: Vec<Vec<(usize, f64)>> = c
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| tree.radius(p, radius).into_iter().filter(|&(j, _)| j != i).collect())
        .collect();
    let spfh: Vec<Fpfh> = (0..c.len())
        .map(|i| {
            let mut h = [0.0; FPFH_BINS];
            let nb = &neighborhoods[i];
            if nb.is_empty() {
                return h;
            }
            let incr = 100.0 / nb.len() as f64;
            for &(j, _) in nb {
                if let Some([f1, f2, f3, _]) = pair_features(&c.points[i], &normals[i], &c.points[j], &normals[j]) {
                    h[bin((f1 + PI) / (2.0 * PI))] += incr;
                    h[SUB_BINS + bin((f2 + 1.0) * 0.5)] += incr;
                    h[2 * SUB_BINS + bin((f3 + 1.0) * 0.5)] += incr;
                }
            }
            h
        })
        .collect();
    Ok((0..c.len())
        .map(|i| {
            let mut f = [0.0; FPFH_BINS];
            let mut sums = [0.0; 3];
            for &(j, d2) in &neighborhoods[i] {
                if d2 == 0.0 {
                    continue;
                }
                for b in 0..FPFH_BINS {
                    let v = spfh[j][b] / d2;
                    sums[b / SUB_BINS] += v;
                    f[b] += v;
                }
            }
            for b in 0..FPFH_BINS {
                let s = sums[b / SUB_BINS];
                if s != 0.0 {
                    f[b] *= 100.0 / s;
                }
                f[b] += spfh[i][b];
            }
            f
        })
        .collect())
}
