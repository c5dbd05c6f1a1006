//! Multiway registration baseline: ICP odometry edges between neighbors,
//! globally registered loop-closure edges between the rest, and a two-pass
//! pose-graph optimization that prunes inconsistent loop closures.

mod fpfh;
mod global;
mod icp;
mod posegraph;

pub use fpfh::{compute_fpfh, Fpfh, FPFH_BINS};
pub use global::{global_register, global_register_described, DescribedCloud, GlobalConfig, GlobalResult};
pub use icp::{icp_register, information_matrix, IcpConfig, IcpResult, IcpVariant};
pub use posegraph::{
    edge_residual, optimize_two_pass, Edge, LineProcessConfig, PoseGraph, SolverConfig, TwoPassResult,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cloudproc::{smallest_eigenvector, voxel_downsample, KdTree, PointCloud};
use crate::error::{Error, Result};
use crate::geom3d::{compose, inverse, PoseSet, RigidTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiwayConfig {
    pub voxel_size: f64,
    /// Normal neighborhood: radius in voxels, capped at `normal_max_nn`.
    pub normal_radius_voxels: f64,
    pub normal_max_nn: usize,
    /// Correspondence distances of the coarse and fine ICP stages, in voxels.
    pub coarse_voxels: f64,
    pub fine_voxels: f64,
    pub icp_iterations: usize,
    pub global: GlobalConfig,
    /// Odometry ICP from the identity is retried from a global registration
    /// when its fitness falls below this.
    pub odometry_retry_fitness: f64,
    /// Loop closures are kept only at or above this ICP fitness, measured
    /// from both clouds.
    pub loop_fitness_floor: f64,
    /// Loop closures also need an inlier RMSE of at most this fraction of
    /// the fine correspondence distance. Planar patches of unrelated scans
    /// can slide into high fitness, but their residuals fill the whole gate.
    pub loop_max_rmse: f64,
    pub loop_closures: bool,
    pub prune_threshold: f64,
    /// Overrides the graph-scaled line-process weight.
    pub mu: Option<f64>,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for MultiwayConfig {
    fn default() -> Self {
        Self::for_voxel(0.05)
    }
}

impl MultiwayConfig {
    pub fn for_voxel(voxel: f64) -> Self {
        MultiwayConfig {
            voxel_size: voxel,
            normal_radius_voxels: 2.0,
            normal_max_nn: 30,
            coarse_voxels: 15.0,
            fine_voxels: 1.5,
            icp_iterations: 50,
            global: GlobalConfig::for_voxel(voxel),
            odometry_retry_fitness: 0.5,
            loop_fitness_floor: 0.3,
            loop_max_rmse: 0.5,
            loop_closures: true,
            prune_threshold: 0.25,
            mu: None,
            solver: SolverConfig::default(),
            seed: 0,
        }
    }

    pub fn fine_distance(&self) -> f64 {
        self.fine_voxels * self.voxel_size
    }

    fn icp(&self, voxels: f64) -> IcpConfig {
        IcpConfig {
            max_iterations: self.icp_iterations,
            max_correspondence_distance: voxels * self.voxel_size,
            ..IcpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::InvalidVoxelSize(self.voxel_size));
        }
        self.icp(self.coarse_voxels).validate()?;
        self.icp(self.fine_voxels).validate()?;
        if self.normal_max_nn < 3 || !(self.normal_radius_voxels > 0.0) {
            return Err(Error::InvalidConfig("normal neighborhood too small".into()));
        }
        Ok(())
    }
}

/// Normals from neighbors within `radius`, at most `max_nn` of them,
/// oriented toward the sensor at the origin. Points with fewer than three
/// neighbors get `+z`.
pub fn estimate_normals_hybrid(cloud: &PointCloud, radius: f64, max_nn: usize) -> PointCloud {
    let c = cloud.compact();
    let tree = KdTree::new(&c.points);
    let r2 = radius * radius;
    let normals = c
        .points
        .iter()
        .map(|p| {
            let nbrs: Vec<Vector3<f64>> = tree
                .knn(p, max_nn, None)
                .into_iter()
                .filter(|&(_, d2)| d2 <= r2)
                .map(|(j, _)| c.points[j])
                .collect();
            if nbrs.len() < 3 {
                return Vector3::z();
            }
            let centroid = nbrs.iter().sum::<Vector3<f64>>() / nbrs.len() as f64;
            let cov = nbrs.iter().map(|q| (q - centroid) * (q - centroid).transpose()).sum();
            let n = smallest_eigenvector(&cov);
            if n.dot(&(-p)) < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect();
    PointCloud {
        normals: Some(normals),
        ..c
    }
}

/// Voxel downsampling plus hybrid normals, as every baseline stage expects.
pub fn prepare_cloud(cloud: &PointCloud, cfg: &MultiwayConfig) -> Result<PointCloud> {
    let down = voxel_downsample(&cloud.compact(), cfg.voxel_size)?;
    if down.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(estimate_normals_hybrid(
        &down,
        cfg.normal_radius_voxels * cfg.voxel_size,
        cfg.normal_max_nn,
    ))
}

/// Coarse then fine point-to-plane ICP from `init`.
fn refine(source: &PointCloud, target: &PointCloud, init: &RigidTransform, cfg: &MultiwayConfig) -> Result<IcpResult> {
    let coarse = icp_register(source, target, init, &cfg.icp(cfg.coarse_voxels))?;
    icp_register(source, target, &coarse.transform, &cfg.icp(cfg.fine_voxels))
}

fn pair_seed(i: usize, j: usize, seed: u64) -> u64 {
    // splitmix-style mixing keeps neighboring pairs decorrelated
    let mut z = seed ^ ((i as u64) << 32 | j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn better(a: IcpResult, b: IcpResult) -> IcpResult {
    if b.fitness > a.fitness || (b.fitness == a.fitness && b.rmse < a.rmse) {
        b
    } else {
        a
    }
}

fn odometry_edge(i: usize, clouds: &[PointCloud], described: &[DescribedCloud], cfg: &MultiwayConfig) -> Result<Edge> {
    let (src, tgt) = (&clouds[i + 1], &clouds[i]);
    let from_identity = refine(src, tgt, &RigidTransform::identity(), cfg);
    let result = match from_identity {
        Ok(r) if r.fitness >= cfg.odometry_retry_fitness => r,
        first => {
            let global = global_register_described(&described[i + 1], &described[i], &cfg.global, pair_seed(i, i + 1, cfg.seed))
                .and_then(|g| refine(src, tgt, &g.transform, cfg));
            match (first, global) {
                (Ok(a), Ok(b)) => better(a, b),
                (Ok(a), Err(_)) => a,
                (Err(_), Ok(b)) => b,
                (Err(e), Err(_)) => return Err(e),
            }
        }
    };
    Ok(Edge {
        i,
        j: i + 1,
        information: information_matrix(src, tgt, &result.transform, cfg.fine_distance()),
        measurement: result.transform,
        uncertain: false,
    })
}

fn loop_edge(i: usize, j: usize, clouds: &[PointCloud], described: &[DescribedCloud], cfg: &MultiwayConfig) -> Option<Edge> {
    let g = global_register_described(&described[j], &described[i], &cfg.global, pair_seed(i, j, cfg.seed)).ok()?;
    let r = refine(&clouds[j], &clouds[i], &g.transform, cfg).ok()?;
    if r.fitness < cfg.loop_fitness_floor || r.rmse > cfg.loop_max_rmse * cfg.fine_distance() {
        return None;
    }
    // a small scan can hide inside a large one, so the overlap must also
    // cover the target
    let back = KdTree::new(&clouds[j].points);
    let reverse = icp::correspondences(&clouds[i].points, &back, &inverse(&r.transform), cfg.fine_distance()).len();
    if (reverse as f64) < cfg.loop_fitness_floor * clouds[i].len() as f64 {
        return None;
    }
    Some(Edge {
        i,
        j,
        information: information_matrix(&clouds[j], &clouds[i], &r.transform, cfg.fine_distance()),
        measurement: r.transform,
        uncertain: true,
    })
}

/// Runs `f` over `items` on all available cores, preserving order.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Pose graph over clouds already passed through [`prepare_cloud`]. Node
/// poses start as the chained odometry.
pub fn build_pose_graph(clouds: &[PointCloud], cfg: &MultiwayConfig) -> Result<PoseGraph> {
    if clouds.len() < 2 {
        return Err(Error::SingleCloud);
    }
    cfg.validate()?;
    let described = parallel_map(clouds, |c| DescribedCloud::new(c, &cfg.global));
    let described = described.into_iter().collect::<Result<Vec<_>>>()?;
    let odo_idx: Vec<usize> = (0..clouds.len() - 1).collect();
    let odometry = parallel_map(&odo_idx, |&i| odometry_edge(i, clouds, &described, cfg));
    let odometry = odometry.into_iter().collect::<Result<Vec<_>>>()?;
    let mut nodes = vec![RigidTransform::identity()];
    for e in &odometry {
        let last = *nodes.last().expect("non-empty");
        nodes.push(compose(&last, &e.measurement));
    }
    let mut graph = PoseGraph::new(PoseSet::new(nodes));
    for e in odometry {
        graph.add_edge(e)?;
    }
    if cfg.loop_closures {
        let pairs: Vec<(usize, usize)> = (0..clouds.len())
            .flat_map(|i| (i + 2..clouds.len()).map(move |j| (i, j)))
            .collect();
        for e in parallel_map(&pairs, |&(i, j)| loop_edge(i, j, clouds, &described, cfg)).into_iter().flatten() {
            graph.add_edge(e)?;
        }
    }
    Ok(graph)
}

#[derive(Debug, Clone)]
pub struct MultiwayResult {
    /// Anchored at cloud 0.
    pub poses: PoseSet,
    pub graph: PoseGraph,
    pub optimization: TwoPassResult,
}

/// Downsamples, builds the pose graph and optimizes it in two passes.
pub fn multiway_register(clouds: &[PointCloud], cfg: &MultiwayConfig) -> Result<MultiwayResult> {
    if clouds.len() < 2 {
        return Err(Error::SingleCloud);
    }
    let prepared = clouds.iter().map(|c| prepare_cloud(c, cfg)).collect::<Result<Vec<_>>>()?;
    let graph = build_pose_graph(&prepared, cfg)?;
    let mut lp = LineProcessConfig::for_graph(&graph, cfg.fine_distance());
    lp.prune_threshold = cfg.prune_threshold;
    if let Some(mu) = cfg.mu {
        lp.mu = mu;
    }
    let optimization = optimize_two_pass(&graph, &lp, &cfg.solver)?;
    for &k in &optimization.pruned {
        let e = &graph.edges[k];
        log::info!("pruned loop closure ({}, {})", e.i, e.j);
    }
    Ok(MultiwayResult {
        poses: optimization.poses.anchored(),
        graph,
        optimization,
    })
}
