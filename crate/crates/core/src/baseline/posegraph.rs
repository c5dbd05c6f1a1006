//! Pose graph with a line process over uncertain edges, optimized by
//! Levenberg-Marquardt with node 0 held fixed.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{compose, inverse, relative, PoseSet, RigidTransform};

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    /// Pose of node `j` in the frame of node `i`.
    pub measurement: RigidTransform,
    pub information: Matrix6<f64>,
    pub uncertain: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseGraph {
    pub nodes: PoseSet,
    pub edges: Vec<Edge>,
}

#[derive(Serialize, Deserialize)]
struct EdgeJson {
    i: usize,
    j: usize,
    measurement: Vec<f64>,
    information: Vec<f64>,
    uncertain: bool,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<Vec<f64>>,
    edges: Vec<EdgeJson>,
}

fn pose_from_slice(v: &[f64]) -> Result<RigidTransform> {
    let arr: [f64; 12] = v
        .try_into()
        .map_err(|_| Error::DegenerateInput(format!("pose needs 12 values, got {}", v.len())))?;
    Ok(RigidTransform::from_row_major_3x4(&arr)?.0)
}

impl PoseGraph {
    pub fn new(nodes: PoseSet) -> Self {
        PoseGraph { nodes, edges: Vec::new() }
    }

    pub fn add_edge(&mut self, edge: Edge) -> Result<()> {
        let n = self.nodes.len();
        if edge.i >= n || edge.j >= n || edge.i == edge.j {
            return Err(Error::DegenerateInput(format!("edge ({}, {}) in a graph of {n} nodes", edge.i, edge.j)));
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let g = GraphJson {
            nodes: self.nodes.poses.iter().map(|p| p.to_row_major_3x4().to_vec()).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeJson {
                    i: e.i,
                    j: e.j,
                    measurement: e.measurement.to_row_major_3x4().to_vec(),
                    information: e.information.transpose().iter().copied().collect(),
                    uncertain: e.uncertain,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&g)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: GraphJson = serde_json::from_str(text)?;
        let nodes = g.nodes.iter().map(|v| pose_from_slice(v)).collect::<Result<Vec<_>>>()?;
        let mut graph = PoseGraph::new(PoseSet::new(nodes));
        for e in g.edges {
            if e.information.len() != 36 {
                return Err(Error::DegenerateInput(format!(
                    "information needs 36 values, got {}",
                    e.information.len()
                )));
            }
            graph.add_edge(Edge {
                i: e.i,
                j: e.j,
                measurement: pose_from_slice(&e.measurement)?,
                information: Matrix6::from_row_slice(&e.information),
                uncertain: e.uncertain,
            })?;
        }
        Ok(graph)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fails with the first node not reachable from node 0 over certain edges.
    pub fn check_connected(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Ok(());
        }
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        while let Some(u) = queue.pop_front() {
            for e in self.edges.iter().filter(|e| !e.uncertain) {
                let v = if e.i == u {
                    e.j
                } else if e.j == u {
                    e.i
                } else {
                    continue;
                };
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(k) => Err(Error::NotConnected(k)),
            None => Ok(()),
        }
    }

    /// Mean translational-diagonal information of the certain edges, i.e.
    /// the typical correspondence count of an odometry edge.
    pub fn mean_certain_information(&self) -> f64 {
        let certain: Vec<f64> = self.edges.iter().filter(|e| !e.uncertain).map(|e| e.information[(5, 5)]).collect();
        if certain.is_empty() {
            1.0
        } else {
            certain.iter().sum::<f64>() / certain.len() as f64
        }
    }
}

/// `log(Z⁻¹ · T_i⁻¹ · T_j)`.
pub fn edge_residual(edge: &Edge, t_i: &RigidTransform, t_j: &RigidTransform) -> Vector6<f64> {
    let e = compose(&inverse(&edge.measurement), &relative(t_i, t_j));
    Vector6::from_row_slice(&e.log_local())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineProcessConfig {
    /// Weight of the line-process penalty `μ(√l − 1)²`.
    pub mu: f64,
    /// Uncertain edges whose final weight falls below this are pruned.
    pub prune_threshold: f64,
}

impl LineProcessConfig {
    /// `μ = 16 d² · n̄`, with `d` the correspondence distance and `n̄` the
    /// graph's mean certain-edge correspondence count, so that the penalty
    /// is on the scale of information-weighted residuals.
    pub fn for_graph(graph: &PoseGraph, correspondence_distance: f64) -> Self {
        LineProcessConfig {
            mu: 16.0 * correspondence_distance * correspondence_distance * graph.mean_certain_information(),
            prune_threshold: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_lm_iterations: usize,
    /// Outer alternations between LM and line-process updates.
    pub max_outer_iterations: usize,
    pub initial_lambda: f64,
    /// Converged once the relative objective decrease or step norm drops
    /// below this.
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_lm_iterations: 100,
            max_outer_iterations: 50,
            initial_lambda: 1e-4,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPassResult {
    pub poses: PoseSet,
    /// Indices into the input graph's edge list.
    pub pruned: Vec<usize>,
    /// Final line-process weight per edge (1 for certain edges).
    pub line_weights: Vec<f64>,
    /// Objective after every accepted LM step and line-process update of
    /// the first pass.
    pub first_pass_objective: Vec<f64>,
    pub second_pass_objective: Vec<f64>,
    /// `false` when an iteration budget ran out; the best iterate is still
    /// returned.
    pub converged: bool,
}

struct Problem<'a> {
    edges: &'a [Edge],
    weights: Vec<f64>,
    mu: f64,
}

impl Problem<'_> {
    fn objective(&self, poses: &[RigidTransform]) -> f64 {
        let mut f = 0.0;
        for (e, &w) in self.edges.iter().zip(&self.weights) {
            let r = edge_residual(e, &poses[e.i], &poses[e.j]);
            f += w * (r.transpose() * e.information * r)[(0, 0)];
            if e.uncertain {
                f += self.mu * (w.sqrt() - 1.0).powi(2);
            }
        }
        f
    }

    /// Gauss-Newton system over nodes `1..n` with central-difference
    /// Jacobians of right-multiplied local increments.
    fn normal_equations(&self, poses: &[RigidTransform]) -> (DMatrix<f64>, DVector<f64>) {
        let n = poses.len() - 1;
        let mut h = DMatrix::zeros(6 * n, 6 * n);
        let mut b = DVector::zeros(6 * n);
        const STEP: f64 = 1e-6;
        for (e, &w) in self.edges.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let r = edge_residual(e, &poses[e.i], &poses[e.j]);
            let mut jac = [Matrix6::zeros(); 2];
            for (side, node) in [e.i, e.j].into_iter().enumerate() {
                if node == 0 {
                    continue;
                }
                for k in 0..6 {
                    let mut d = [0.0; 6];
                    d[k] = STEP;
                    let plus = compose(&poses[node], &RigidTransform::exp_local(&d));
                    d[k] = -STEP;
                    let minus = compose(&poses[node], &RigidTransform::exp_local(&d));
                    let (rp, rm) = if side == 0 {
                        (edge_residual(e, &plus, &poses[e.j]), edge_residual(e, &minus, &poses[e.j]))
                    } else {
                        (edge_residual(e, &poses[e.i], &plus), edge_residual(e, &poses[e.i], &minus))
                    };
                    jac[side].set_column(k, &((rp - rm) / (2.0 * STEP)));
                }
            }
            let nodes = [e.i, e.j];
            for a in 0..2 {
                if nodes[a] == 0 {
                    continue;
                }
                let ra = 6 * (nodes[a] - 1);
                let g = w * jac[a].transpose() * e.information * r;
                for k in 0..6 {
                    b[ra + k] += g[k];
                }
                for c in 0..2 {
                    if nodes[c] == 0 {
                        continue;
                    }
                    let rc = 6 * (nodes[c] - 1);
                    let blk = w * jac[a].transpose() * e.information * jac[c];
                    let mut view = h.view_mut((ra, rc), (6, 6));
                    view += blk;
                }
            }
        }
        (h, b)
    }

    /// LM with fixed weights. Returns whether it converged within budget.
    fn minimize(&self, poses: &mut [RigidTransform], cfg: &SolverConfig, history: &mut Vec<f64>) -> bool {
        if poses.len() < 2 {
            return true;
        }
        let mut f = self.objective(poses);
        let mut lambda = cfg.initial_lambda;
        for _ in 0..cfg.max_lm_iterations {
            let (h, b) = self.normal_equations(poses);
            let mut improved = false;
            while lambda < 1e12 {
                let mut damped = h.clone();
                for k in 0..damped.nrows() {
                    damped[(k, k)] += lambda * (h[(k, k)] + 1e-9);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let dx = chol.solve(&(-&b));
                let candidate: Vec<RigidTransform> = poses
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        if k == 0 {
                            *p
                        } else {
                            let s = 6 * (k - 1);
                            let d = [dx[s], dx[s + 1], dx[s + 2], dx[s + 3], dx[s + 4], dx[s + 5]];
                            compose(p, &RigidTransform::exp_local(&d))
                        }
                    })
                    .collect();
                let fc = self.objective(&candidate);
                if fc <= f {
                    let small = dx.norm() < cfg.tolerance || f - fc <= cfg.tolerance * f.max(1e-300);
                    poses.copy_from_slice(&candidate);
                    f = fc;
                    history.push(f);
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    if small {
                        return true;
                    }
                    break;
                }
                lambda *= 4.0;
            }
            if !improved {
                // no descent direction left at any damping
                return true;
            }
        }
        false
    }

    fn update_weights(&mut self, poses: &[RigidTransform]) {
        for (e, w) in self.edges.iter().zip(self.weights.iter_mut()) {
            if e.uncertain {
                let r = edge_residual(e, &poses[e.i], &poses[e.j]);
                let chi2 = (r.transpose() * e.information * r)[(0, 0)].max(0.0);
                *w = (self.mu / (self.mu + chi2)).powi(2).clamp(0.0, 1.0);
            }
        }
    }
}

/// Pass 1 alternates LM with closed-form line-process updates over all
/// edges and prunes uncertain edges whose weight ends below the threshold;
/// pass 2 re-optimizes over the surviving edges at full weight.
pub fn optimize_two_pass(graph: &PoseGraph, lp: &LineProcessConfig, cfg: &SolverConfig) -> Result<TwoPassResult> {
    graph.check_connected()?;
    if !(lp.mu > 0.0) || !(0.0..=1.0).contains(&lp.prune_threshold) {
        return Err(Error::InvalidConfig(format!("line process settings out of range: {lp:?}")));
    }
    let mut poses = graph.nodes.poses.clone();
    if let Some(first) = poses.first().copied() {
        let inv = inverse(&first);
        for p in poses.iter_mut() {
            *p = compose(&inv, p);
        }
        poses[0] = RigidTransform::identity();
    }
    let mut problem = Problem {
        edges: &graph.edges,
        weights: vec![1.0; graph.edges.len()],
        mu: lp.mu,
    };
    let mut first = vec![problem.objective(&poses)];
    let mut converged = false;
    for _ in 0..cfg.max_outer_iterations {
        let before = problem.weights.clone();
        let inner = problem.minimize(&mut poses, cfg, &mut first);
        problem.update_weights(&poses);
        first.push(problem.objective(&poses));
        let change = before.iter().zip(&problem.weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if inner && change < 1e-6 {
            converged = true;
            break;
        }
    }
    let line_weights = problem.weights.clone();
    let pruned: Vec<usize> = graph
        .edges
        .iter()
        .enumerate()
        .filter(|(k, e)| e.uncertain && line_weights[*k] < lp.prune_threshold)
        .map(|(k, _)| k)
        .collect();
    let surviving: Vec<Edge> = graph
        .edges
        .iter()
        .enumerate()
        .filter(|(k, _)| !pruned.contains(k))
        .map(|(_, e)| Edge { uncertain: false, ..e.clone() })
        .collect();
    let second_problem = Problem {
        edges: &surviving,
        weights: vec![1.0; surviving.len()],
        mu: lp.mu,
    };
    let mut second = vec![second_problem.objective(&poses)];
    converged &= second_problem.minimize(&mut poses, cfg, &mut second);
    if !converged {
        log::warn!("pose graph optimization stopped at its iteration budget");
    }
    Ok(TwoPassResult {
        poses: PoseSet::new(poses),
        pruned,
        line_weights,
        first_pass_objective: first,
        second_pass_objective: second,
        converged,
    })
}
