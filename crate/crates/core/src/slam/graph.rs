//! Pose graph and its damped Gauss–Newton optimizer with node 0 fixed.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::RigidTransform;
use crate::slam::se3;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Odometry,
    Loop,
    LocalMap,
}

/// Relative measurement `poses[from]⁻¹ · poses[to]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEdge {
    pub from: usize,
    pub to: usize,
    pub measurement: RigidTransform,
    pub information: Matrix6<f64>,
    pub kind: EdgeKind,
    /// Set for constant-velocity stand-ins after a failed registration.
    pub low_confidence: bool,
}

/// Sensor-to-world poses indexed by node id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    pub poses: Vec<RigidTransform>,
    pub edges: Vec<PoseEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop once the update norm falls below this.
    pub tolerance: f64,
    pub initial_damping: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { max_iterations: 50, tolerance: 1e-8, initial_damping: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
}

impl PoseGraph {
    pub fn add_node(&mut self, pose: RigidTransform) -> usize {
        self.poses.push(pose);
        self.poses.len() - 1
    }

    pub fn add_edge(&mut self, edge: PoseEdge) -> Result<()> {
        let n = self.poses.len();
        if edge.from >= n || edge.to >= n {
            return Err(Error::LengthMismatch(edge.from.max(edge.to), n));
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn residual(&self, e: &PoseEdge) -> Vector6<f64> {
        let predicted = self.poses[e.from].inverse().compose(&self.poses[e.to]);
        se3::log(&e.measurement.inverse().compose(&predicted))
    }

    /// `Σ rᵀ Ω r` over all edges.
    pub fn cost(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let r = self.residual(e);
                (r.transpose() * e.information * r)[(0, 0)]
            })
            .sum()
    }

    pub fn edges_of(&self, kind: EdgeKind) -> impl Iterator<Item = &PoseEdge> {
        self.edges.iter().filter(move |e| e.kind == kind)
    }
}

fn retract(graph: &PoseGraph, delta: &DVector<f64>) -> PoseGraph {
    let mut out = graph.clone();
    for (k, pose) in out.poses.iter_mut().enumerate().skip(1) {
        let d = Vector6::from_fn(|r, _| delta[(k - 1) * 6 + r]);
        *pose = pose.compose(&se3::exp(&d));
    }
    out
}

/// Minimizes `Σ ‖log(Z⁻¹ X_from⁻¹ X_to)‖²_Ω` over right perturbations of
/// every node but node 0, with Levenberg–Marquardt damping: a step is
/// accepted only if it lowers the cost. Returns the best iterate; a
/// warning is logged if the iteration budget runs out first.
pub fn pose_graph_optimize(graph: &PoseGraph, cfg: &OptimizerConfig) -> (PoseGraph, OptimizeReport) {
    let n = graph.poses.len();
    let initial_cost = graph.cost();
    let mut report = OptimizeReport { iterations: 0, initial_cost, final_cost: initial_cost, converged: true };
    if n < 2 || graph.edges.is_empty() {
        return (graph.clone(), report);
    }
    let dim = 6 * (n - 1);
    let mut current = graph.clone();
    let mut cost = initial_cost;
    let mut lambda = cfg.initial_damping;
    report.converged = false;
    for it in 0..cfg.max_iterations {
        report.iterations = it + 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for e in &current.edges {
            let r = current.residual(e);
            let jr = se3::right_jacobian_inverse_approx(&r);
            let rel = current.poses[e.to].inverse().compose(&current.poses[e.from]);
            let j_to = jr;
            let j_from = -jr * se3::adjoint(&rel);
            let blocks = [(e.from, j_from), (e.to, j_to)];
            for &(a, ja) in &blocks {
                if a == 0 {
                    continue;
                }
                let ia = (a - 1) * 6;
                let g = ja.transpose() * e.information * r;
                for k in 0..6 {
                    b[ia + k] += g[k];
                }
                for &(c, jc) in &blocks {
                    if c == 0 {
                        continue;
                    }
                    let ic = (c - 1) * 6;
                    let blk = ja.transpose() * e.information * jc;
                    let mut view = h.view_mut((ia, ic), (6, 6));
                    view += blk;
                }
            }
        }
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = h.clone();
            for k in 0..dim {
                damped[(k, k)] += lambda * (1.0 + h[(k, k)]);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&b);
            let step = delta.norm();
            if step < cfg.tolerance {
                report.converged = true;
                report.final_cost = cost;
                return (current, report);
            }
            let trial = retract(&current, &delta);
            let trial_cost = trial.cost();
            if trial_cost < cost {
                current = trial;
                cost = trial_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No damping level lowers the cost: a (numerical) minimum.
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        warn!("pose graph optimization stopped after {} iterations", report.iterations);
    }
    report.final_cost = cost;
    (current, report)
}
