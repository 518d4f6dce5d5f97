//! The sequential SLAM state machine.

use log::{debug, info};
use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

use crate::decoder::{attention_fuse, describe_pair, loop_closure_prob, register_descriptors, RegisterOptions};
use crate::encoder::DescriptorSet;
use crate::error::Error;
use crate::geometry::{random_sample_pad, PointCloud, RigidTransform};
use crate::io::SequenceSource;
use crate::model::Model;
use crate::slam::graph::{pose_graph_optimize, EdgeKind, OptimizerConfig, PoseEdge, PoseGraph};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    /// Keyframe gate: registration RMSE must be strictly below this (m).
    pub rmse_max: f64,
    /// Keyframe gate: frame confidence must be strictly above this.
    pub tau_min: f64,
    /// Keyframes are kept farther apart than this (m).
    pub keyframe_min_dist: f64,
    /// Historical frames considered around the nearest keyframe.
    pub odometry_k: usize,
    pub loop_candidate_radius: f64,
    /// Candidates closer than this in translation (m) and
    /// `loop_min_rotation_deg` in rotation are dropped.
    pub loop_min_motion: f64,
    pub loop_min_rotation_deg: f64,
    /// Keyframes this many frames or fewer behind the current one are not
    /// loop candidates.
    pub loop_exclude_recent: usize,
    pub loop_top_k: usize,
    pub loop_trigger_count: usize,
    pub localmap_k: usize,
    pub localmap_radius: f64,
    pub enable_loop_closure: bool,
    pub enable_local_map: bool,
    /// Information of a constant-velocity stand-in edge.
    pub fallback_information: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for SlamConfig {
    fn default() -> Self {
        SlamConfig {
            rmse_max: 0.5,
            tau_min: 0.1,
            keyframe_min_dist: 2.0,
            odometry_k: 4,
            loop_candidate_radius: 15.0,
            loop_min_motion: 1.0,
            loop_min_rotation_deg: 10.0,
            loop_exclude_recent: 10,
            loop_top_k: 2,
            loop_trigger_count: 3,
            localmap_k: 8,
            localmap_radius: 30.0,
            enable_loop_closure: true,
            enable_local_map: true,
            fallback_information: 0.01,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.rmse_max,
            self.tau_min,
            self.keyframe_min_dist,
            self.loop_candidate_radius,
            self.loop_min_motion,
            self.localmap_radius,
            self.fallback_information,
        ];
        if positive.iter().any(|v| !(*v > 0.0))
            || self.loop_top_k == 0
            || self.loop_trigger_count == 0
            || self.localmap_k == 0
            || self.odometry_k == 0
        {
            return Err(Error::Config("SLAM thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of registering a source description onto a destination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairResult {
    /// Maps source coordinates into destination coordinates.
    pub transform: RigidTransform,
    pub rmse: f64,
    pub tau: f64,
    pub pairs: usize,
}

/// Frame description, registration and loop scoring used by the pipeline.
pub trait Registrar {
    type Desc: Clone;
    fn describe(&self, cloud: &PointCloud) -> Result<Self::Desc>;
    fn register(&self, src: &Self::Desc, dst: &Self::Desc) -> Result<PairResult>;
    fn loop_probability(&self, a: &Self::Desc, b: &Self::Desc) -> Result<f64>;
    /// Descriptors exported into the global map, in the frame's coordinates.
    fn map_descriptors(&self, _desc: &Self::Desc) -> Option<DescriptorSet> {
        None
    }
}

/// Registration through the learned model.
pub struct LearnedRegistrar<'a> {
    pub model: &'a Model,
    pub sample_n: usize,
    pub options: RegisterOptions,
    pub seed: u64,
}

impl Registrar for LearnedRegistrar<'_> {
    type Desc = DescriptorSet;

    fn describe(&self, cloud: &PointCloud) -> Result<DescriptorSet> {
        let seed = self.seed.wrapping_add(cloud.frame_id as u64);
        let sampled = random_sample_pad(cloud, self.sample_n, seed);
        Ok(describe_pair(self.model, &sampled, &sampled, self.options)?.0)
    }

    fn register(&self, src: &DescriptorSet, dst: &DescriptorSet) -> Result<PairResult> {
        let r = register_descriptors(self.model, src, dst)?;
        Ok(PairResult { transform: r.transform, rmse: r.rmse, tau: r.tau_frame, pairs: r.matches.len() })
    }

    fn loop_probability(&self, a: &DescriptorSet, b: &DescriptorSet) -> Result<f64> {
        let (fa, fb) = attention_fuse(self.model, a, b)?;
        loop_closure_prob(self.model, &fa, &fb)
    }

    fn map_descriptors(&self, desc: &DescriptorSet) -> Option<DescriptorSet> {
        Some(desc.clone())
    }
}

/// Exact registration from ground-truth poses, keyed by frame id.
pub struct OracleRegistrar {
    pub poses: Vec<RigidTransform>,
    /// Pairs reported per registration (sets edge information).
    pub pairs: usize,
    pub revisit_distance: f64,
}

impl OracleRegistrar {
    pub fn new(poses: Vec<RigidTransform>) -> Self {
        OracleRegistrar { poses, pairs: 64, revisit_distance: 5.0 }
    }
}

impl Registrar for OracleRegistrar {
    type Desc = usize;

    fn describe(&self, cloud: &PointCloud) -> Result<usize> {
        if cloud.frame_id >= self.poses.len() {
            return Err(Error::LengthMismatch(cloud.frame_id, self.poses.len()));
        }
        Ok(cloud.frame_id)
    }

    fn register(&self, src: &usize, dst: &usize) -> Result<PairResult> {
        Ok(PairResult {
            transform: self.poses[*dst].inverse().compose(&self.poses[*src]),
            rmse: 0.0,
            tau: 1.0,
            pairs: self.pairs,
        })
    }

    fn loop_probability(&self, a: &usize, b: &usize) -> Result<f64> {
        let d = self.poses[*a].translation.distance(self.poses[*b].translation);
        Ok(if d < self.revisit_distance { 1.0 - d / (2.0 * self.revisit_distance) } else { 0.0 })
    }
}

#[derive(Debug, Clone)]
pub struct FrameRecord<D> {
    pub frame_id: usize,
    pub cloud: PointCloud,
    pub desc: D,
}

/// Sequential SLAM state; graph node `k` is `frames[k]`.
#[derive(Debug, Clone)]
pub struct SlamState<D> {
    pub frames: Vec<FrameRecord<D>>,
    pub keyframes: Vec<usize>,
    pub graph: PoseGraph,
    pub keyframes_since_loop: usize,
    pub last_motion: RigidTransform,
    pub failures: usize,
}

impl<D> Default for SlamState<D> {
    fn default() -> Self {
        SlamState {
            frames: Vec::new(),
            keyframes: Vec::new(),
            graph: PoseGraph::default(),
            keyframes_since_loop: 0,
            last_motion: RigidTransform::IDENTITY,
            failures: 0,
        }
    }
}

impl<D> SlamState<D> {
    pub fn pose(&self, k: usize) -> RigidTransform {
        self.graph.poses[k]
    }

    fn nearest_keyframe(&self, pose: &RigidTransform) -> Option<usize> {
        self.keyframes.iter().copied().min_by(|&a, &b| {
            let da = self.graph.poses[a].translation.distance(pose.translation);
            let db = self.graph.poses[b].translation.distance(pose.translation);
            da.total_cmp(&db).then(b.cmp(&a))
        })
    }

    /// Indices of the `k` nodes nearest to `pose`, nearest first, ties to
    /// the most recent.
    fn nearest_nodes(&self, pose: &RigidTransform, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.graph.poses.len()).collect();
        idx.sort_by(|&a, &b| {
            let da = self.graph.poses[a].translation.distance(pose.translation);
            let db = self.graph.poses[b].translation.distance(pose.translation);
            da.total_cmp(&db).then(b.cmp(&a))
        });
        idx.truncate(k);
        idx
    }
}

fn information(pairs: usize, scale: f64) -> Matrix6<f64> {
    Matrix6::identity() * (pairs.max(1) as f64 * scale)
}

/// Strict gates on RMSE and confidence, then spacing from every keyframe.
pub fn keyframe_decision(
    rmse: f64,
    tau: f64,
    pose: &RigidTransform,
    keyframe_poses: &[RigidTransform],
    cfg: &SlamConfig,
) -> bool {
    rmse < cfg.rmse_max
        && tau > cfg.tau_min
        && keyframe_poses.iter().all(|k| k.translation.distance(pose.translation) > cfg.keyframe_min_dist)
}

/// What one odometry step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryOutcome {
    pub node: usize,
    pub target: Option<usize>,
    pub registered: Option<PairResult>,
    pub keyframe: bool,
}

/// Registers the new frame onto the historical frame selected around the
/// nearest keyframe, appends its node and odometry edge, and applies the
/// keyframe decision. The first frame is fixed at the identity and becomes
/// a keyframe. A failed registration falls back to constant velocity with a
/// low-confidence edge.
pub fn odometry_step<R: Registrar>(
    state: &mut SlamState<R::Desc>,
    cloud: &PointCloud,
    registrar: &R,
    cfg: &SlamConfig,
) -> Result<OdometryOutcome> {
    let desc = registrar.describe(cloud)?;
    let record = FrameRecord { frame_id: cloud.frame_id, cloud: cloud.clone(), desc };
    if state.frames.is_empty() {
        state.frames.push(record);
        let node = state.graph.add_node(RigidTransform::IDENTITY);
        state.keyframes.push(node);
        return Ok(OdometryOutcome { node, target: None, registered: None, keyframe: true });
    }
    let prev = state.frames.len() - 1;
    let predicted = state.pose(prev).compose(&state.last_motion);
    let km = state.nearest_keyframe(&predicted).expect("first frame is a keyframe");
    let around = state.nearest_nodes(&state.pose(km), cfg.odometry_k);
    let target = around
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let da = state.pose(a).translation.distance(predicted.translation);
            let db = state.pose(b).translation.distance(predicted.translation);
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .expect("non-empty history");
    let registered = registrar.register(&record.desc, &state.frames[target].desc).ok();
    state.frames.push(record);
    let (pose, edge) = match registered {
        Some(r) => {
            let pose = state.pose(target).compose(&r.transform);
            let edge = PoseEdge {
                from: target,
                to: prev + 1,
                measurement: r.transform,
                information: information(r.pairs, 1.0),
                kind: EdgeKind::Odometry,
                low_confidence: false,
            };
            (pose, edge)
        }
        None => {
            state.failures += 1;
            debug!("frame {}: registration failed, constant-velocity fallback", cloud.frame_id);
            let edge = PoseEdge {
                from: prev,
                to: prev + 1,
                measurement: state.last_motion,
                information: Matrix6::identity() * cfg.fallback_information,
                kind: EdgeKind::Odometry,
                low_confidence: true,
            };
            (predicted, edge)
        }
    };
    let node = state.graph.add_node(pose);
    state.graph.add_edge(edge)?;
    state.last_motion = state.pose(prev).inverse().compose(&pose);
    let keyframe = registered.is_some_and(|r| {
        let kf_poses: Vec<RigidTransform> = state.keyframes.iter().map(|&k| state.pose(k)).collect();
        keyframe_decision(r.rmse, r.tau, &pose, &kf_poses, cfg)
    });
    if keyframe {
        state.keyframes.push(node);
        state.keyframes_since_loop += 1;
    }
    Ok(OdometryOutcome { node, target: Some(target), registered, keyframe })
}

/// Frames nearest the latest keyframe, minus those farther than the radius
/// from `node`, merged into the latest keyframe's coordinates. The frame id
/// of the result is that keyframe's node.
pub fn build_local_map<D>(state: &SlamState<D>, node: usize, cfg: &SlamConfig) -> Option<PointCloud> {
    let &kf = state.keyframes.last()?;
    let here = state.pose(node).translation;
    let to_kf = state.pose(kf).inverse();
    let mut members: Vec<usize> = (0..state.frames.len()).filter(|&k| k != node).collect();
    let kf_pos = state.pose(kf).translation;
    members.sort_by(|&a, &b| {
        let da = state.pose(a).translation.distance(kf_pos);
        let db = state.pose(b).translation.distance(kf_pos);
        da.total_cmp(&db).then(b.cmp(&a))
    });
    members.truncate(cfg.localmap_k);
    members.retain(|&k| state.pose(k).translation.distance(here) <= cfg.localmap_radius);
    if members.is_empty() {
        return None;
    }
    let mut map = PointCloud::default();
    for &k in &members {
        let rel = to_kf.compose(&state.pose(k));
        map.extend(&rel.apply(&state.frames[k].cloud.valid_only()));
    }
    map.labels = None;
    map.frame_id = state.frames[kf].frame_id;
    Some(map)
}

/// Registers the frame against its local map and adds a local-map edge
/// from the latest keyframe. Returns whether an edge was added.
pub fn local_map_step<R: Registrar>(
    state: &mut SlamState<R::Desc>,
    node: usize,
    registrar: &R,
    cfg: &SlamConfig,
) -> Result<bool> {
    let Some(&kf) = state.keyframes.last() else { return Ok(false) };
    if kf == node {
        return Ok(false);
    }
    let Some(map) = build_local_map(state, node, cfg) else { return Ok(false) };
    let Ok(map_desc) = registrar.describe(&map) else { return Ok(false) };
    let Ok(r) = registrar.register(&state.frames[node].desc, &map_desc) else { return Ok(false) };
    if !(r.rmse < cfg.rmse_max) {
        return Ok(false);
    }
    state.graph.add_edge(PoseEdge {
        from: kf,
        to: node,
        measurement: r.transform,
        information: information(r.pairs, 1.0),
        kind: EdgeKind::LocalMap,
        low_confidence: false,
    })?;
    Ok(true)
}

/// Loop-closure candidates of `node`: keyframes within the candidate
/// radius, not recent, and not a near-identity relative motion.
pub fn loop_candidates<D>(state: &SlamState<D>, node: usize, cfg: &SlamConfig) -> Vec<usize> {
    let pose = state.pose(node);
    state
        .keyframes
        .iter()
        .copied()
        .filter(|&k| k != node && k + cfg.loop_exclude_recent < node)
        .filter(|&k| state.pose(k).translation.distance(pose.translation) < cfg.loop_candidate_radius)
        .filter(|&k| {
            let rel = state.pose(k).inverse().compose(&pose);
            rel.translation.norm() >= cfg.loop_min_motion || rel.rotation.angle().to_degrees() >= cfg.loop_min_rotation_deg
        })
        .collect()
}

/// Scores candidates, registers the top `k` and appends loop edges. Runs
/// only once `loop_trigger_count` keyframes have been inserted since the
/// previous detection; returns the new edges.
pub fn loop_detect<R: Registrar>(
    state: &mut SlamState<R::Desc>,
    node: usize,
    registrar: &R,
    cfg: &SlamConfig,
) -> Result<Vec<PoseEdge>> {
    if state.keyframes_since_loop < cfg.loop_trigger_count {
        return Ok(Vec::new());
    }
    state.keyframes_since_loop = 0;
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for k in loop_candidates(state, node, cfg) {
        if let Ok(p) = registrar.loop_probability(&state.frames[node].desc, &state.frames[k].desc) {
            scored.push((k, p));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(cfg.loop_top_k);
    let mut added = Vec::new();
    for (k, _) in scored {
        let Ok(r) = registrar.register(&state.frames[node].desc, &state.frames[k].desc) else { continue };
        if !(r.rmse < cfg.rmse_max && r.tau > cfg.tau_min) {
            continue;
        }
        let edge = PoseEdge {
            from: k,
            to: node,
            measurement: r.transform,
            information: information(r.pairs, 2.0),
            kind: EdgeKind::Loop,
            low_confidence: false,
        };
        state.graph.add_edge(edge.clone())?;
        added.push(edge);
    }
    Ok(added)
}

fn optimize<D>(state: &mut SlamState<D>, cfg: &SlamConfig) {
    let (graph, report) = pose_graph_optimize(&state.graph, &cfg.optimizer);
    debug!(
        "pose graph: cost {:.3e} -> {:.3e} in {} iterations",
        report.initial_cost, report.final_cost, report.iterations
    );
    state.graph = graph;
    state.graph.poses[0] = RigidTransform::IDENTITY;
    if let Some(last) = state.graph.poses.len().checked_sub(2) {
        state.last_motion = state.pose(last).inverse().compose(&state.pose(last + 1));
    }
}

#[derive(Debug, Clone)]
pub struct SlamOutput {
    pub trajectory: Vec<RigidTransform>,
    pub graph: PoseGraph,
    pub keyframes: Vec<usize>,
    /// Keyframe descriptors in world coordinates, tagged with frame ids.
    pub descriptor_map: Vec<DescriptorSet>,
    pub loop_edges: usize,
    pub failures: usize,
}

/// Runs odometry, local-map registration and loop closure over the
/// sequence, optimizing after each batch of loop edges and once at the end.
pub fn run_slam<R: Registrar>(seq: &SequenceSource, registrar: &R, cfg: &SlamConfig) -> Result<SlamOutput> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let mut state: SlamState<R::Desc> = SlamState::default();
    let mut loop_edges = 0;
    for (i, frame) in seq.frames.iter().enumerate() {
        let mut frame = frame.clone();
        frame.frame_id = i;
        let step = odometry_step(&mut state, &frame, registrar, cfg)?;
        if cfg.enable_local_map && step.node > 0 {
            local_map_step(&mut state, step.node, registrar, cfg)?;
        }
        if cfg.enable_loop_closure && step.keyframe {
            let added = loop_detect(&mut state, step.node, registrar, cfg)?;
            if !added.is_empty() {
                loop_edges += added.len();
                optimize(&mut state, cfg);
            }
        }
    }
    optimize(&mut state, cfg);
    info!(
        "slam: {} frames, {} keyframes, {} loop edges, {} registration failures",
        seq.len(),
        state.keyframes.len(),
        loop_edges,
        state.failures
    );
    let descriptor_map = state
        .keyframes
        .iter()
        .filter_map(|&k| {
            registrar.map_descriptors(&state.frames[k].desc).map(|mut d| {
                let pose = state.pose(k);
                d.coords.iter_mut().for_each(|p| *p = pose.apply_point(*p));
                d.source_frame = state.frames[k].frame_id;
                d
            })
        })
        .collect();
    Ok(SlamOutput {
        trajectory: state.graph.poses.clone(),
        graph: state.graph,
        keyframes: state.keyframes,
        descriptor_map,
        loop_edges,
        failures: state.failures,
    })
}
