use dpm_core::encoder::DescriptorSet;
use dpm_core::geometry::{Point3, PointCloud, RigidTransform, UnitQuaternion};
use dpm_core::io::{ape_evaluate, synth_sequence, SequenceSource, SyntheticSceneConfig};
use dpm_core::numerics::Tensor;
use dpm_core::slam::pipeline::{local_map_step, loop_candidates, FrameRecord};
use dpm_core::slam::*;
use dpm_core::{Error, Result};
use nalgebra::Matrix6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_motion(rng: &mut impl Rng, rot: f64, trans: f64) -> RigidTransform {
    let w = Point3::new(rng.random_range(-rot..rot), rng.random_range(-rot..rot), rng.random_range(-rot..rot));
    let t = Point3::new(
        rng.random_range(-trans..trans),
        rng.random_range(-trans..trans),
        rng.random_range(-trans..trans),
    );
    RigidTransform::new(UnitQuaternion::from_rotation_vector(w), t)
}

fn edge(from: usize, to: usize, measurement: RigidTransform, weight: f64, kind: EdgeKind) -> PoseEdge {
    PoseEdge { from, to, measurement, information: Matrix6::identity() * weight, kind, low_confidence: false }
}

fn ring_poses(n: usize, radius: f64) -> Vec<RigidTransform> {
    (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            let q = UnitQuaternion::from_axis_angle(Point3::new(0.0, 0.0, 1.0), a);
            RigidTransform::new(q, Point3::new(radius * a.sin(), radius * (1.0 - a.cos()), 0.0))
        })
        .collect()
}

fn max_pose_error(a: &[RigidTransform], b: &[RigidTransform]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.translation.distance(y.translation) + x.rotation.angle_to(y.rotation))
        .fold(0.0, f64::max)
}

#[test]
fn three_node_chain_is_recovered_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = [RigidTransform::IDENTITY, small_motion(&mut rng, 0.4, 2.0), small_motion(&mut rng, 0.4, 2.0)];
    let mut graph = PoseGraph::default();
    graph.add_node(truth[0]);
    graph.add_node(truth[1].compose(&small_motion(&mut rng, 0.1, 0.3)));
    graph.add_node(truth[2].compose(&small_motion(&mut rng, 0.1, 0.3)));
    for (a, b) in [(0, 1), (1, 2), (0, 2)] {
        graph.add_edge(edge(a, b, truth[a].inverse().compose(&truth[b]), 1.0, EdgeKind::Odometry)).unwrap();
    }
    let (out, report) = pose_graph_optimize(&graph, &OptimizerConfig::default());
    assert!(report.final_cost < report.initial_cost);
    assert_eq!(out.poses[0], RigidTransform::IDENTITY);
    assert!(max_pose_error(&out.poses, &truth) < 1e-9, "{}", max_pose_error(&out.poses, &truth));
}

#[test]
fn optimization_never_increases_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let truth = ring_poses(12, 5.0);
        let mut graph = PoseGraph::default();
        for p in &truth {
            graph.add_node(p.compose(&small_motion(&mut rng, 0.05, 0.2)));
        }
        graph.poses[0] = RigidTransform::IDENTITY;
        for k in 0..12 {
            let z = truth[k].inverse().compose(&truth[(k + 1) % 12]).compose(&small_motion(&mut rng, 0.02, 0.05));
            graph.add_edge(edge(k, (k + 1) % 12, z, 1.0, EdgeKind::Odometry)).unwrap();
        }
        let (out, report) = pose_graph_optimize(&graph, &OptimizerConfig::default());
        assert!(out.cost() <= graph.cost());
        assert!(report.final_cost <= report.initial_cost);
        assert_eq!(out.poses[0], RigidTransform::IDENTITY);
    }
}

/// Ring whose odometry carries a constant bias plus noise, closed by one
/// exact loop edge from the last node back to the first.
fn drifted_ring(seed: u64) -> (PoseGraph, Vec<RigidTransform>) {
    let n = 20;
    let truth = ring_poses(n, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias = RigidTransform::new(
        UnitQuaternion::from_rotation_vector(Point3::new(0.0, 0.0, 0.02)),
        Point3::new(0.05, 0.03, 0.0),
    );
    let mut graph = PoseGraph::default();
    graph.add_node(RigidTransform::IDENTITY);
    for k in 1..n {
        let z = truth[k - 1].inverse().compose(&truth[k]).compose(&bias).compose(&small_motion(&mut rng, 0.005, 0.01));
        let pose = graph.poses[k - 1].compose(&z);
        graph.add_node(pose);
        graph.add_edge(edge(k - 1, k, z, 1.0, EdgeKind::Odometry)).unwrap();
    }
    let z = truth[n - 1].inverse().compose(&truth[0]);
    graph.add_edge(edge(n - 1, 0, z, 2.0, EdgeKind::Loop)).unwrap();
    (graph, truth)
}

#[test]
fn drifted_ring_ape_halves() {
    for seed in 0..5 {
        let (graph, truth) = drifted_ring(seed);
        let before = ape_evaluate(&graph.poses, &truth).unwrap().rmse;
        let (out, _) = pose_graph_optimize(&graph, &OptimizerConfig::default());
        let after = ape_evaluate(&out.poses, &truth).unwrap().rmse;
        assert!(after <= 0.5 * before, "seed {seed}: {before} -> {after}");
    }
}

fn loop_sequence(frames: usize) -> SequenceSource {
    let cfg = SyntheticSceneConfig { frames, azimuth_steps: 60, rings: 8, ..Default::default() };
    synth_sequence(&cfg).unwrap().source
}

#[test]
fn oracle_slam_on_synthetic_loop_is_exact() {
    let seq = loop_sequence(100);
    let poses = seq.poses.clone().unwrap();
    let registrar = OracleRegistrar::new(poses.clone());
    let out = run_slam(&seq, &registrar, &SlamConfig::default()).unwrap();
    assert_eq!(out.trajectory.len(), 100);
    assert_eq!(out.trajectory[0], RigidTransform::IDENTITY);
    assert!(out.loop_edges >= 1, "revisit should close a loop");
    let loops: Vec<&PoseEdge> = out.graph.edges_of(EdgeKind::Loop).collect();
    assert!(loops.iter().any(|e| e.from < 10 && e.to > 80), "{:?}", loops.iter().map(|e| (e.from, e.to)).collect::<Vec<_>>());
    let relative: Vec<RigidTransform> = poses.iter().map(|p| poses[0].inverse().compose(p)).collect();
    let ape = ape_evaluate(&out.trajectory, &relative).unwrap();
    assert!(ape.max < 1e-6, "{}", ape.max);
    for (i, &a) in out.keyframes.iter().enumerate() {
        for &b in &out.keyframes[..i] {
            assert!(relative[a].translation.distance(relative[b].translation) > SlamConfig::default().keyframe_min_dist);
        }
    }
}

#[test]
fn single_frame_gives_identity_and_runs_are_deterministic() {
    let seq = loop_sequence(1);
    let out = run_slam(&seq, &OracleRegistrar::new(seq.poses.clone().unwrap()), &SlamConfig::default()).unwrap();
    assert_eq!(out.trajectory, vec![RigidTransform::IDENTITY]);

    let seq = loop_sequence(30);
    let registrar = OracleRegistrar::new(seq.poses.clone().unwrap());
    let a = run_slam(&seq, &registrar, &SlamConfig::default()).unwrap();
    let b = run_slam(&seq, &registrar, &SlamConfig::default()).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
}

#[test]
fn odometry_edges_reproduce_the_trajectory_before_optimization() {
    let seq = loop_sequence(25);
    let registrar = OracleRegistrar::new(seq.poses.clone().unwrap());
    let mut state = SlamState::default();
    let cfg = SlamConfig::default();
    for (i, f) in seq.frames.iter().enumerate() {
        odometry_step(&mut state, &f.clone().with_frame_id(i), &registrar, &cfg).unwrap();
    }
    for e in state.graph.edges_of(EdgeKind::Odometry) {
        let chained = state.graph.poses[e.from].compose(&e.measurement);
        assert!(max_pose_error(&[chained], &[state.graph.poses[e.to]]) < 1e-12);
    }
}

#[test]
fn keyframe_gates_are_strict() {
    let cfg = SlamConfig::default();
    let here = RigidTransform::from_translation(Point3::new(5.0, 0.0, 0.0));
    let far = [RigidTransform::IDENTITY];
    assert!(keyframe_decision(0.1, 0.5, &here, &far, &cfg));
    assert!(!keyframe_decision(0.5, 0.5, &here, &far, &cfg));
    assert!(!keyframe_decision(0.1, 0.1, &here, &far, &cfg));
    let at_limit = [RigidTransform::from_translation(Point3::new(3.0, 0.0, 0.0))];
    assert!(!keyframe_decision(0.1, 0.5, &here, &at_limit, &cfg));
}

/// Registrar that fails on chosen frames and is exact otherwise.
struct Flaky {
    inner: OracleRegistrar,
    fail: Vec<usize>,
}

impl Registrar for Flaky {
    type Desc = usize;
    fn describe(&self, cloud: &PointCloud) -> Result<usize> {
        self.inner.describe(cloud)
    }
    fn register(&self, src: &usize, dst: &usize) -> Result<PairResult> {
        if self.fail.contains(src) {
            return Err(Error::NoCorrespondences);
        }
        self.inner.register(src, dst)
    }
    fn loop_probability(&self, a: &usize, b: &usize) -> Result<f64> {
        self.inner.loop_probability(a, b)
    }
}

#[test]
fn failed_registration_falls_back_to_constant_velocity() {
    let seq = loop_sequence(8);
    let registrar = Flaky { inner: OracleRegistrar::new(seq.poses.clone().unwrap()), fail: vec![5] };
    let cfg = SlamConfig { enable_loop_closure: false, enable_local_map: false, ..Default::default() };
    let out = run_slam(&seq, &registrar, &cfg).unwrap();
    assert_eq!(out.failures, 1);
    let fallback: Vec<&PoseEdge> = out.graph.edges.iter().filter(|e| e.low_confidence).collect();
    assert_eq!(fallback.len(), 1);
    assert_eq!((fallback[0].from, fallback[0].to), (4, 5));
    assert_eq!(out.trajectory.len(), 8);
}

fn corridor_state(n: usize, spacing: f64) -> SlamState<usize> {
    let mut state = SlamState::default();
    for k in 0..n {
        let pose = RigidTransform::from_translation(Point3::new(spacing * k as f64, 0.0, 0.0));
        let points = (0..=k).map(|j| Point3::new(j as f64, 1.0, 0.0)).collect();
        state.frames.push(FrameRecord { frame_id: k, cloud: PointCloud::new(points).with_frame_id(k), desc: k });
        state.graph.add_node(pose);
    }
    state.keyframes.push(0);
    state
}

#[test]
fn local_map_bookkeeping() {
    let cfg = SlamConfig::default();
    let state = corridor_state(5, 1.0);
    let map = build_local_map(&state, 4, &cfg).unwrap();
    // Frames 0..=3 survive; frame k holds k + 1 points.
    assert_eq!(map.len(), 1 + 2 + 3 + 4);
    assert_eq!(map.frame_id, 0);
    assert_eq!(map.points[1], Point3::new(1.0, 1.0, 0.0) + Point3::new(1.0, 0.0, 0.0) - Point3::new(1.0, 0.0, 0.0));

    let state = corridor_state(2, 1.0);
    let map = build_local_map(&state, 1, &cfg).unwrap();
    assert_eq!(map.len(), 1);

    let far = corridor_state(2, 100.0);
    assert!(build_local_map(&far, 1, &cfg).is_none());
    let mut far = far;
    let registrar = OracleRegistrar::new(vec![RigidTransform::IDENTITY; 2]);
    far.keyframes = vec![0];
    assert!(!local_map_step(&mut far, 1, &registrar, &cfg).unwrap());
}

#[test]
fn loop_detection_respects_trigger_radius_and_motion() {
    let cfg = SlamConfig { loop_exclude_recent: 0, ..Default::default() };
    let poses: Vec<RigidTransform> =
        [0.0, 3.0, 6.0, 40.0, 0.5].iter().map(|&x| RigidTransform::from_translation(Point3::new(x, 0.0, 0.0))).collect();
    let mut state: SlamState<usize> = SlamState::default();
    for (k, p) in poses.iter().enumerate() {
        state.frames.push(FrameRecord { frame_id: k, cloud: PointCloud::default(), desc: k });
        state.graph.add_node(*p);
    }
    state.keyframes = vec![0, 1, 2, 3, 4];
    // Keyframe 0 is within 1 m of node 4 and keyframe 3 is out of range.
    assert_eq!(loop_candidates(&state, 4, &cfg), vec![1, 2]);

    let registrar = OracleRegistrar::new(poses);
    state.keyframes_since_loop = 2;
    assert!(loop_detect(&mut state, 4, &registrar, &cfg).unwrap().is_empty());
    assert_eq!(state.keyframes_since_loop, 2);
    state.keyframes_since_loop = 3;
    let added = loop_detect(&mut state, 4, &registrar, &cfg).unwrap();
    let pairs: Vec<(usize, usize)> = added.iter().map(|e| (e.from, e.to)).collect();
    assert_eq!(pairs, vec![(1, 4), (2, 4)]);
    assert_eq!(added[0].information, Matrix6::identity() * 128.0);
    assert_eq!(state.keyframes_since_loop, 0);

    let lonely = SlamState::<usize> { keyframes: vec![3], ..state.clone() };
    assert!(loop_candidates(&lonely, 4, &cfg).is_empty());
}

#[test]
fn descriptor_map_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map: Vec<DescriptorSet> = [3usize, 9, 4]
        .iter()
        .zip([2usize, 7, 11])
        .map(|(&m, frame)| DescriptorSet {
            coords: (0..m).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect(),
            feats: Tensor::from_vec(m, 5, (0..m * 5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            source_frame: frame,
            labels: None,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.bin");
    write_descriptor_map(&path, &map).unwrap();
    let back = read_descriptor_map(&path).unwrap();
    assert_eq!(back, map);
}
