//! Odometry, keyframes, loop closure, local maps and pose-graph optimization.

pub mod graph;
pub mod map;
pub mod pipeline;
pub mod se3;

pub use graph::{pose_graph_optimize, EdgeKind, OptimizeReport, OptimizerConfig, PoseEdge, PoseGraph};
pub use map::{read_descriptor_map, write_descriptor_map};
pub use pipeline::{
    build_local_map, keyframe_decision, loop_detect, odometry_step, run_slam, LearnedRegistrar, OracleRegistrar,
    PairResult, Registrar, SlamConfig, SlamOutput, SlamState,
};
