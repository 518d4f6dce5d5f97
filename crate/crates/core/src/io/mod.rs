//! File formats, synthetic scenes and evaluation.

pub mod config;
pub mod eval;
pub mod formats;
pub mod synth;

pub use config::{PipelineConfig, RegistrationConfig};
pub use eval::{ape_evaluate, memory_report, registration_errors, ApeReport, MemoryReport, PairError};
pub use formats::{
    read_cloud_bin, read_labels, read_pose_matrices, read_poses, read_scan, read_trajectory, write_cloud_bin,
    write_labels, write_pose_matrices, write_poses, write_trajectory, load_sequence, save_sequence, RawScan,
};
pub use synth::{synth_sequence, SequenceSource, SyntheticSceneConfig, SyntheticSequence};
