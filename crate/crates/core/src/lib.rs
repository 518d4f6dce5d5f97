//! Learned sparse-descriptor registration with a pose-graph SLAM backend.
//!
//! The crate is organized bottom-up: [`geometry`] and [`numerics`] hold the
//! exact primitives and the small autodiff engine; [`encoder`] and
//! [`decoder`] form the descriptor network, assembled in [`model`];
//! [`training`] holds losses, augmentation and the training loops; [`slam`]
//! runs odometry, loop closure and pose-graph optimization; [`io`] covers
//! file formats, synthetic scenes and evaluation.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod numerics;
pub mod slam;
pub mod training;

pub use error::{Error, Result};
