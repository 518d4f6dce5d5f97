//! Points, rotations and rigid transforms, plus neighbor search and sampling.

mod knn;
mod sampling;
mod types;

pub use knn::{knn_search, knn_search_exhaustive, KdTree, Neighbor};
pub use sampling::{centroid, farthest_point_sampling, random_sample_pad};
pub use types::{Point3, PointCloud, PointLabel, RigidTransform, UnitQuaternion};
