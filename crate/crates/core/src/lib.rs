//! Fully sparse voxel-based 3D object detection and tracking.
//!
//! Point clouds are voxelized into a [`SparseTensor`](sparse::SparseTensor),
//! run through a six-stage sparse CNN with spatial voxel pruning, compressed
//! onto the ground plane, and decoded into boxes straight from the sparse
//! features: sparse max pooling replaces NMS. Detections are linked across
//! frames by center and query-voxel association.

pub mod backbone;
pub mod error;
pub mod head;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod selftest;
pub mod sparse;
pub mod tracker;
pub mod voxelizer;

pub use error::{Error, Result};
