//! Motion-guided temporal BEV object detection on synthetic LiDAR sequences.
//!
//! The crate implements a small, fully trainable detection pipeline over
//! multi-scan, multi-frame point cloud sequences:
//!
//! - [`tensor`] — dense f64 tensors, a reverse-mode tape, the NN kernels the
//!   pipeline needs (dense/conv/attention/deformable sampling), parameter
//!   storage and Adam.
//! - [`points`] — point/scan/frame/sequence data model, ego-motion
//!   compensation, a synthetic scene generator, sequence-consistent
//!   augmentation, and the on-disk sequence format.
//! - [`voxel`] — temporal (per-scan bucketed) voxelization and the
//!   motion-aware pillar feature encoder.
//! - [`backbone`] — a small two-scale dense BEV conv backbone.
//! - [`mgda`] — motion-guided deformable alignment of past BEV maps.
//! - [`stfa`] — spatio-temporal deformable cross-attention over the aligned
//!   maps with derivative queries.
//! - [`detect`] — center-heatmap detection head, target rendering, losses,
//!   decoding, and average-precision evaluation.
//! - [`model`] — assembly of the above into single-frame and temporal
//!   pipelines.
//! - [`harness`] — dataset generation / training / evaluation / inspection
//!   entry points used by the `mgta` binary.
//!
//! Everything is deterministic: given equal seeds and configs, dataset
//! generation, training and evaluation reproduce bit-identical artifacts.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod detect;
pub mod error;
pub mod harness;
pub mod mgda;
pub mod model;
pub mod stfa;
pub mod points;
pub mod train;
pub mod voxel;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
