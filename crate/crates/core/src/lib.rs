//! Dense multi-path U-Net for multi-modal binary segmentation.
//!
//! The crate trains and evaluates a family of 2D encoder–decoder networks
//! that process each imaging modality in its own encoder path. Paths can be
//! fused early (channel concatenation at the input), late (concatenation at
//! the bridge) or hyper-densely, where every convolutional layer of every
//! path sees the outputs of all previous layers of all paths.
//!
//! Everything runs on the CPU in plain Rust: a small define-by-run autodiff
//! graph ([`graph::Graph`]), an Adam trainer, segmentation metrics and a
//! binary container format for volumes and checkpoints.

pub mod cli;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inception;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
