//! Compression toolkit for a miniature two-scale detector: group-lasso soft
//! sparsity on the neck, learnable channel-scale pruning on the head, and
//! schedule-weighted knowledge distillation to recover accuracy, with the
//! full evaluation battery (mAP, confusion, GFLOPs, FPS) used to judge it.

pub mod error;
pub mod ops;
pub mod tape;
pub mod model;
pub mod tensor;

pub use error::{GsaError, Result};
pub use tensor::Tensor;
