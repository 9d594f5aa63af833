//! Differentiable primitives. Each has a plain-tensor entry point and a
//! method on [`Var`](crate::Var) that records its backward rule.

pub mod activation;
pub mod conv;
pub mod layout;
pub mod linalg;
pub mod norm;
pub mod resize;

pub use activation::{activation, softmax, Activation};
pub use conv::conv2d;
pub use layout::{pixel_shuffle, pixel_unshuffle, swap_middle_map, window_merge_map, window_partition_map, IndexMap};
pub use linalg::matmul;
pub use norm::{normalize, BatchNormOutput, NormKind, NormParams, NORM_EPS};
pub use resize::bicubic_upsample;
