//! Minimal dense tensor library with tape-based reverse-mode autodiff,
//! covering exactly the operations the radar detection models need.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod partition;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, CheckInput};
pub use graph::{Activation, EwiseKind, Graph, NormKind, RunningStats, Var};
pub use partition::{
    depth_to_space, grid_partition, grid_reverse, patchify, unpatchify, window_partition, window_reverse,
    PartitionInfo,
};
pub use scalar::Scalar;
pub use tensor::{Init, Tensor};
