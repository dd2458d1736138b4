//! Minimal differentiable compute core.
//!
//! Reverse-mode gradients are implemented per-op with explicit backward
//! functions over a recorded computation graph ([`Graph`]); there is no
//! general autodiff of arbitrary user code. The op set is exactly what the
//! pipeline needs: dense affine/matmul, activations, softmax variants,
//! 2D convolution and bilinear sampling, submanifold sparse 3D convolution,
//! a convolutional GRU cell, and the pipeline's loss functions. Every op's
//! backward is validated against central finite differences.
//!
//! All values are f64. Graphs are define-by-run and single-threaded; the hot
//! forward kernels parallelize internally with order-preserving maps and
//! fixed-chunk reductions, so results do not depend on thread count.

mod checkpoint;
mod conv;
mod dense;
mod graph;
pub mod gradcheck;
mod loss;
mod modules;
mod params;
mod sparse;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::bilinear_value;
pub use dense::{mlp_forward, Activation, LinearLayer};
pub use graph::{BackwardStep, GradStore, Graph, Tensor, TensorId};
pub use loss::log_transform;
pub use modules::{DeformParams, MlpParams, SparseConvParams};
pub use params::{adam_step, AdamConfig, AdamState, ParamBinding, ParamId, ParamSet};
pub use sparse::{gru_fuse, neighbor_table, NeighborTable, SparseConvKernel};
