//! Minimal dense-array kernel with reverse-mode automatic differentiation.
//!
//! The primitive set is exactly what the vector-field network needs:
//! conv2d, nearest upsample, linear, group_norm, SiLU, self-attention,
//! add, concat, mean and MSE, plus the reshape/matmul/softmax plumbing
//! the attention composite is built from.

pub mod attention;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use attention::{attention_core, self_attention, AttnProj};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Real, Tensor};
