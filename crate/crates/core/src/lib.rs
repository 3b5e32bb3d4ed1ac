//! Conditional-computation CNN engine built around question-gated sparse
//! ResNeXt bottleneck blocks.
//!
//! A gate controller attends over the incoming feature map conditioned on a
//! question vector and emits normalized weights for the `E` parallel paths of
//! a block. Only the top-k paths execute: their channel groups, convolution
//! weights and batch-norm parameters are gathered into contiguous buffers and
//! run as a `k`-group convolution. An analytical FLOPS model mirrors the
//! instrumented operation counter exactly.

pub mod block;
pub mod error;
pub mod flops;
pub mod gate;
pub mod init;
pub mod netconfig;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result, Violation};
pub use tensor::{Element, Tensor};
