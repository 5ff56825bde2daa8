//! CPU implementation of the MedNeXt 3D segmentation architecture.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: a dense tensor engine with reverse-mode gradients and
//!   exactly the operators the architecture needs (grouped 3D convolution
//!   and its transpose, group normalization, GELU, trilinear resizing,
//!   elementwise/reduction glue).
//! * [`blocks`]: the standard, downsampling, and upsampling inverted
//!   bottleneck blocks.
//! * [`network`]: the 9-stage encoder-decoder with deep supervision and the
//!   S/B/M/L presets.
//! * [`upkern`]: large-kernel initialization from a small-kernel checkpoint
//!   by trilinear kernel upsampling.
//! * [`analysis`]: closed-form parameter and FLOP accounting.
//! * [`synth`], [`loss`], [`optim`], [`metrics`], [`train`]: the synthetic
//!   training harness.
//! * [`checkpoint`]: the binary checkpoint and volume formats.

// The numeric kernels spell out index loops and `%`-based divisibility so
// the stencil arithmetic stays visible.
#![allow(clippy::needless_range_loop, clippy::manual_is_multiple_of)]

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod upkern;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{CheckpointError, Error, Result};
pub use network::{build_model, model_forward, MedNeXtModel, ModelConfig, Preset};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use upkern::{resample_kernel, upkern_transfer, TransferReport};
pub use tensor::{
    conv3d, conv3d_transposed, group_norm, no_grad, trilinear_resize, Buffer, ConvSpec, DType,
    Gradients, OutputAlignment, Tensor,
};
