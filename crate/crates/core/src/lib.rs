//! Transformer inference runtime.
//!
//! Attention masks are applied by index inside the softmax instead of as
//! tensors, wide rows are folded onto a capped number of lanes, scratch
//! buffers come from a reusing pool, and generation runs the prompt in
//! parallel before decoding incrementally from a preallocated cache.

pub mod attention;
pub mod batch;
pub mod config;
pub mod error;
pub mod folding;
pub mod kernels;
pub mod memory;
pub mod runtime;
pub mod tensor;

pub use attention::{fused_causal_softmax, fused_padding_softmax, mha_forward, AttentionScores, MaskKind};
pub use batch::{make_batch, BatchDescriptor};
pub use config::ModelConfig;
pub use error::{ConfigError, Error, Result};
pub use folding::{plan_folding, FoldingPlan};
pub use memory::{AllocationLog, BufferHandle, BufferPool, Scope};
pub use runtime::{generate, Engine, Generation, GenerationRequest, Model, ModelShape, Phase, TokenId};
pub use tensor::Tensor;
