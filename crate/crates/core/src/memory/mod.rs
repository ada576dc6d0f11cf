//! Cache preallocation, the scratch buffer pool, and memory accounting.

mod cache;
mod log;
mod pool;

use serde::Serialize;

pub use cache::{preallocate_caches, ActivationCaches, KvCache, KvPart};
pub use log::{AllocationEvent, AllocationLog, Decision, EventKind};
pub use pool::{tags, BufferHandle, BufferPool, PoolStats, Scope};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const BYTES_PER_ELEMENT: usize = std::mem::size_of::<f32>();

fn product(factors: &[usize], what: &'static str) -> Result<usize> {
    factors
        .iter()
        .try_fold(1usize, |acc, &f| acc.checked_mul(f))
        .ok_or(Error::Overflow(what))
}

/// `2 · b · h · s · l`
pub fn kv_cache_elements(cfg: &ModelConfig) -> Result<usize> {
    product(
        &[
            2,
            cfg.batch_size,
            cfg.hidden_size,
            cfg.max_sequence,
            cfg.layer_count,
        ],
        "kv cache size",
    )
}

/// `2 · b · h · p`
pub fn activation_elements(cfg: &ModelConfig) -> Result<usize> {
    product(
        &[2, cfg.batch_size, cfg.hidden_size, cfg.max_prompt],
        "activation cache size",
    )
}

/// Upper bound on pooled scratch for a prompt of `prompt` tokens:
/// `b · p · (6h + heads · p)`.
pub fn buffer_bound(cfg: &ModelConfig, prompt: usize) -> Result<usize> {
    if prompt > cfg.max_prompt {
        return Err(Error::Request(format!(
            "prompt {prompt} exceeds max prompt {}",
            cfg.max_prompt
        )));
    }
    let per_token = cfg
        .hidden_size
        .checked_mul(6)
        .and_then(|six_h| {
            cfg.head_count
                .checked_mul(prompt)
                .and_then(|np| six_h.checked_add(np))
        })
        .ok_or(Error::Overflow("buffer bound"))?;
    product(&[cfg.batch_size, prompt, per_token], "buffer bound")
}

/// Memory split by category, in bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MemoryBreakdown {
    pub weights: usize,
    pub kv_cache: usize,
    pub activation: usize,
    pub buffers: usize,
}

impl MemoryBreakdown {
    pub fn from_elements(weights: usize, kv_cache: usize, activation: usize, buffers: usize) -> Self {
        Self {
            weights: weights * BYTES_PER_ELEMENT,
            kv_cache: kv_cache * BYTES_PER_ELEMENT,
            activation: activation * BYTES_PER_ELEMENT,
            buffers: buffers * BYTES_PER_ELEMENT,
        }
    }

    pub fn total(&self) -> usize {
        self.weights + self.kv_cache + self.activation + self.buffers
    }

    /// Fraction of the total held by each category, in field order.
    pub fn shares(&self) -> [f64; 4] {
        let total = self.total().max(1) as f64;
        [self.weights, self.kv_cache, self.activation, self.buffers].map(|v| v as f64 / total)
    }
}
