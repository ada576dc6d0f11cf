use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Largest supported hidden size.
pub const MAX_HIDDEN: usize = 16384;
/// Longest supported sequence.
pub const MAX_SEQUENCE: usize = 4096;

/// Architectural and capacity parameters of a runtime instance.
///
/// `batch_size`, `max_prompt` and `max_sequence` are capacities: caches are
/// sized from them once and never grow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub batch_size: usize,
    pub hidden_size: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub max_prompt: usize,
    pub max_sequence: usize,
    /// Informational only; all arithmetic is `f32`.
    pub datatype: String,
}

impl ModelConfig {
    pub fn new(
        batch_size: usize,
        hidden_size: usize,
        layer_count: usize,
        head_count: usize,
        max_prompt: usize,
        max_sequence: usize,
    ) -> Self {
        Self {
            batch_size,
            hidden_size,
            layer_count,
            head_count,
            max_prompt,
            max_sequence,
            datatype: "fp32".to_string(),
        }
    }

    /// A layer count of zero is allowed; it describes an embedding-only model.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (value, name) in [
            (self.batch_size, "batch size"),
            (self.hidden_size, "hidden size"),
            (self.head_count, "head count"),
            (self.max_prompt, "max prompt"),
            (self.max_sequence, "max sequence"),
        ] {
            if value == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if !self.hidden_size.is_multiple_of(self.head_count) {
            return Err(ConfigError::HiddenNotDivisible {
                hidden: self.hidden_size,
                heads: self.head_count,
            });
        }
        if self.hidden_size > MAX_HIDDEN {
            return Err(ConfigError::HiddenTooLarge(self.hidden_size));
        }
        if self.max_sequence > MAX_SEQUENCE {
            return Err(ConfigError::SequenceTooLong(self.max_sequence));
        }
        if self.max_prompt > self.max_sequence {
            return Err(ConfigError::PromptExceedsSequence {
                prompt: self.max_prompt,
                sequence: self.max_sequence,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.head_count
    }
}
