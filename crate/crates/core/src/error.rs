use thiserror::Error;

/// A violated [`ModelConfig`](crate::ModelConfig) invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("hidden not divisible by heads ({hidden} % {heads} != 0)")]
    HiddenNotDivisible { hidden: usize, heads: usize },
    #[error("hidden exceeds 16384 (got {0})")]
    HiddenTooLarge(usize),
    #[error("max sequence exceeds 4096 (got {0})")]
    SequenceTooLong(usize),
    #[error("max prompt {prompt} exceeds max sequence {sequence}")]
    PromptExceedsSequence { prompt: usize, sequence: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("folding: {0}")]
    Folding(String),
    #[error("coordinates (block {sub_block}, lane {lane}) outside a {sub_blocks}x{lanes} plan")]
    PlanCoordinates {
        sub_block: usize,
        lane: usize,
        sub_blocks: usize,
        lanes: usize,
    },
    #[error("plan covers {plan} elements but the operand has {operand}")]
    IncompatiblePlan { plan: usize, operand: usize },
    #[error("cache overflow: {needed} positions requested, capacity {capacity}")]
    CacheOverflow { needed: usize, capacity: usize },
    #[error("buffer handle (slot {slot}, lease {lease}) is not live in this pool")]
    StaleHandle { slot: usize, lease: u64 },
    #[error("allocation of {0} elements failed")]
    Allocation(usize),
    #[error("size overflow computing {0}")]
    Overflow(&'static str),
    #[error("phase: {0}")]
    Phase(String),
    #[error("generation request: {0}")]
    Request(String),
    #[error("weight blob: {0}")]
    Blob(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
