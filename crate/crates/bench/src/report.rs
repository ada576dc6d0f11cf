//! Report records. JSON lines carry the full record; CSV flattens it to
//! one row per run for sweeps. Both follow `SCHEMA_VERSION`.

use std::io::Write;

use maskfold_core::memory::{MemoryBreakdown, PoolStats, BYTES_PER_ELEMENT};
use maskfold_core::runtime::PassCounters;
use serde::Serialize;

use crate::BenchmarkSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    /// Timed repetitions in milliseconds, warm-up excluded.
    pub wall_ms: Vec<f64>,
    pub median_ms: f64,
    pub prompt_passes: usize,
    pub incremental_passes: usize,
    pub layer_invocations: usize,
}

impl RunStats {
    pub fn new(wall_ms: Vec<f64>, counters: PassCounters) -> Self {
        Self {
            median_ms: crate::median(&wall_ms),
            wall_ms,
            prompt_passes: counters.prompt_passes,
            incremental_passes: counters.incremental_passes,
            layer_invocations: counters.layer_invocations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: String,
    pub mode: String,
    pub batch: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub prompt: usize,
    pub max_seq: usize,
    pub vocab: usize,
    pub steps: usize,
    pub seed: u64,
    pub padding_ratio: f64,
    /// Padding share actually produced by the fake prompts.
    pub padding_share: f64,
    pub fused: Option<RunStats>,
    pub reference: Option<RunStats>,
    /// Reference median over fused median.
    pub speedup: Option<f64>,
    pub tokens_match: Option<bool>,
    /// Bytes.
    pub memory: MemoryBreakdown,
    pub memory_total: usize,
    /// Bytes.
    pub buffer_bound: usize,
    pub pool: Option<PoolStats>,
}

impl Report {
    pub(crate) fn new(spec: &BenchmarkSpec, padding_share: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config: spec.name.clone(),
            mode: spec.mode.to_string(),
            batch: spec.batch,
            hidden: spec.hidden,
            layers: spec.layers,
            heads: spec.heads,
            prompt: spec.prompt,
            max_seq: spec.max_seq,
            vocab: spec.vocab,
            steps: spec.steps,
            seed: spec.seed,
            padding_ratio: spec.padding_ratio,
            padding_share,
            fused: None,
            reference: None,
            speedup: None,
            tokens_match: None,
            memory: MemoryBreakdown::default(),
            memory_total: 0,
            buffer_bound: 0,
            pool: None,
        }
    }

    pub(crate) fn finish(&mut self, buffer_bound_elements: usize) {
        self.memory_total = self.memory.total();
        self.buffer_bound = buffer_bound_elements * BYTES_PER_ELEMENT;
    }

    pub fn to_csv_row(&self) -> CsvRow {
        let m = &self.memory;
        CsvRow {
            schema_version: self.schema_version,
            config: self.config.clone(),
            mode: self.mode.clone(),
            batch: self.batch,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            prompt: self.prompt,
            max_seq: self.max_seq,
            vocab: self.vocab,
            steps: self.steps,
            seed: self.seed,
            padding_ratio: self.padding_ratio,
            padding_share: self.padding_share,
            fused_median_ms: self.fused.as_ref().map(|r| r.median_ms),
            reference_median_ms: self.reference.as_ref().map(|r| r.median_ms),
            speedup: self.speedup,
            tokens_match: self.tokens_match,
            fused_prompt_passes: self.fused.as_ref().map(|r| r.prompt_passes),
            fused_layer_invocations: self.fused.as_ref().map(|r| r.layer_invocations),
            reference_prompt_passes: self.reference.as_ref().map(|r| r.prompt_passes),
            reference_layer_invocations: self.reference.as_ref().map(|r| r.layer_invocations),
            weights_bytes: m.weights,
            kv_cache_bytes: m.kv_cache,
            activation_bytes: m.activation,
            buffers_bytes: m.buffers,
            total_bytes: self.memory_total,
            buffer_bound_bytes: self.buffer_bound,
        }
    }
}

/// Flat form of [`Report`] for CSV.
#[derive(Debug, Clone, Serialize)]
pub struct CsvRow {
    pub schema_version: u32,
    pub config: String,
    pub mode: String,
    pub batch: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub prompt: usize,
    pub max_seq: usize,
    pub vocab: usize,
    pub steps: usize,
    pub seed: u64,
    pub padding_ratio: f64,
    pub padding_share: f64,
    pub fused_median_ms: Option<f64>,
    pub reference_median_ms: Option<f64>,
    pub speedup: Option<f64>,
    pub tokens_match: Option<bool>,
    pub fused_prompt_passes: Option<usize>,
    pub fused_layer_invocations: Option<usize>,
    pub reference_prompt_passes: Option<usize>,
    pub reference_layer_invocations: Option<usize>,
    pub weights_bytes: usize,
    pub kv_cache_bytes: usize,
    pub activation_bytes: usize,
    pub buffers_bytes: usize,
    pub total_bytes: usize,
    pub buffer_bound_bytes: usize,
}

pub fn write_json_lines<W: Write>(reports: &[Report], mut out: W) -> std::io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_csv<W: Write>(reports: &[Report], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r.to_csv_row())?;
    }
    w.flush()?;
    Ok(())
}
