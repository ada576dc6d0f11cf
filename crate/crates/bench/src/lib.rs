//! Benchmark harness: seeded fake workloads, fused vs reference timing,
//! work counters and memory breakdowns.

pub mod report;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use maskfold_core::memory::{activation_elements, buffer_bound, kv_cache_elements, MemoryBreakdown, PoolStats};
use maskfold_core::runtime::reference::reference_generate;
use maskfold_core::runtime::simulate_generation;
use maskfold_core::{BufferPool, Engine, GenerationRequest, Model, ModelConfig, ModelShape, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use report::{Report, RunStats};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error("configuration needs more memory than the host can provide ({0} elements)")]
    HostMemory(usize),
    #[error(transparent)]
    Runtime(maskfold_core::Error),
}

impl From<maskfold_core::Error> for BenchError {
    fn from(e: maskfold_core::Error) -> Self {
        match e {
            maskfold_core::Error::Allocation(n) => BenchError::HostMemory(n),
            maskfold_core::Error::Config(c) => BenchError::InvalidSpec(c.to_string()),
            other => BenchError::Runtime(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fused,
    Reference,
    Both,
}

impl Mode {
    fn runs_fused(self) -> bool {
        self != Mode::Reference
    }

    fn runs_reference(self) -> bool {
        self != Mode::Fused
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Fused => "fused",
            Mode::Reference => "reference",
            Mode::Both => "both",
        })
    }
}

impl FromStr for Mode {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Mode::Fused),
            "reference" => Ok(Mode::Reference),
            "both" => Ok(Mode::Both),
            _ => Err(BenchError::InvalidSpec(format!("unknown mode {s:?}"))),
        }
    }
}

/// Named experiment shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    A,
    B,
    C,
    Custom,
}

impl FromStr for Preset {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "CUSTOM" => Ok(Preset::Custom),
            _ => Err(BenchError::InvalidSpec(format!("unknown config {s:?}"))),
        }
    }
}

pub const DESK_VOCAB: usize = 1024;
/// GPT-2's vocabulary, for realistic weight shares in formula-only reports.
pub const FULL_VOCAB: usize = 50257;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub name: String,
    pub batch: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub prompt: usize,
    pub max_seq: usize,
    pub vocab: usize,
    pub steps: usize,
    /// Target fraction of padding tokens in the prompt batch.
    pub padding_ratio: f64,
    pub mode: Mode,
    pub repetitions: usize,
    pub seed: u64,
}

impl BenchmarkSpec {
    /// Shrunk shapes that run on a workstation CPU.
    pub fn desk(preset: Preset) -> Self {
        let (name, batch, hidden, heads, prompt, max_seq) = match preset {
            Preset::A | Preset::Custom => ("A", 4, 256, 4, 64, 128),
            Preset::B => ("B", 8, 512, 8, 64, 128),
            Preset::C => ("C", 4, 256, 4, 32, 64),
        };
        Self {
            name: if preset == Preset::Custom { "custom" } else { name }.to_string(),
            batch,
            hidden,
            layers: 4,
            heads,
            prompt,
            max_seq,
            vocab: DESK_VOCAB,
            steps: max_seq - prompt,
            padding_ratio: 0.0,
            mode: Mode::Both,
            repetitions: 3,
            seed: 0,
        }
    }

    /// Original experiment sizes; only usable with [`memory_report`].
    pub fn full_size(preset: Preset) -> Self {
        let (name, batch, hidden, heads, prompt) = match preset {
            Preset::A | Preset::Custom => ("A", 4, 1024, 16, 1024),
            Preset::B => ("B", 8, 2048, 32, 1024),
            Preset::C => ("C", 4, 1024, 16, 512),
        };
        Self {
            name: if preset == Preset::Custom { "custom" } else { name }.to_string(),
            batch,
            hidden,
            layers: 24,
            heads,
            prompt,
            max_seq: 1024,
            vocab: FULL_VOCAB,
            steps: 1024 - prompt,
            padding_ratio: 0.0,
            mode: Mode::Fused,
            repetitions: 1,
            seed: 0,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.batch, self.hidden, self.layers, self.heads, self.prompt, self.max_seq)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate().map_err(|e| BenchError::InvalidSpec(e.to_string()))?;
        if !(0.0..1.0).contains(&self.padding_ratio) {
            return Err(BenchError::InvalidSpec(format!(
                "padding ratio {} outside [0, 1)",
                self.padding_ratio
            )));
        }
        if self.repetitions == 0 {
            return Err(BenchError::InvalidSpec("repetitions must be at least 1".into()));
        }
        if self.vocab == 0 || self.vocab > u32::MAX as usize {
            return Err(BenchError::InvalidSpec(format!("vocabulary size {} unusable", self.vocab)));
        }
        if self.prompt + self.steps > self.max_seq {
            return Err(BenchError::InvalidSpec(format!(
                "prompt {} + steps {} exceeds max sequence {}",
                self.prompt, self.steps, self.max_seq
            )));
        }
        Ok(())
    }
}

/// Seeded fake prompts. One sequence spans the full prompt length and the
/// rest are shortened so that padding to the longest covers about
/// `padding_ratio` of the `batch × prompt` slots.
pub fn fake_prompts(spec: &BenchmarkSpec) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (b, p) = (spec.batch, spec.prompt);
    let capacity = (b - 1) * (p - 1);
    let mut budget = ((spec.padding_ratio * (b * p) as f64).round() as usize).min(capacity);
    let full = rng.gen_range(0..b);
    let mut pads = vec![0usize; b];
    while budget > 0 {
        let s = rng.gen_range(0..b);
        if s != full && pads[s] < p - 1 {
            pads[s] += 1;
            budget -= 1;
        }
    }
    pads.iter()
        .map(|&pad| (0..p - pad).map(|_| rng.gen_range(0..spec.vocab as TokenId)).collect())
        .collect()
}

/// Fraction of padded slots once `prompts` are padded to the longest.
pub fn padding_share(prompts: &[Vec<TokenId>]) -> f64 {
    let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
    let slots = longest * prompts.len();
    if slots == 0 {
        return 0.0;
    }
    let pads: usize = prompts.iter().map(|p| longest - p.len()).sum();
    pads as f64 / slots as f64
}

fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    }
}

/// Runs `f` once to warm up, then `reps` timed times.
fn time_runs<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, Vec<f64>)> {
    let mut last = f()?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        last = f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((last, samples))
}

/// Generates the seeded workload, runs the selected paths and collects
/// timings, counters and memory.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<Report> {
    spec.validate()?;
    let cfg = spec.model_config();
    let model = Model::random(ModelShape::for_config(&cfg, spec.vocab), spec.seed)?;
    let prompts = fake_prompts(spec);
    let req = GenerationRequest::new(prompts.clone(), spec.steps);
    let mut report = Report::new(spec, padding_share(&prompts));

    let mut fused_tokens = None;
    if spec.mode.runs_fused() {
        let mut engine = Engine::new(cfg.clone())?;
        let (gen, samples) = time_runs(spec.repetitions, || Ok(engine.generate(&model, &req)?))?;
        report.fused = Some(RunStats::new(samples, gen.counters));
        report.memory = engine.memory_ledger(&model);
        report.pool = Some(engine.pool().stats());
        fused_tokens = Some(gen.tokens);
    } else {
        report.memory = formula_breakdown(spec)?.0;
    }

    if spec.mode.runs_reference() {
        let (run, samples) = time_runs(spec.repetitions, || Ok(reference_generate(&model, &req, &cfg)?))?;
        report.reference = Some(RunStats::new(samples, run.counters));
        if let Some(tokens) = &fused_tokens {
            report.tokens_match = Some(*tokens == run.tokens);
        }
    }
    if let (Some(f), Some(r)) = (&report.fused, &report.reference) {
        report.speedup = Some(r.median_ms / f.median_ms);
    }
    report.finish(buffer_bound(&cfg, spec.prompt)?);
    Ok(report)
}

/// Closed-form cache sizes plus the buffer capacity of a simulated trace.
fn formula_breakdown(spec: &BenchmarkSpec) -> Result<(MemoryBreakdown, PoolStats)> {
    let cfg = spec.model_config();
    let weights = ModelShape::for_config(&cfg, spec.vocab).parameter_count();
    let mut pool = BufferPool::virtual_pool();
    simulate_generation(&cfg, spec.vocab, spec.prompt, spec.steps, &mut pool)?;
    let breakdown = MemoryBreakdown::from_elements(
        weights,
        kv_cache_elements(&cfg)?,
        activation_elements(&cfg)?,
        pool.total_capacity(),
    );
    Ok((breakdown, pool.stats()))
}

/// Memory breakdown from the closed forms and a simulated buffer trace;
/// nothing is allocated, so full-size shapes are fine.
pub fn memory_report(spec: &BenchmarkSpec) -> Result<Report> {
    spec.validate()?;
    let prompts = fake_prompts(spec);
    let mut report = Report::new(spec, padding_share(&prompts));
    report.mode = "memory".into();
    let (memory, stats) = formula_breakdown(spec)?;
    report.memory = memory;
    report.pool = Some(stats);
    report.finish(buffer_bound(&spec.model_config(), spec.prompt)?);
    Ok(report)
}
