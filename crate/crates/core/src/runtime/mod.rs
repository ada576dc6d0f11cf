//! Decoder (pre-norm, GPT-2 style) and encoder (post-norm, BERT style)
//! layers, the two-phase generation loop, and the baseline reference path.
//!
//! Generation pads an uneven batch on the left to its longest prompt,
//! ingests the whole padded prompt in one pass per layer, then decodes one
//! token per step against the K/V cache. Because padding sits on the left,
//! every sequence appends at the same cache position.

pub mod reference;
mod weights;

use serde::Serialize;

pub use weights::{LayerWeights, Model, ModelShape, BLOB_MAGIC, BLOB_VERSION};

use crate::attention::{attend, MaskKind, ScoreLayout};
use crate::batch::{make_batch, BatchDescriptor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::folding::FoldingPlan;
use crate::kernels::{self, argmax};
use crate::memory::{
    preallocate_caches, tags, ActivationCaches, BufferPool, KvCache, KvPart, MemoryBreakdown,
    Scope,
};
use crate::tensor::Tensor;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Every prompt position in one pass.
    PromptParallel,
    /// One new position per sequence, attending over the cache.
    Incremental,
}

/// Work counters: how many passes over the layer stack each phase made.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PassCounters {
    pub prompt_passes: usize,
    pub incremental_passes: usize,
    pub layer_invocations: usize,
}

/// Greedy generation of `steps` tokens for each prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub prompts: Vec<Vec<TokenId>>,
    pub steps: usize,
}

impl GenerationRequest {
    pub fn new(prompts: Vec<Vec<TokenId>>, steps: usize) -> Self {
        Self { prompts, steps }
    }

    /// Checks the request against runtime capacities and returns the padded
    /// batch layout.
    pub fn validate(&self, cfg: &ModelConfig, vocab: usize) -> Result<BatchDescriptor> {
        if self.prompts.len() > cfg.batch_size {
            return Err(Error::Request(format!(
                "{} prompts exceed batch capacity {}",
                self.prompts.len(),
                cfg.batch_size
            )));
        }
        let lengths: Vec<usize> = self.prompts.iter().map(Vec::len).collect();
        let desc = make_batch(&lengths, None)?;
        if desc.seq_len() > cfg.max_prompt {
            return Err(Error::Request(format!(
                "prompt length {} exceeds max prompt {}",
                desc.seq_len(),
                cfg.max_prompt
            )));
        }
        if desc.seq_len() + self.steps > cfg.max_sequence {
            return Err(Error::Request(format!(
                "prompt {} + steps {} exceeds max sequence {}",
                desc.seq_len(),
                self.steps,
                cfg.max_sequence
            )));
        }
        if let Some(&t) = self.prompts.iter().flatten().find(|&&t| t as usize >= vocab) {
            return Err(Error::Request(format!("token {t} outside vocabulary of {vocab}")));
        }
        Ok(desc)
    }

    /// Token at padded position `pos` of sequence `b`; padding reads as 0.
    pub(crate) fn padded_token(&self, desc: &BatchDescriptor, b: usize, pos: usize) -> TokenId {
        let pad = desc.pad(b);
        if pos < pad {
            0
        } else {
            self.prompts[b][pos - pad]
        }
    }
}

/// Position id of padded position `pos`: real tokens count from 0 after
/// the padding, so padding never shifts a sequence's positions.
pub(crate) fn position_id(desc: &BatchDescriptor, b: usize, pos: usize) -> usize {
    pos.saturating_sub(desc.pad(b))
}

pub(crate) fn embed_row(model: &Model, row: &mut [f32], token: TokenId, position: usize) {
    let h = row.len();
    let tok = &model.token_embedding.data()[token as usize * h..][..h];
    let pos = &model.position_embedding.data()[position * h..][..h];
    for ((r, t), p) in row.iter_mut().zip(tok).zip(pos) {
        *r = t + p;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// `[batch][steps]`
    pub tokens: Vec<Vec<TokenId>>,
    /// Per generated step, `[batch, vocab]`; empty unless requested.
    pub logits: Vec<Tensor>,
    pub counters: PassCounters,
}

/// Scratch sizes of one layer pass.
#[derive(Debug, Clone, Copy)]
struct LayerScratch {
    query: usize,
    scores: usize,
    ffn: usize,
}

impl LayerScratch {
    fn new(batch: usize, step_len: usize, kv_len: usize, hidden: usize, heads: usize) -> Self {
        Self {
            query: batch * step_len * hidden,
            scores: batch * heads * step_len * kv_len,
            ffn: batch * step_len * 4 * hidden,
        }
    }

    /// Issues this layer's request/release sequence without computing.
    fn replay(&self, pool: &mut BufferPool) -> Result<()> {
        let q = pool.request(self.query, Scope::WithinModule, tags::QUERY)?;
        let s = pool.request(self.scores, Scope::AcrossModule, tags::SCORES)?;
        pool.release(s)?;
        pool.release(q)?;
        let f = pool.request(self.ffn, Scope::AcrossModule, tags::FFN_INNER)?;
        pool.release(f)
    }
}

/// Replays the buffer traffic of a full generation on `pool` without
/// running any arithmetic. With a virtual pool this accounts for
/// configurations far too large to execute.
pub fn simulate_generation(
    cfg: &ModelConfig,
    vocab: usize,
    prompt_len: usize,
    steps: usize,
    pool: &mut BufferPool,
) -> Result<()> {
    cfg.validate()?;
    let (b, h, n) = (cfg.batch_size, cfg.hidden_size, cfg.head_count);
    if prompt_len == 0 || prompt_len > cfg.max_prompt || prompt_len + steps > cfg.max_sequence {
        return Err(Error::Request(format!(
            "prompt {prompt_len} with {steps} steps does not fit the config"
        )));
    }
    let logits = |pool: &mut BufferPool| -> Result<()> {
        let l = pool.request(b * vocab, Scope::AcrossModule, tags::LOGITS)?;
        pool.release(l)
    };
    for _ in 0..cfg.layer_count {
        LayerScratch::new(b, prompt_len, prompt_len, h, n).replay(pool)?;
    }
    if steps > 0 {
        logits(pool)?;
    }
    for step in 1..steps {
        let kv_len = prompt_len + step;
        for _ in 0..cfg.layer_count {
            LayerScratch::new(b, 1, kv_len, h, n).replay(pool)?;
        }
        logits(pool)?;
    }
    Ok(())
}

/// A runtime instance: preallocated caches, a scratch pool and counters.
/// One generation runs at a time per instance.
#[derive(Debug)]
pub struct Engine {
    cfg: ModelConfig,
    hidden_plan: FoldingPlan,
    kv: KvCache,
    activations: ActivationCaches,
    pool: BufferPool,
    counters: PassCounters,
}

impl Engine {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pool = BufferPool::new();
        let (kv, activations) = preallocate_caches(&cfg, pool.log_mut())?;
        Ok(Self {
            hidden_plan: FoldingPlan::for_hidden(cfg.hidden_size)?,
            cfg,
            kv,
            activations,
            pool,
            counters: PassCounters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn kv_cache(&self) -> &KvCache {
        &self.kv
    }

    pub fn activations(&self) -> &ActivationCaches {
        &self.activations
    }

    pub fn pool(&self) -> &BufferPool {
        &self.pool
    }

    pub fn counters(&self) -> PassCounters {
        self.counters
    }

    pub fn hidden_plan(&self) -> &FoldingPlan {
        &self.hidden_plan
    }

    /// Empties the caches and zeroes the counters. Pool buffers stay.
    pub fn reset(&mut self) {
        self.kv.reset();
        self.counters = PassCounters::default();
    }

    /// Bytes held right now, by category.
    pub fn memory_ledger(&self, model: &Model) -> MemoryBreakdown {
        MemoryBreakdown::from_elements(
            model.parameter_count(),
            self.kv.element_count(),
            self.activations.element_count(),
            self.pool.total_capacity(),
        )
    }

    fn check_batch(&self, desc: &BatchDescriptor, step_len: usize) -> Result<()> {
        if desc.batch() > self.cfg.batch_size {
            return Err(Error::Shape(format!(
                "batch {} exceeds capacity {}",
                desc.batch(),
                self.cfg.batch_size
            )));
        }
        if desc.seq_len() > self.cfg.max_prompt || step_len > self.cfg.max_prompt {
            return Err(Error::Shape(format!(
                "{} positions exceed max prompt {}",
                desc.seq_len().max(step_len),
                self.cfg.max_prompt
            )));
        }
        Ok(())
    }

    fn load_stream(&mut self, x: &Tensor, desc: &BatchDescriptor, w: &LayerWeights) -> Result<usize> {
        if x.rank() != 3 {
            return Err(Error::Shape(format!("x must be [batch, len, hidden], got {:?}", x.shape())));
        }
        let step_len = x.dim(1);
        x.expect_shape(&[desc.batch(), step_len, self.cfg.hidden_size], "x")?;
        w.validate(self.cfg.hidden_size)?;
        self.check_batch(desc, step_len)?;
        self.activations.stream[..x.len()].copy_from_slice(x.data());
        Ok(step_len)
    }

    /// One decoder layer over `x` (`[batch, step_len, hidden]`).
    ///
    /// In the prompt phase `step_len` must equal the padded prompt length and
    /// the layer's cache must be empty; in the incremental phase `step_len`
    /// is 1 and the prompt must already be cached.
    pub fn decoder_layer_forward(
        &mut self,
        x: &Tensor,
        w: &LayerWeights,
        layer: usize,
        desc: &BatchDescriptor,
        phase: Phase,
    ) -> Result<Tensor> {
        let step_len = self.load_stream(x, desc, w)?;
        self.decoder_step(w, layer, desc, phase, step_len)?;
        Tensor::new(x.shape().to_vec(), self.activations.stream[..x.len()].to_vec())
    }

    /// One bidirectional encoder layer over `x` (`[batch, seq_len, hidden]`).
    ///
    /// The layer's K/V cache slot serves as scratch for keys and values, so
    /// it must not hold decoder state.
    pub fn encoder_layer_forward(
        &mut self,
        x: &Tensor,
        w: &LayerWeights,
        layer: usize,
        desc: &BatchDescriptor,
    ) -> Result<Tensor> {
        let step_len = self.load_stream(x, desc, w)?;
        if step_len != desc.seq_len() {
            return Err(Error::Shape(format!(
                "encoder input has {step_len} positions, batch has {}",
                desc.seq_len()
            )));
        }
        self.encoder_step(w, layer, desc)?;
        Tensor::new(x.shape().to_vec(), self.activations.stream[..x.len()].to_vec())
    }

    fn decoder_step(
        &mut self,
        w: &LayerWeights,
        layer: usize,
        desc: &BatchDescriptor,
        phase: Phase,
        step_len: usize,
    ) -> Result<()> {
        let (h, heads) = (self.cfg.hidden_size, self.cfg.head_count);
        let batch = desc.batch();
        self.check_batch(desc, step_len)?;
        let filled = self.kv.uniform_fill(layer, batch)?;
        match phase {
            Phase::PromptParallel if filled != 0 || step_len != desc.seq_len() => {
                return Err(Error::Phase(format!(
                    "prompt pass needs an empty cache and {} positions (cache {filled}, got {step_len})",
                    desc.seq_len()
                )));
            }
            Phase::Incremental if filled < desc.seq_len() || step_len != 1 => {
                return Err(Error::Phase(format!(
                    "incremental step needs the prompt cached and one position (cache {filled}, got {step_len})"
                )));
            }
            _ => {}
        }
        let kv_len = filled + step_len;
        if kv_len > self.kv.max_seq() {
            return Err(Error::CacheOverflow {
                needed: kv_len,
                capacity: self.kv.max_seq(),
            });
        }
        let scratch = LayerScratch::new(batch, step_len, kv_len, h, heads);
        let n = batch * step_len * h;
        let plan = self.hidden_plan;
        let x = &mut self.activations.stream[..n];
        let a = &mut self.activations.attention[..n];
        let pool = &mut self.pool;
        let kv = &mut self.kv;

        // attention
        kernels::layer_norm(x, a, w.ln1_gamma.data(), w.ln1_beta.data(), &plan);
        let mut q = pool.request(scratch.query, Scope::WithinModule, tags::QUERY)?;
        kernels::matmul(a, w.wk.data(), q.as_mut_slice(), h, h);
        kv.write(layer, KvPart::Keys, q.as_slice(), batch, filled, step_len)?;
        kernels::matmul(a, w.wv.data(), q.as_mut_slice(), h, h);
        kv.write(layer, KvPart::Values, q.as_slice(), batch, filled, step_len)?;
        kernels::matmul(a, w.wq.data(), q.as_mut_slice(), h, h);

        let mut scores = pool.request(scratch.scores, Scope::AcrossModule, tags::SCORES)?;
        let layout = ScoreLayout {
            heads,
            q_len: step_len,
            kv_len,
            q_offset: filled,
        };
        attend(
            q.as_slice(),
            kv.view(layer, KvPart::Keys),
            kv.view(layer, KvPart::Values),
            &layout,
            desc,
            MaskKind::Causal,
            &plan,
            scores.as_mut_slice(),
            a,
        )?;
        pool.release(scores)?;
        pool.release(q)?;
        kernels::matmul_acc(a, w.wo.data(), x, h, h);
        kv.advance(layer, batch, step_len)?;

        // feed-forward
        kernels::layer_norm(x, a, w.ln2_gamma.data(), w.ln2_beta.data(), &plan);
        let mut inner = pool.request(scratch.ffn, Scope::AcrossModule, tags::FFN_INNER)?;
        kernels::matmul(a, w.w1.data(), inner.as_mut_slice(), h, 4 * h);
        kernels::gelu_inplace(inner.as_mut_slice(), &plan);
        kernels::matmul_acc(inner.as_slice(), w.w2.data(), x, 4 * h, h);
        pool.release(inner)?;

        self.counters.layer_invocations += 1;
        Ok(())
    }

    fn encoder_step(&mut self, w: &LayerWeights, layer: usize, desc: &BatchDescriptor) -> Result<()> {
        let (h, heads) = (self.cfg.hidden_size, self.cfg.head_count);
        let (batch, seq) = (desc.batch(), desc.seq_len());
        self.check_batch(desc, seq)?;
        if self.kv.uniform_fill(layer, batch)? != 0 {
            return Err(Error::Phase(format!("layer {layer} cache holds decoder state")));
        }
        let scratch = LayerScratch::new(batch, seq, seq, h, heads);
        let n = batch * seq * h;
        let plan = self.hidden_plan;
        let x = &mut self.activations.stream[..n];
        let a = &mut self.activations.attention[..n];
        let pool = &mut self.pool;
        let kv = &mut self.kv;

        let mut q = pool.request(scratch.query, Scope::WithinModule, tags::QUERY)?;
        kernels::matmul(x, w.wk.data(), q.as_mut_slice(), h, h);
        kv.write(layer, KvPart::Keys, q.as_slice(), batch, 0, seq)?;
        kernels::matmul(x, w.wv.data(), q.as_mut_slice(), h, h);
        kv.write(layer, KvPart::Values, q.as_slice(), batch, 0, seq)?;
        kernels::matmul(x, w.wq.data(), q.as_mut_slice(), h, h);

        let mut scores = pool.request(scratch.scores, Scope::AcrossModule, tags::SCORES)?;
        let layout = ScoreLayout {
            heads,
            q_len: seq,
            kv_len: seq,
            q_offset: 0,
        };
        attend(
            q.as_slice(),
            kv.view(layer, KvPart::Keys),
            kv.view(layer, KvPart::Values),
            &layout,
            desc,
            MaskKind::Padding,
            &plan,
            scores.as_mut_slice(),
            a,
        )?;
        pool.release(scores)?;
        pool.release(q)?;
        kernels::matmul_acc(a, w.wo.data(), x, h, h);
        kernels::layer_norm_inplace(x, w.ln1_gamma.data(), w.ln1_beta.data(), &plan);

        let mut inner = pool.request(scratch.ffn, Scope::AcrossModule, tags::FFN_INNER)?;
        kernels::matmul(x, w.w1.data(), inner.as_mut_slice(), h, 4 * h);
        kernels::gelu_inplace(inner.as_mut_slice(), &plan);
        kernels::matmul_acc(inner.as_slice(), w.w2.data(), x, 4 * h, h);
        pool.release(inner)?;
        kernels::layer_norm_inplace(x, w.ln2_gamma.data(), w.ln2_beta.data(), &plan);

        self.counters.layer_invocations += 1;
        Ok(())
    }

    /// Greedy generation: one prompt pass, then `req.steps - 1` incremental
    /// steps (the last generated token is never fed back).
    pub fn generate(&mut self, model: &Model, req: &GenerationRequest) -> Result<Generation> {
        self.run_generation(model, req, false)
    }

    /// As [`generate`](Self::generate), also returning every step's logits.
    pub fn generate_with_logits(&mut self, model: &Model, req: &GenerationRequest) -> Result<Generation> {
        self.run_generation(model, req, true)
    }

    fn run_generation(&mut self, model: &Model, req: &GenerationRequest, record: bool) -> Result<Generation> {
        model.check_config(&self.cfg)?;
        let desc = req.validate(&self.cfg, model.vocab())?;
        self.reset();
        let (batch, seq, h) = (desc.batch(), desc.seq_len(), self.cfg.hidden_size);

        for b in 0..batch {
            for t in 0..seq {
                let row = &mut self.activations.stream[(b * seq + t) * h..][..h];
                embed_row(model, row, req.padded_token(&desc, b, t), position_id(&desc, b, t));
            }
        }
        for (layer, w) in model.layers.iter().enumerate() {
            self.decoder_step(w, layer, &desc, Phase::PromptParallel, seq)?;
        }
        self.counters.prompt_passes += 1;

        let mut tokens = vec![Vec::with_capacity(req.steps); batch];
        let mut logits = Vec::new();
        if req.steps == 0 {
            return Ok(Generation {
                tokens,
                logits,
                counters: self.counters,
            });
        }
        let mut next = self.emit(model, batch, seq, record.then_some(&mut logits))?;
        for step in 1..=req.steps {
            for (seq_tokens, &t) in tokens.iter_mut().zip(&next) {
                seq_tokens.push(t);
            }
            if step == req.steps {
                break;
            }
            let position = seq + step - 1;
            for (b, &t) in next.iter().enumerate() {
                let row = &mut self.activations.stream[b * h..][..h];
                embed_row(model, row, t, position_id(&desc, b, position));
            }
            for (layer, w) in model.layers.iter().enumerate() {
                self.decoder_step(w, layer, &desc, Phase::Incremental, 1)?;
            }
            self.counters.incremental_passes += 1;
            next = self.emit(model, batch, 1, record.then_some(&mut logits))?;
        }
        Ok(Generation {
            tokens,
            logits,
            counters: self.counters,
        })
    }

    /// Final norm and tied output head on the last position of each sequence.
    fn emit(
        &mut self,
        model: &Model,
        batch: usize,
        step_len: usize,
        record: Option<&mut Vec<Tensor>>,
    ) -> Result<Vec<TokenId>> {
        let (h, vocab) = (self.cfg.hidden_size, model.vocab());
        for b in 0..batch {
            let src = (b * step_len + step_len - 1) * h;
            self.activations.attention[b * h..(b + 1) * h]
                .copy_from_slice(&self.activations.stream[src..src + h]);
        }
        let a = &mut self.activations.attention[..batch * h];
        kernels::layer_norm_inplace(a, model.final_gamma.data(), model.final_beta.data(), &self.hidden_plan);
        let mut logits = self.pool.request(batch * vocab, Scope::AcrossModule, tags::LOGITS)?;
        kernels::matmul_transposed(a, model.token_embedding.data(), logits.as_mut_slice(), h);
        let next = logits
            .as_slice()
            .chunks_exact(vocab)
            .map(|row| argmax(row) as TokenId)
            .collect();
        if let Some(out) = record {
            out.push(Tensor::new(vec![batch, vocab], logits.as_slice().to_vec())?);
        }
        self.pool.release(logits)?;
        Ok(next)
    }
}

/// Runs one generation on a fresh [`Engine`].
pub fn generate(model: &Model, req: &GenerationRequest, cfg: &ModelConfig) -> Result<Generation> {
    Engine::new(cfg.clone())?.generate(model, req)
}
