//! Baseline generation: plain loops, explicit mask tensors, one position
//! per pass, and fresh allocations for every intermediate.
//!
//! Nothing here shares code with the optimized kernels, so agreement
//! between the two paths is meaningful.

use super::{position_id, GenerationRequest, PassCounters, TokenId};
use crate::attention::reference::build_mask;
use crate::attention::MaskKind;
use crate::batch::BatchDescriptor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::memory::{AllocationLog, EventKind};
use crate::runtime::{LayerWeights, Model};
use crate::tensor::Tensor;

const EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct ReferenceRun {
    pub tokens: Vec<Vec<TokenId>>,
    /// Per generated step, `[batch, vocab]`.
    pub logits: Vec<Tensor>,
    pub counters: PassCounters,
    /// Every intermediate allocation the baseline made.
    pub log: AllocationLog,
}

struct Heap<'a> {
    log: &'a mut AllocationLog,
}

impl Heap<'_> {
    fn alloc(&mut self, len: usize, tag: &str) -> Vec<f32> {
        self.log.record_alloc(EventKind::FreshAlloc, len, tag);
        vec![0.0; len]
    }
}

/// `out[r, c] = sum_k a[r, k] * w[k, c]`
fn naive_matmul(a: &[f32], w: &[f32], out: &mut [f32], rows: usize, inner: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0f32;
            for k in 0..inner {
                acc += a[r * inner + k] * w[k * cols + c];
            }
            out[r * cols + c] = acc;
        }
    }
}

fn naive_layer_norm(x: &[f32], out: &mut [f32], gamma: &[f32], beta: &[f32]) {
    let h = gamma.len();
    for (src, dst) in x.chunks_exact(h).zip(out.chunks_exact_mut(h)) {
        let mean = src.iter().sum::<f32>() / h as f32;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / h as f32;
        let denom = (var + EPS).sqrt();
        for i in 0..h {
            dst[i] = (src[i] - mean) / denom * gamma[i] + beta[i];
        }
    }
}

fn naive_gelu(v: f32) -> f32 {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Multi-head attention of `q` (`[batch, q_len, h]`, at absolute offset
/// `q_offset`) over token-major `k`/`v` (`[batch, kv_len, h]`), with an
/// additive `mask` of `[batch, mask_rows, kv_len]` indexed by absolute
/// query position.
#[allow(clippy::too_many_arguments)]
fn masked_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    mask: &Tensor,
    desc: &BatchDescriptor,
    q_len: usize,
    kv_len: usize,
    q_offset: usize,
    hidden: usize,
    heads: usize,
    heap: &mut Heap<'_>,
) -> Vec<f32> {
    let batch = desc.batch();
    let hd = hidden / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mask_rows = mask.dim(1);
    let mut ctx = heap.alloc(batch * q_len * hidden, "reference.context");
    let mut row = heap.alloc(kv_len, "reference.scores");
    for b in 0..batch {
        for i in 0..q_len {
            let abs = q_offset + i;
            if desc.is_pad(b, abs) {
                continue;
            }
            let m = &mask.data()[(b * mask_rows + abs) * kv_len..][..kv_len];
            for head in 0..heads {
                let qv = &q[(b * q_len + i) * hidden + head * hd..][..hd];
                for j in 0..kv_len {
                    let kv = &k[(b * kv_len + j) * hidden + head * hd..][..hd];
                    let mut s = 0.0f32;
                    for d in 0..hd {
                        s += qv[d] * kv[d];
                    }
                    row[j] = s * scale + m[j];
                }
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                let out = &mut ctx[(b * q_len + i) * hidden + head * hd..][..hd];
                for j in 0..kv_len {
                    let p = row[j] / sum;
                    let vv = &v[(b * kv_len + j) * hidden + head * hd..][..hd];
                    for d in 0..hd {
                        out[d] += p * vv[d];
                    }
                }
            }
        }
    }
    ctx
}

/// Past keys and values of one layer, token-major `[batch, len, hidden]`.
#[derive(Default)]
struct PastKv {
    keys: Vec<f32>,
    values: Vec<f32>,
    len: usize,
}

/// Appends `new` (`[batch, step, h]`) after `past` (`[batch, past_len, h]`)
/// in a freshly allocated buffer.
fn concat(past: &[f32], new: &[f32], batch: usize, past_len: usize, step: usize, h: usize, heap: &mut Heap<'_>) -> Vec<f32> {
    let total = past_len + step;
    let mut out = heap.alloc(batch * total * h, "reference.kv");
    for b in 0..batch {
        out[b * total * h..][..past_len * h].copy_from_slice(&past[b * past_len * h..][..past_len * h]);
        out[(b * total + past_len) * h..][..step * h].copy_from_slice(&new[b * step * h..][..step * h]);
    }
    out
}

/// Pre-norm decoder block over `x` (`[batch, step, h]`, at absolute offset
/// `past.len`), extending `past` with this block's keys and values.
#[allow(clippy::too_many_arguments)]
fn decoder_block(
    x: &mut [f32],
    w: &LayerWeights,
    heads: usize,
    desc: &BatchDescriptor,
    step: usize,
    past: &mut PastKv,
    mask: &Tensor,
    heap: &mut Heap<'_>,
) {
    let batch = desc.batch();
    let h = w.wq.dim(0);
    let rows = batch * step;
    let mut normed = heap.alloc(rows * h, "reference.norm");
    naive_layer_norm(x, &mut normed, w.ln1_gamma.data(), w.ln1_beta.data());
    let mut q = heap.alloc(rows * h, "reference.query");
    let mut k = heap.alloc(rows * h, "reference.key");
    let mut v = heap.alloc(rows * h, "reference.value");
    naive_matmul(&normed, w.wq.data(), &mut q, rows, h, h);
    naive_matmul(&normed, w.wk.data(), &mut k, rows, h, h);
    naive_matmul(&normed, w.wv.data(), &mut v, rows, h, h);
    let keys = concat(&past.keys, &k, batch, past.len, step, h, heap);
    let values = concat(&past.values, &v, batch, past.len, step, h, heap);
    let kv_len = past.len + step;
    let ctx = masked_attention(&q, &keys, &values, mask, desc, step, kv_len, past.len, h, heads, heap);
    *past = PastKv { keys, values, len: kv_len };

    let mut proj = heap.alloc(rows * h, "reference.projection");
    naive_matmul(&ctx, w.wo.data(), &mut proj, rows, h, h);
    add_into(x, &proj);

    naive_layer_norm(x, &mut normed, w.ln2_gamma.data(), w.ln2_beta.data());
    let mut inner = heap.alloc(rows * 4 * h, "reference.ffn");
    naive_matmul(&normed, w.w1.data(), &mut inner, rows, h, 4 * h);
    inner.iter_mut().for_each(|v| *v = naive_gelu(*v));
    naive_matmul(&inner, w.w2.data(), &mut proj, rows, 4 * h, h);
    add_into(x, &proj);
}

fn check_layer_input(x: &Tensor, w: &LayerWeights, heads: usize, desc: &BatchDescriptor) -> Result<()> {
    let h = w.wq.dim(0);
    if x.rank() != 3 || x.dim(0) != desc.batch() || x.dim(2) != h {
        return Err(Error::Shape(format!(
            "x must be [{}, len, {h}], got {:?}",
            desc.batch(),
            x.shape()
        )));
    }
    w.validate(h)?;
    if heads == 0 || !h.is_multiple_of(heads) {
        return Err(Error::Shape(format!("hidden {h} not divisible by {heads} heads")));
    }
    Ok(())
}

/// One causal decoder layer over the full sequence in `x`
/// (`[batch, len, hidden]`), with an explicit mask.
pub fn dense_decoder_layer(x: &Tensor, w: &LayerWeights, heads: usize, desc: &BatchDescriptor) -> Result<Tensor> {
    check_layer_input(x, w, heads, desc)?;
    let len = x.dim(1);
    let mut log = AllocationLog::new();
    let mut heap = Heap { log: &mut log };
    let mask = build_mask(desc, len, len, 0, MaskKind::Causal)?;
    let mut out = x.data().to_vec();
    decoder_block(&mut out, w, heads, desc, len, &mut PastKv::default(), &mask, &mut heap);
    Tensor::new(x.shape().to_vec(), out)
}

/// One post-norm bidirectional encoder layer over `x`
/// (`[batch, seq_len, hidden]`), with an explicit padding mask.
pub fn dense_encoder_layer(x: &Tensor, w: &LayerWeights, heads: usize, desc: &BatchDescriptor) -> Result<Tensor> {
    check_layer_input(x, w, heads, desc)?;
    let (batch, len, h) = (desc.batch(), x.dim(1), x.dim(2));
    let rows = batch * len;
    let mut log = AllocationLog::new();
    let mut heap = Heap { log: &mut log };
    let mask = build_mask(desc, len, len, 0, MaskKind::Padding)?;
    let mut out = x.data().to_vec();
    let mut q = heap.alloc(rows * h, "reference.query");
    let mut k = heap.alloc(rows * h, "reference.key");
    let mut v = heap.alloc(rows * h, "reference.value");
    naive_matmul(&out, w.wq.data(), &mut q, rows, h, h);
    naive_matmul(&out, w.wk.data(), &mut k, rows, h, h);
    naive_matmul(&out, w.wv.data(), &mut v, rows, h, h);
    let ctx = masked_attention(&q, &k, &v, &mask, desc, len, len, 0, h, heads, &mut heap);
    let mut proj = heap.alloc(rows * h, "reference.projection");
    naive_matmul(&ctx, w.wo.data(), &mut proj, rows, h, h);
    add_into(&mut out, &proj);
    let mut normed = heap.alloc(rows * h, "reference.norm");
    naive_layer_norm(&out, &mut normed, w.ln1_gamma.data(), w.ln1_beta.data());
    let mut inner = heap.alloc(rows * 4 * h, "reference.ffn");
    naive_matmul(&normed, w.w1.data(), &mut inner, rows, h, 4 * h);
    inner.iter_mut().for_each(|v| *v = naive_gelu(*v));
    naive_matmul(&inner, w.w2.data(), &mut proj, rows, 4 * h, h);
    add_into(&mut normed, &proj);
    naive_layer_norm(&normed, &mut out, w.ln2_gamma.data(), w.ln2_beta.data());
    Tensor::new(x.shape().to_vec(), out)
}

/// Token at absolute position `pos`, from the padded prompt or from the
/// already generated tokens.
fn token_at(req: &GenerationRequest, desc: &BatchDescriptor, generated: &[Vec<TokenId>], b: usize, pos: usize) -> TokenId {
    if pos < desc.seq_len() {
        req.padded_token(desc, b, pos)
    } else {
        generated[b][pos - desc.seq_len()]
    }
}

fn embed(model: &Model, heap: &mut Heap<'_>, tokens: &[(TokenId, usize)]) -> Vec<f32> {
    let h = model.shape().hidden;
    let mut x = heap.alloc(tokens.len() * h, "reference.hidden");
    for (row, &(t, p)) in x.chunks_exact_mut(h).zip(tokens) {
        let te = &model.token_embedding.data()[t as usize * h..][..h];
        let pe = &model.position_embedding.data()[p * h..][..h];
        for i in 0..h {
            row[i] = te[i] + pe[i];
        }
    }
    x
}

/// Final norm and tied head over the last position of each sequence.
fn head(model: &Model, x: &[f32], batch: usize, step: usize, heap: &mut Heap<'_>) -> Result<(Vec<TokenId>, Tensor)> {
    let (h, vocab) = (model.shape().hidden, model.vocab());
    let mut last = heap.alloc(batch * h, "reference.last");
    for b in 0..batch {
        last[b * h..][..h].copy_from_slice(&x[(b * step + step - 1) * h..][..h]);
    }
    let mut normed = heap.alloc(batch * h, "reference.norm");
    naive_layer_norm(&last, &mut normed, model.final_gamma.data(), model.final_beta.data());
    let mut logits = heap.alloc(batch * vocab, "reference.logits");
    let e = model.token_embedding.data();
    for b in 0..batch {
        for t in 0..vocab {
            let mut acc = 0.0f32;
            for i in 0..h {
                acc += normed[b * h + i] * e[t * h + i];
            }
            logits[b * vocab + t] = acc;
        }
    }
    let next = logits
        .chunks_exact(vocab)
        .map(|row| {
            // first maximum wins
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as TokenId
        })
        .collect();
    Ok((next, Tensor::new(vec![batch, vocab], logits)?))
}

fn prepare(model: &Model, req: &GenerationRequest, cfg: &ModelConfig) -> Result<BatchDescriptor> {
    cfg.validate()?;
    model.check_config(cfg)?;
    req.validate(cfg, model.vocab())
}

/// Baseline generation: every position, prompt included, is processed in
/// its own pass over the layer stack; keys and values are re-copied into
/// new buffers and a full mask tensor is rebuilt at every pass.
pub fn reference_generate(model: &Model, req: &GenerationRequest, cfg: &ModelConfig) -> Result<ReferenceRun> {
    let desc = prepare(model, req, cfg)?;
    let (batch, seq, heads) = (desc.batch(), desc.seq_len(), cfg.head_count);
    let mut log = AllocationLog::new();
    let mut heap = Heap { log: &mut log };
    let mut counters = PassCounters::default();
    let mut generated: Vec<Vec<TokenId>> = vec![Vec::with_capacity(req.steps); batch];
    let mut logits = Vec::with_capacity(req.steps);
    let mut past: Vec<PastKv> = (0..cfg.layer_count).map(|_| PastKv::default()).collect();

    let positions = if req.steps == 0 { seq } else { seq + req.steps - 1 };
    for pos in 0..positions {
        let tokens: Vec<_> = (0..batch)
            .map(|b| (token_at(req, &desc, &generated, b, pos), position_id(&desc, b, pos)))
            .collect();
        let mut x = embed(model, &mut heap, &tokens);
        let mask = build_mask(&desc, pos + 1, pos + 1, 0, MaskKind::Causal)?;
        heap.log.record_alloc(EventKind::FreshAlloc, mask.len(), "reference.mask");
        for (w, kv) in model.layers.iter().zip(&mut past) {
            decoder_block(&mut x, w, heads, &desc, 1, kv, &mask, &mut heap);
        }
        if pos < seq {
            counters.prompt_passes += 1;
        } else {
            counters.incremental_passes += 1;
        }
        counters.layer_invocations += cfg.layer_count;
        if pos + 1 >= seq && generated[0].len() < req.steps {
            let (next, l) = head(model, &x, batch, 1, &mut heap)?;
            for (g, t) in generated.iter_mut().zip(next) {
                g.push(t);
            }
            logits.push(l);
        }
    }
    Ok(ReferenceRun {
        tokens: generated,
        logits,
        counters,
        log,
    })
}

/// Generation without any cache: every step re-runs the whole sequence
/// through every layer. Slow, but the most direct statement of what
/// greedy decoding computes.
pub fn full_recompute_generate(model: &Model, req: &GenerationRequest, cfg: &ModelConfig) -> Result<ReferenceRun> {
    let desc = prepare(model, req, cfg)?;
    let (batch, seq, heads) = (desc.batch(), desc.seq_len(), cfg.head_count);
    let mut log = AllocationLog::new();
    let mut heap = Heap { log: &mut log };
    let mut counters = PassCounters::default();
    let mut generated: Vec<Vec<TokenId>> = vec![Vec::with_capacity(req.steps); batch];
    let mut logits = Vec::with_capacity(req.steps);

    for step in 0..req.steps {
        let len = seq + step;
        let tokens: Vec<_> = (0..batch)
            .flat_map(|b| (0..len).map(move |p| (b, p)))
            .map(|(b, p)| (token_at(req, &desc, &generated, b, p), position_id(&desc, b, p)))
            .collect();
        let mut x = embed(model, &mut heap, &tokens);
        let mask = build_mask(&desc, len, len, 0, MaskKind::Causal)?;
        for w in &model.layers {
            decoder_block(&mut x, w, heads, &desc, len, &mut PastKv::default(), &mask, &mut heap);
        }
        counters.prompt_passes += 1;
        counters.layer_invocations += cfg.layer_count;
        let (next, l) = head(model, &x, batch, len, &mut heap)?;
        for (g, t) in generated.iter_mut().zip(next) {
            g.push(t);
        }
        logits.push(l);
    }
    Ok(ReferenceRun {
        tokens: generated,
        logits,
        counters,
        log,
    })
}
