//! Masked multi-head attention with the causal and padding masks applied by
//! index comparison.
//!
//! No mask tensor exists on this path. For sequence `b` with `pad` leading
//! padding tokens, query position `i` may attend to key `j` iff
//! `pad <= j` and, for causal attention, `j <= i`. Entries outside that
//! window are written as exact zeros, and query rows inside the padding
//! produce all-zero output. Every `(sequence, head)` score plane is an
//! independent work item.

pub mod reference;

use std::ops::Range;

use rayon::prelude::*;

use crate::batch::BatchDescriptor;
use crate::error::{Error, Result};
use crate::folding::FoldingPlan;
use crate::kernels::dot;
use crate::memory::{tags, BufferPool, Scope};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Decoder attention: padding plus no looking ahead.
    Causal,
    /// Encoder attention: padding only.
    Padding,
}

impl MaskKind {
    pub fn from_causal(causal: bool) -> Self {
        if causal {
            Self::Causal
        } else {
            Self::Padding
        }
    }
}

/// Score planes of shape `[batch × heads, seq_len, seq_len]`; plane
/// `b * heads + head` belongs to sequence `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    data: Tensor,
    head_count: usize,
}

impl AttentionScores {
    pub fn new(data: Tensor, head_count: usize) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::Shape(format!(
                "scores must be [planes, seq, seq], got {shape:?}"
            )));
        }
        if head_count == 0 || !shape[0].is_multiple_of(head_count) {
            return Err(Error::Shape(format!(
                "{} planes do not split into {head_count} heads",
                shape[0]
            )));
        }
        Ok(Self { data, head_count })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn batch(&self) -> usize {
        self.data.dim(0) / self.head_count
    }

    pub fn seq_len(&self) -> usize {
        self.data.dim(1)
    }

    pub fn row(&self, plane: usize, query: usize) -> &[f32] {
        let s = self.seq_len();
        &self.data.data()[(plane * s + query) * s..][..s]
    }

    fn check(&self, desc: &BatchDescriptor) -> Result<()> {
        if self.batch() != desc.batch() || self.seq_len() != desc.seq_len() {
            return Err(Error::Shape(format!(
                "scores {:?} with {} heads do not match batch {} x seq_len {}",
                self.data.shape(),
                self.head_count,
                desc.batch(),
                desc.seq_len()
            )));
        }
        Ok(())
    }
}

/// Softmax over the causal-and-padding window, in place.
pub fn fused_causal_softmax(scores: &mut AttentionScores, desc: &BatchDescriptor) -> Result<()> {
    fused_softmax(scores, desc, MaskKind::Causal)
}

/// Softmax over the padding window only, in place.
pub fn fused_padding_softmax(scores: &mut AttentionScores, desc: &BatchDescriptor) -> Result<()> {
    fused_softmax(scores, desc, MaskKind::Padding)
}

pub fn fused_softmax(scores: &mut AttentionScores, desc: &BatchDescriptor, mask: MaskKind) -> Result<()> {
    scores.check(desc)?;
    let layout = ScoreLayout {
        heads: scores.head_count,
        q_len: desc.seq_len(),
        kv_len: desc.seq_len(),
        q_offset: 0,
    };
    softmax_planes(scores.data.data_mut(), &layout, desc, mask)
}

/// Geometry of a block of score planes: `q_len` queries at absolute
/// positions `q_offset..` against keys `0..kv_len`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScoreLayout {
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub q_offset: usize,
}

impl ScoreLayout {
    fn plane_len(&self) -> usize {
        self.q_len * self.kv_len
    }

    /// Keys visible to query `i` of sequence `b`; `None` for padding queries.
    fn window(&self, desc: &BatchDescriptor, b: usize, i: usize, mask: MaskKind) -> Option<Range<usize>> {
        let position = self.q_offset + i;
        let pad = desc.pad(b);
        if position < pad {
            return None;
        }
        let end = match mask {
            MaskKind::Causal => position + 1,
            MaskKind::Padding => self.kv_len,
        };
        Some(pad..end)
    }

    fn validate(&self, desc: &BatchDescriptor, mask: MaskKind) -> Result<()> {
        let reach = match mask {
            MaskKind::Causal => self.q_offset + self.q_len,
            MaskKind::Padding => desc.seq_len(),
        };
        if reach > self.kv_len {
            return Err(Error::Shape(format!(
                "queries reach position {reach} but only {} keys exist",
                self.kv_len
            )));
        }
        Ok(())
    }
}

fn clip(block: Range<usize>, window: &Range<usize>) -> Range<usize> {
    let start = block.start.max(window.start);
    start..block.end.min(window.end).max(start)
}

/// Numerically stable softmax of `row[window]`; everything else becomes 0.
/// The reductions run per folded sub-block and combine in block order.
fn softmax_window(row: &mut [f32], window: Range<usize>, plan: &FoldingPlan) {
    row[..window.start].fill(0.0);
    row[window.end..].fill(0.0);

    let mut max = f32::NEG_INFINITY;
    for block in plan.blocks() {
        let local = row[clip(block, &window)]
            .iter()
            .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        max = max.max(local);
    }
    let mut sum = 0.0f32;
    for block in plan.blocks() {
        let mut local = 0.0f32;
        for v in &mut row[clip(block, &window)] {
            *v = (*v - max).exp();
            local += *v;
        }
        sum += local;
    }
    for v in &mut row[window] {
        *v /= sum;
    }
}

pub(crate) fn softmax_planes(
    data: &mut [f32],
    layout: &ScoreLayout,
    desc: &BatchDescriptor,
    mask: MaskKind,
) -> Result<()> {
    layout.validate(desc, mask)?;
    let plan = FoldingPlan::for_sequence(layout.kv_len)?;
    data.par_chunks_mut(layout.plane_len())
        .enumerate()
        .for_each(|(plane, chunk)| {
            let b = plane / layout.heads;
            for (i, row) in chunk.chunks_exact_mut(layout.kv_len).enumerate() {
                match layout.window(desc, b, i, mask) {
                    Some(window) => softmax_window(row, window, &plan),
                    None => row.fill(0.0),
                }
            }
        });
    Ok(())
}

/// Strided read-only view of keys or values indexed by
/// `(sequence, head, position)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct KvView<'a> {
    pub data: &'a [f32],
    pub batch_stride: usize,
    pub head_stride: usize,
    pub pos_stride: usize,
}

impl<'a> KvView<'a> {
    /// View over a `[batch, seq, hidden]` activation.
    pub fn token_major(data: &'a [f32], seq: usize, hidden: usize, head_dim: usize) -> Self {
        Self {
            data,
            batch_stride: seq * hidden,
            head_stride: head_dim,
            pos_stride: hidden,
        }
    }

    #[inline]
    pub fn at(&self, b: usize, head: usize, pos: usize, head_dim: usize) -> &'a [f32] {
        let off = b * self.batch_stride + head * self.head_stride + pos * self.pos_stride;
        &self.data[off..off + head_dim]
    }
}

/// Scaled dot-product attention for `batch` sequences.
///
/// `q` is `[batch, q_len, hidden]`; `scores` must hold
/// `batch · heads · q_len · kv_len` elements and `out` receives the context
/// `[batch, q_len, hidden]`. The hidden dimension of the context is
/// partitioned by `plan`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    q: &[f32],
    keys: KvView<'_>,
    values: KvView<'_>,
    layout: &ScoreLayout,
    desc: &BatchDescriptor,
    mask: MaskKind,
    plan: &FoldingPlan,
    scores: &mut [f32],
    out: &mut [f32],
) -> Result<()> {
    let hidden = plan.logical_size();
    let heads = layout.heads;
    let head_dim = hidden / heads;
    let batch = desc.batch();
    let (q_len, kv_len) = (layout.q_len, layout.kv_len);
    if scores.len() != batch * heads * q_len * kv_len || out.len() != batch * q_len * hidden {
        return Err(Error::Shape("attention scratch sized inconsistently".into()));
    }
    layout.validate(desc, mask)?;
    let scale = 1.0 / (head_dim as f32).sqrt();

    scores
        .par_chunks_mut(layout.plane_len())
        .enumerate()
        .for_each(|(plane, chunk)| {
            let (b, head) = (plane / heads, plane % heads);
            for (i, row) in chunk.chunks_exact_mut(kv_len).enumerate() {
                if let Some(window) = layout.window(desc, b, i, mask) {
                    let q_row = &q[(b * q_len + i) * hidden + head * head_dim..][..head_dim];
                    for j in window {
                        row[j] = dot(q_row, keys.at(b, head, j, head_dim)) * scale;
                    }
                }
            }
        });
    softmax_planes(scores, layout, desc, mask)?;

    let scores: &[f32] = scores;
    out.par_chunks_mut(hidden).enumerate().for_each(|(r, o_row)| {
        let (b, i) = (r / q_len, r % q_len);
        o_row.fill(0.0);
        let Some(window) = layout.window(desc, b, i, mask) else {
            return;
        };
        for block in plan.blocks() {
            let mut start = block.start;
            while start < block.end {
                let head = start / head_dim;
                let end = block.end.min((head + 1) * head_dim);
                let d0 = start - head * head_dim;
                let probs = &scores[((b * heads + head) * q_len + i) * kv_len..][..kv_len];
                let seg = &mut o_row[start..end];
                for j in window.clone() {
                    let p = probs[j];
                    let v_row = &values.at(b, head, j, head_dim)[d0..d0 + seg.len()];
                    for (o, &v) in seg.iter_mut().zip(v_row) {
                        *o += p * v;
                    }
                }
                start = end;
            }
        }
    });
    Ok(())
}

/// Multi-head attention over `[batch, seq_len, hidden]` projections.
///
/// The only scratch is the score tensor, leased from `pool`.
#[allow(clippy::too_many_arguments)]
pub fn mha_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    head_count: usize,
    desc: &BatchDescriptor,
    causal: bool,
    plan: &FoldingPlan,
    pool: &mut BufferPool,
) -> Result<Tensor> {
    if q.rank() != 3 {
        return Err(Error::Shape(format!("q must be rank 3, got {:?}", q.shape())));
    }
    let hidden = q.dim(2);
    let expected = [desc.batch(), desc.seq_len(), hidden];
    q.expect_shape(&expected, "q")?;
    k.expect_shape(&expected, "k")?;
    v.expect_shape(&expected, "v")?;
    if head_count == 0 || !hidden.is_multiple_of(head_count) {
        return Err(Error::Shape(format!(
            "hidden {hidden} not divisible by {head_count} heads"
        )));
    }
    if plan.logical_size() != hidden {
        return Err(Error::IncompatiblePlan {
            plan: plan.logical_size(),
            operand: hidden,
        });
    }
    let seq = desc.seq_len();
    let head_dim = hidden / head_count;
    let layout = ScoreLayout {
        heads: head_count,
        q_len: seq,
        kv_len: seq,
        q_offset: 0,
    };
    let mut out = Tensor::zeros(&expected)?;
    let mut scores = pool.request(
        desc.batch() * head_count * seq * seq,
        Scope::AcrossModule,
        tags::SCORES,
    )?;
    let result = attend(
        q.data(),
        KvView::token_major(k.data(), seq, hidden, head_dim),
        KvView::token_major(v.data(), seq, hidden, head_dim),
        &layout,
        desc,
        MaskKind::from_causal(causal),
        plan,
        scores.as_mut_slice(),
        out.data_mut(),
    );
    pool.release(scores)?;
    result.map(|_| out)
}
