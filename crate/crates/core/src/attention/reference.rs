//! Explicit-mask attention: materializes additive mask tensors and runs a
//! plain softmax over whole rows. Serves as the baseline and as the oracle
//! for the fused path.

use super::{AttentionScores, MaskKind};
use crate::batch::BatchDescriptor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive mask `[batch, q_len, kv_len]` of `0` (visible) and `-inf`.
pub fn build_mask(
    desc: &BatchDescriptor,
    q_len: usize,
    kv_len: usize,
    q_offset: usize,
    mask: MaskKind,
) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[desc.batch(), q_len, kv_len])?;
    for (idx, m) in out.data_mut().iter_mut().enumerate() {
        let b = idx / (q_len * kv_len);
        let i = (idx / kv_len) % q_len + q_offset;
        let j = idx % kv_len;
        let visible = j >= desc.pad(b) && (mask == MaskKind::Padding || j <= i);
        if !visible {
            *m = f32::NEG_INFINITY;
        }
    }
    Ok(out)
}

/// Adds an explicit mask and applies an ordinary row softmax. Rows of
/// padding queries are zeroed.
pub fn explicit_mask_reference(
    scores: &AttentionScores,
    desc: &BatchDescriptor,
    mask: MaskKind,
) -> Result<AttentionScores> {
    scores.check(desc)?;
    let seq = desc.seq_len();
    let heads = scores.head_count();
    let mask_tensor = build_mask(desc, seq, seq, 0, mask)?;
    let mut out = scores.clone();
    let data = out.data.data_mut();
    for plane in 0..desc.batch() * heads {
        let b = plane / heads;
        for i in 0..seq {
            let row = &mut data[(plane * seq + i) * seq..][..seq];
            if desc.is_pad(b, i) {
                row.fill(0.0);
                continue;
            }
            let m = &mask_tensor.data()[(b * seq + i) * seq..][..seq];
            softmax_with_mask(row, m);
        }
    }
    Ok(out)
}

pub(crate) fn softmax_with_mask(row: &mut [f32], mask: &[f32]) {
    for (x, m) in row.iter_mut().zip(mask) {
        *x += m;
    }
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Dense multi-head attention using a materialized mask.
pub fn reference_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    head_count: usize,
    desc: &BatchDescriptor,
    mask: MaskKind,
) -> Result<Tensor> {
    let (batch, seq) = (desc.batch(), desc.seq_len());
    if q.rank() != 3 {
        return Err(Error::Shape("q must be rank 3".into()));
    }
    let hidden = q.dim(2);
    for t in [q, k, v] {
        t.expect_shape(&[batch, seq, hidden], "reference attention input")?;
    }
    let hd = hidden / head_count;
    let scale = 1.0 / (hd as f32).sqrt();
    let mask_tensor = build_mask(desc, seq, seq, 0, mask)?;
    let mut out = Tensor::zeros(&[batch, seq, hidden])?;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut row = vec![0.0f32; seq];
    for b in 0..batch {
        for head in 0..head_count {
            for i in 0..seq {
                if desc.is_pad(b, i) {
                    continue;
                }
                for (j, r) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for d in 0..hd {
                        acc += qd[(b * seq + i) * hidden + head * hd + d]
                            * kd[(b * seq + j) * hidden + head * hd + d];
                    }
                    *r = acc * scale;
                }
                softmax_with_mask(&mut row, &mask_tensor.data()[(b * seq + i) * seq..][..seq]);
                for d in 0..hd {
                    let mut acc = 0.0;
                    for (j, p) in row.iter().enumerate() {
                        acc += p * vd[(b * seq + j) * hidden + head * hd + d];
                    }
                    out.data_mut()[(b * seq + i) * hidden + head * hd + d] = acc;
                }
            }
        }
    }
    Ok(out)
}
