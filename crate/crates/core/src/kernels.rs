//! Dense kernels used by the fused runtime.
//!
//! Every row of every kernel is computed with the same operation order no
//! matter how rows are grouped into tiles, so a row's result never depends
//! on which other rows share the batch.

use rayon::prelude::*;

use crate::folding::FoldingPlan;

pub const LAYER_NORM_EPS: f32 = 1e-5;

// Rows sharing one pass over a weight row.
const ROW_TILE: usize = 8;

/// `out += input · weight`, with `weight` row-major `[inner, cols]`.
pub fn matmul_acc(input: &[f32], weight: &[f32], out: &mut [f32], inner: usize, cols: usize) {
    debug_assert_eq!(weight.len(), inner * cols);
    debug_assert_eq!(input.len() / inner, out.len() / cols);
    out.par_chunks_mut(ROW_TILE * cols)
        .zip(input.par_chunks(ROW_TILE * inner))
        .for_each(|(out_tile, in_tile)| {
            let tile_rows = out_tile.len() / cols;
            for k in 0..inner {
                let w_row = &weight[k * cols..(k + 1) * cols];
                for r in 0..tile_rows {
                    let x = in_tile[r * inner + k];
                    let o_row = &mut out_tile[r * cols..(r + 1) * cols];
                    for (o, &w) in o_row.iter_mut().zip(w_row) {
                        *o += x * w;
                    }
                }
            }
        });
}

/// `out = input · weight`.
pub fn matmul(input: &[f32], weight: &[f32], out: &mut [f32], inner: usize, cols: usize) {
    out.fill(0.0);
    matmul_acc(input, weight, out, inner, cols);
}

/// `out = input · weightᵀ`, with `weight` row-major `[cols, inner]`.
pub fn matmul_transposed(input: &[f32], weight: &[f32], out: &mut [f32], inner: usize) {
    let cols = weight.len() / inner;
    out.par_chunks_mut(cols)
        .zip(input.par_chunks(inner))
        .for_each(|(o_row, x)| {
            for (o, w) in o_row.iter_mut().zip(weight.chunks_exact(inner)) {
                *o = dot(x, w);
            }
        });
}

/// Dot product with four interleaved partial sums.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn folded_sum(row: &[f32], plan: &FoldingPlan, f: impl Fn(f32) -> f32) -> f32 {
    plan.blocks()
        .map(|range| row[range].iter().map(|&x| f(x)).sum::<f32>())
        .sum()
}

/// Row-wise layer norm over `hidden = plan.logical_size()` columns, in place.
pub fn layer_norm_inplace(x: &mut [f32], gamma: &[f32], beta: &[f32], plan: &FoldingPlan) {
    let hidden = plan.logical_size();
    debug_assert_eq!(gamma.len(), hidden);
    x.par_chunks_mut(hidden).for_each(|row| {
        let mean = folded_sum(row, plan, |v| v) / hidden as f32;
        let var = folded_sum(row, plan, |v| (v - mean) * (v - mean)) / hidden as f32;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for range in plan.blocks() {
            for i in range {
                row[i] = (row[i] - mean) * inv_std * gamma[i] + beta[i];
            }
        }
    });
}

/// Layer norm of `src` written to `dst`.
pub fn layer_norm(src: &[f32], dst: &mut [f32], gamma: &[f32], beta: &[f32], plan: &FoldingPlan) {
    dst.copy_from_slice(src);
    layer_norm_inplace(dst, gamma, beta, plan);
}

/// Tanh-approximated GELU, in place. `plan` covers one row of `x`.
pub fn gelu_inplace(x: &mut [f32], plan: &FoldingPlan) {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    x.par_chunks_mut(plan.logical_size()).for_each(|row| {
        for range in plan.blocks() {
            for v in &mut row[range] {
                let u = *v;
                *v = 0.5 * u * (1.0 + (SQRT_2_OVER_PI * (u + 0.044715 * u * u * u)).tanh());
            }
        }
    });
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::folding::plan_folding;
    use approx::assert_abs_diff_eq;

    fn naive(a: &[f32], w: &[f32], rows: usize, inner: usize, cols: usize) -> Vec<f32> {
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                for k in 0..inner {
                    out[i * cols + j] += a[i * inner + k] * w[k * cols + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let (rows, inner, cols) = (11, 7, 5);
        let a: Vec<f32> = (0..rows * inner).map(|i| (i as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..inner * cols).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut out = vec![1.0; rows * cols];
        matmul(&a, &w, &mut out, inner, cols);
        for (x, y) in out.iter().zip(naive(&a, &w, rows, inner, cols)) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-5);
        }

        let mut wt = vec![0.0; cols * inner];
        for k in 0..inner {
            for j in 0..cols {
                wt[j * inner + k] = w[k * cols + j];
            }
        }
        let mut out_t = vec![0.0; rows * cols];
        matmul_transposed(&a, &wt, &mut out_t, inner);
        for (x, y) in out.iter().zip(&out_t) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-5);
        }
    }

    #[test]
    fn row_result_independent_of_neighbours() {
        let (inner, cols) = (6, 3);
        let w: Vec<f32> = (0..inner * cols).map(|i| i as f32 * 0.1 - 0.7).collect();
        let row: Vec<f32> = (0..inner).map(|i| 0.3 * i as f32 - 0.4).collect();
        let mut single = vec![0.0; cols];
        matmul(&row, &w, &mut single, inner, cols);
        let mut many_in: Vec<f32> = (0..13 * inner).map(|i| (i as f32).sin()).collect();
        many_in[9 * inner..10 * inner].copy_from_slice(&row);
        let mut many = vec![0.0; 13 * cols];
        matmul(&many_in, &w, &mut many, inner, cols);
        assert_eq!(&many[9 * cols..10 * cols], &single[..]);
    }

    #[test]
    fn layer_norm_folded_matches_flat() {
        let hidden = 10;
        let x: Vec<f32> = (0..3 * hidden).map(|i| (i as f32 * 0.7).sin() * 3.0).collect();
        let gamma = vec![1.5; hidden];
        let beta = vec![0.25; hidden];
        let mut flat = vec![0.0; x.len()];
        let mut folded = vec![0.0; x.len()];
        layer_norm(&x, &mut flat, &gamma, &beta, &plan_folding(hidden, 1024).unwrap());
        layer_norm(&x, &mut folded, &gamma, &beta, &plan_folding(hidden, 3).unwrap());
        for (a, b) in flat.iter().zip(&folded) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
        let row = &flat[..hidden];
        let mean: f32 = row.iter().sum::<f32>() / hidden as f32;
        assert_abs_diff_eq!(mean, 0.25, epsilon = 1e-5);
    }

    #[test]
    fn gelu_values() {
        let mut x = vec![0.0, 1.0, -1.0, 3.0];
        gelu_inplace(&mut x, &plan_folding(4, 2).unwrap());
        assert_abs_diff_eq!(x[0], 0.0);
        assert_abs_diff_eq!(x[1], 0.841_192, epsilon = 1e-5);
        assert_abs_diff_eq!(x[2], -0.158_808, epsilon = 1e-5);
        assert_abs_diff_eq!(x[3], 2.996_362_6, epsilon = 1e-5);
    }

    #[test]
    fn argmax_lowest_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
