#![allow(dead_code)]

use maskfold_core::{BatchDescriptor, Model, ModelConfig, ModelShape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(batch: usize, prompt: usize, max_seq: usize) -> ModelConfig {
    ModelConfig::new(batch, 8, 2, 2, prompt, max_seq)
}

pub fn model_for(cfg: &ModelConfig, vocab: usize, seed: u64) -> Model {
    Model::random(ModelShape::for_config(cfg, vocab), seed).unwrap()
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_prompts(lengths: &[usize], vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    lengths
        .iter()
        .map(|&n| (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect())
        .collect()
}

/// Rows `[b, pos]` of a `[batch, len, hidden]` tensor.
pub fn row(t: &Tensor, b: usize, pos: usize) -> &[f32] {
    let (len, h) = (t.dim(1), t.dim(2));
    &t.data()[(b * len + pos) * h..][..h]
}

pub fn non_pad_rows_equal(a: &Tensor, b: &Tensor, desc: &BatchDescriptor) -> bool {
    (0..desc.batch()).all(|s| (desc.pad(s)..a.dim(1)).all(|p| row(a, s, p) == row(b, s, p)))
}

pub fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
