use std::io::{Read, Write};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOB_MAGIC: [u8; 4] = *b"MFWB";
pub const BLOB_VERSION: u32 = 1;

/// Weights of one transformer layer. Projections are stored input-major,
/// so a row vector `x` maps to `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// `[hidden, 4·hidden]`
    pub w1: Tensor,
    /// `[4·hidden, hidden]`
    pub w2: Tensor,
}

impl LayerWeights {
    pub fn zeros(hidden: usize) -> Result<Self> {
        let v = Tensor::zeros(&[hidden])?;
        let m = Tensor::zeros(&[hidden, hidden])?;
        Ok(Self {
            ln1_gamma: v.clone(),
            ln1_beta: v.clone(),
            wq: m.clone(),
            wk: m.clone(),
            wv: m.clone(),
            wo: m,
            ln2_gamma: v.clone(),
            ln2_beta: v,
            w1: Tensor::zeros(&[hidden, 4 * hidden])?,
            w2: Tensor::zeros(&[4 * hidden, hidden])?,
        })
    }

    pub fn random(hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let matrix = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (rows as f32).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            Tensor::from_fn(&[rows, cols], |_| dist.sample(rng))
        };
        let gain = |rng: &mut ChaCha8Rng| {
            let dist = Uniform::new_inclusive(0.9f32, 1.1);
            Tensor::from_fn(&[hidden], |_| dist.sample(rng))
        };
        let shift = |rng: &mut ChaCha8Rng| {
            let dist = Uniform::new_inclusive(-0.1f32, 0.1);
            Tensor::from_fn(&[hidden], |_| dist.sample(rng))
        };
        Ok(Self {
            ln1_gamma: gain(rng)?,
            ln1_beta: shift(rng)?,
            wq: matrix(hidden, hidden, rng)?,
            wk: matrix(hidden, hidden, rng)?,
            wv: matrix(hidden, hidden, rng)?,
            wo: matrix(hidden, hidden, rng)?,
            ln2_gamma: gain(rng)?,
            ln2_beta: shift(rng)?,
            w1: matrix(hidden, 4 * hidden, rng)?,
            w2: matrix(4 * hidden, hidden, rng)?,
        })
    }

    /// Blob order.
    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.w2,
        ]
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        let (h, f) = (hidden, 4 * hidden);
        let expected: [&[usize]; 10] = [&[h], &[h], &[h, h], &[h, h], &[h, h], &[h, h], &[h], &[h], &[h, f], &[f, h]];
        for (t, shape) in self.tensors().into_iter().zip(expected) {
            t.expect_shape(shape, "layer weight")?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Architecture of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    pub max_positions: usize,
}

impl ModelShape {
    pub fn for_config(cfg: &ModelConfig, vocab: usize) -> Self {
        Self {
            hidden: cfg.hidden_size,
            heads: cfg.head_count,
            layers: cfg.layer_count,
            vocab,
            max_positions: cfg.max_sequence,
        }
    }

    /// Parameter count without materializing anything.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden;
        let per_layer = 12 * h * h + 4 * h;
        self.vocab * h + self.max_positions * h + self.layers * per_layer + 2 * h
    }
}

/// Decoder-only language model: embeddings, layers, and an output head tied
/// to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    shape: ModelShape,
    /// `[vocab, hidden]`
    pub token_embedding: Tensor,
    /// `[max_positions, hidden]`
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl Model {
    pub fn random(shape: ModelShape, seed: u64) -> Result<Self> {
        check_shape(&shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Uniform::new_inclusive(-1.0f32, 1.0);
        let token_embedding = Tensor::from_fn(&[shape.vocab, shape.hidden], |_| unit.sample(&mut rng))?;
        let position_embedding =
            Tensor::from_fn(&[shape.max_positions, shape.hidden], |_| 0.5 * unit.sample(&mut rng))?;
        let layers = (0..shape.layers)
            .map(|_| LayerWeights::random(shape.hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape,
            token_embedding,
            position_embedding,
            layers,
            final_gamma: Tensor::from_fn(&[shape.hidden], |_| 1.0)?,
            final_beta: Tensor::zeros(&[shape.hidden])?,
        })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn vocab(&self) -> usize {
        self.shape.vocab
    }

    pub fn parameter_count(&self) -> usize {
        self.token_embedding.len()
            + self.position_embedding.len()
            + self.layers.iter().map(|l| l.parameter_count()).sum::<usize>()
            + self.final_gamma.len()
            + self.final_beta.len()
    }

    /// Checks that the model fits a runtime built for `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let s = &self.shape;
        if s.hidden != cfg.hidden_size || s.heads != cfg.head_count || s.layers != cfg.layer_count {
            return Err(Error::Shape(format!(
                "model (hidden {}, heads {}, layers {}) does not match config (hidden {}, heads {}, layers {})",
                s.hidden, s.heads, s.layers, cfg.hidden_size, cfg.head_count, cfg.layer_count
            )));
        }
        if s.max_positions < cfg.max_sequence {
            return Err(Error::Shape(format!(
                "model has {} positions, config needs {}",
                s.max_positions, cfg.max_sequence
            )));
        }
        Ok(())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        [&self.token_embedding, &self.position_embedding]
            .into_iter()
            .chain(self.layers.iter().flat_map(|l| l.tensors()))
            .chain([&self.final_gamma, &self.final_beta])
    }

    /// Serializes to the weight blob format (see `docs/weight-blob.md`).
    pub fn write_blob<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&BLOB_MAGIC)?;
        let s = &self.shape;
        for field in [BLOB_VERSION as usize, s.hidden, s.layers, s.heads, s.vocab, s.max_positions] {
            let field = u32::try_from(field).map_err(|_| Error::Blob(format!("{field} does not fit u32")))?;
            out.write_all(&field.to_le_bytes())?;
        }
        for t in self.tensors() {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != BLOB_MAGIC {
            return Err(Error::Blob(format!("bad magic {magic:?}")));
        }
        let read_u32 = |input: &mut R| -> Result<usize> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = read_u32(&mut input)?;
        if version != BLOB_VERSION as usize {
            return Err(Error::Blob(format!("unsupported version {version}")));
        }
        let hidden = read_u32(&mut input)?;
        let layers = read_u32(&mut input)?;
        let heads = read_u32(&mut input)?;
        let vocab = read_u32(&mut input)?;
        let max_positions = read_u32(&mut input)?;
        let shape = ModelShape {
            hidden,
            heads,
            layers,
            vocab,
            max_positions,
        };
        check_shape(&shape)?;

        let mut tensor = |dims: &[usize]| -> Result<Tensor> {
            let len = dims
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or(Error::Overflow("blob tensor size"))?;
            let mut bytes = Vec::new();
            bytes.try_reserve_exact(len).map_err(|_| Error::Allocation(len / 4))?;
            bytes.resize(len, 0u8);
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(dims.to_vec(), data)
        };
        let token_embedding = tensor(&[vocab, hidden])?;
        let position_embedding = tensor(&[max_positions, hidden])?;
        let (h, f) = (hidden, 4 * hidden);
        let mut layer_weights = Vec::with_capacity(layers);
        for _ in 0..layers {
            layer_weights.push(LayerWeights {
                ln1_gamma: tensor(&[h])?,
                ln1_beta: tensor(&[h])?,
                wq: tensor(&[h, h])?,
                wk: tensor(&[h, h])?,
                wv: tensor(&[h, h])?,
                wo: tensor(&[h, h])?,
                ln2_gamma: tensor(&[h])?,
                ln2_beta: tensor(&[h])?,
                w1: tensor(&[h, f])?,
                w2: tensor(&[f, h])?,
            });
        }
        Ok(Self {
            shape,
            token_embedding,
            position_embedding,
            layers: layer_weights,
            final_gamma: tensor(&[h])?,
            final_beta: tensor(&[h])?,
        })
    }
}

fn check_shape(s: &ModelShape) -> Result<()> {
    if s.hidden == 0 || s.heads == 0 || s.vocab == 0 || s.max_positions == 0 {
        return Err(Error::Blob(format!("degenerate model shape {s:?}")));
    }
    if !s.hidden.is_multiple_of(s.heads) {
        return Err(Error::Blob(format!("hidden {} not divisible by {} heads", s.hidden, s.heads)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelShape {
        ModelShape {
            hidden: 8,
            heads: 2,
            layers: 2,
            vocab: 16,
            max_positions: 12,
        }
    }

    #[test]
    fn blob_round_trip() {
        let model = Model::random(tiny(), 7).unwrap();
        let mut bytes = Vec::new();
        model.write_blob(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 6 * 4 + model.parameter_count() * 4);
        assert_eq!(&bytes[..8], b"MFWB\x01\x00\x00\x00");
        let back = Model::read_blob(bytes.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn blob_rejects_garbage() {
        assert!(Model::read_blob(&b"NOPE\x01\x00\x00\x00"[..]).is_err());
        let model = Model::random(tiny(), 1).unwrap();
        let mut bytes = Vec::new();
        model.write_blob(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Model::read_blob(bytes.as_slice()).is_err());
    }

    #[test]
    fn parameter_formula_matches() {
        let model = Model::random(tiny(), 3).unwrap();
        assert_eq!(model.parameter_count(), tiny().parameter_count());
        for l in &model.layers {
            l.validate(8).unwrap();
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        assert_eq!(Model::random(tiny(), 5).unwrap(), Model::random(tiny(), 5).unwrap());
        assert_ne!(Model::random(tiny(), 5).unwrap(), Model::random(tiny(), 6).unwrap());
    }
}
