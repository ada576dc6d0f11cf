use crate::error::{Error, Result};

/// Left-padded layout of an uneven batch.
///
/// Sequence `b` occupies positions `[padding_len[b], seq_len)`; positions
/// before that are padding and never take part in attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDescriptor {
    seq_len: usize,
    padding_len: Vec<usize>,
}

impl BatchDescriptor {
    pub fn new(seq_len: usize, padding_len: Vec<usize>) -> Result<Self> {
        if padding_len.is_empty() {
            return Err(Error::Batch("batch is empty".into()));
        }
        if let Some((i, &pad)) = padding_len.iter().enumerate().find(|(_, &p)| p >= seq_len) {
            return Err(Error::Batch(format!(
                "sequence {i} has padding {pad}, must be below seq_len {seq_len}"
            )));
        }
        Ok(Self { seq_len, padding_len })
    }

    /// A batch with no padding at all.
    pub fn unpadded(batch: usize, seq_len: usize) -> Result<Self> {
        Self::new(seq_len, vec![0; batch])
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn padding_len(&self) -> &[usize] {
        &self.padding_len
    }

    pub fn batch(&self) -> usize {
        self.padding_len.len()
    }

    pub fn pad(&self, sequence: usize) -> usize {
        self.padding_len[sequence]
    }

    /// Number of real tokens in `sequence`.
    pub fn valid_len(&self, sequence: usize) -> usize {
        self.seq_len - self.padding_len[sequence]
    }

    pub fn is_pad(&self, sequence: usize, position: usize) -> bool {
        position < self.padding_len[sequence]
    }

    pub fn pad_token_count(&self) -> usize {
        self.padding_len.iter().sum()
    }
}

/// Pads an uneven batch to a common length.
///
/// `target_len` defaults to the longest prompt, so every sequence decodes in
/// parallel from the first step.
pub fn make_batch(prompt_lengths: &[usize], target_len: Option<usize>) -> Result<BatchDescriptor> {
    let longest = *prompt_lengths
        .iter()
        .max()
        .ok_or_else(|| Error::Batch("no prompts".into()))?;
    if let Some(i) = prompt_lengths.iter().position(|&l| l == 0) {
        return Err(Error::Batch(format!("prompt {i} is empty")));
    }
    let seq_len = target_len.unwrap_or(longest);
    if seq_len < longest {
        return Err(Error::Batch(format!(
            "target length {seq_len} is shorter than the longest prompt {longest}"
        )));
    }
    BatchDescriptor::new(seq_len, prompt_lengths.iter().map(|&l| seq_len - l).collect())
}
