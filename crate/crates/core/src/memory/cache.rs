use super::log::{AllocationLog, EventKind};
use super::pool::alloc_zeroed;
use super::{activation_elements, kv_cache_elements};
use crate::attention::KvView;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvPart {
    Keys,
    Values,
}

#[derive(Debug)]
struct LayerKv {
    keys: Vec<f32>,
    values: Vec<f32>,
    filled: Vec<usize>,
}

/// Per-layer key/value storage, laid out `[batch, heads, max_seq, head_dim]`.
#[derive(Debug)]
pub struct KvCache {
    batch: usize,
    heads: usize,
    max_seq: usize,
    head_dim: usize,
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn element_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.keys.len() + l.values.len())
            .sum()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn batch_capacity(&self) -> usize {
        self.batch
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn filled_len(&self, layer: usize, sequence: usize) -> usize {
        self.layers[layer].filled[sequence]
    }

    /// Fill level shared by the first `batch` sequences of `layer`.
    pub fn uniform_fill(&self, layer: usize, batch: usize) -> Result<usize> {
        let lkv = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Shape(format!("layer {layer} has no cache")))?;
        if batch > self.batch {
            return Err(Error::Shape(format!(
                "batch {batch} exceeds cache capacity {}",
                self.batch
            )));
        }
        let first = lkv.filled[0];
        if lkv.filled[..batch].iter().any(|&f| f != first) {
            return Err(Error::Phase(format!("layer {layer} has ragged fill levels")));
        }
        Ok(first)
    }

    pub fn reset(&mut self) {
        for layer in &mut self.layers {
            layer.filled.fill(0);
        }
    }

    fn plane_stride(&self) -> usize {
        self.max_seq * self.head_dim
    }

    /// Scatters `rows` (`[batch, step, hidden]`) into positions
    /// `start..start + step` without moving the fill level.
    pub(crate) fn write(
        &mut self,
        layer: usize,
        part: KvPart,
        rows: &[f32],
        batch: usize,
        start: usize,
        step: usize,
    ) -> Result<()> {
        if start + step > self.max_seq {
            return Err(Error::CacheOverflow {
                needed: start + step,
                capacity: self.max_seq,
            });
        }
        let (hd, heads, plane) = (self.head_dim, self.heads, self.plane_stride());
        let hidden = hd * heads;
        let lkv = &mut self.layers[layer];
        let dst = match part {
            KvPart::Keys => &mut lkv.keys,
            KvPart::Values => &mut lkv.values,
        };
        for b in 0..batch {
            for t in 0..step {
                let src = &rows[(b * step + t) * hidden..][..hidden];
                for (head, chunk) in src.chunks_exact(hd).enumerate() {
                    let off = (b * heads + head) * plane + (start + t) * hd;
                    dst[off..off + hd].copy_from_slice(chunk);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn advance(&mut self, layer: usize, batch: usize, step: usize) -> Result<()> {
        let max_seq = self.max_seq;
        for f in &mut self.layers[layer].filled[..batch] {
            if *f + step > max_seq {
                return Err(Error::CacheOverflow {
                    needed: *f + step,
                    capacity: max_seq,
                });
            }
            *f += step;
        }
        Ok(())
    }

    pub(crate) fn view(&self, layer: usize, part: KvPart) -> KvView<'_> {
        let lkv = &self.layers[layer];
        let data = match part {
            KvPart::Keys => &lkv.keys,
            KvPart::Values => &lkv.values,
        };
        KvView {
            data,
            batch_stride: self.heads * self.plane_stride(),
            head_stride: self.plane_stride(),
            pos_stride: self.head_dim,
        }
    }

    /// Cached key or value vector of one head at one position.
    pub fn get(&self, layer: usize, part: KvPart, seq: usize, head: usize, pos: usize) -> &[f32] {
        self.view(layer, part).at(seq, head, pos, self.head_dim)
    }
}

/// The two reusable hidden-state regions, each `batch × max_prompt × hidden`.
///
/// `stream` carries the embedding output, every layer's output and the final
/// hidden state. `attention` holds the attention-side intermediates, which
/// must not overwrite the stream because of the residual connection.
#[derive(Debug)]
pub struct ActivationCaches {
    pub(crate) stream: Vec<f32>,
    pub(crate) attention: Vec<f32>,
}

impl ActivationCaches {
    pub fn element_count(&self) -> usize {
        self.stream.len() + self.attention.len()
    }

    /// Elements per region.
    pub fn region_len(&self) -> usize {
        self.stream.len()
    }
}

/// Allocates every cache up front, once.
pub fn preallocate_caches(
    cfg: &ModelConfig,
    log: &mut AllocationLog,
) -> Result<(KvCache, ActivationCaches)> {
    cfg.validate()?;
    let kv_total = kv_cache_elements(cfg)?;
    let act_total = activation_elements(cfg)?;
    let per_part = cfg.batch_size * cfg.hidden_size * cfg.max_sequence;

    let layers = (0..cfg.layer_count)
        .map(|_| {
            Ok(LayerKv {
                keys: alloc_zeroed(per_part)?,
                values: alloc_zeroed(per_part)?,
                filled: vec![0; cfg.batch_size],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log.record_alloc(EventKind::CacheAlloc, kv_total, "kv_cache");

    let region = act_total / 2;
    let activations = ActivationCaches {
        stream: alloc_zeroed(region)?,
        attention: alloc_zeroed(region)?,
    };
    log.record_alloc(EventKind::CacheAlloc, region, "activation.stream");
    log.record_alloc(EventKind::CacheAlloc, region, "activation.attention");

    Ok((
        KvCache {
            batch: cfg.batch_size,
            heads: cfg.head_count,
            max_seq: cfg.max_sequence,
            head_dim: cfg.head_dim(),
            layers,
        },
        activations,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_counts_follow_formulas() {
        let cfg = ModelConfig::new(2, 8, 3, 2, 4, 6);
        let mut log = AllocationLog::new();
        let (kv, act) = preallocate_caches(&cfg, &mut log).unwrap();
        assert_eq!(kv.element_count(), 2 * 2 * 8 * 6 * 3);
        assert_eq!(act.element_count(), 2 * 2 * 8 * 4);
        assert_eq!(log.count(EventKind::CacheAlloc), 3);
    }

    #[test]
    fn unit_config() {
        let cfg = ModelConfig::new(1, 1, 1, 1, 1, 1);
        let (kv, _) = preallocate_caches(&cfg, &mut AllocationLog::new()).unwrap();
        assert_eq!(kv.element_count(), 2);
    }

    #[test]
    fn write_scatters_heads_and_overflow_is_caught() {
        let cfg = ModelConfig::new(2, 4, 1, 2, 2, 3);
        let (mut kv, _) = preallocate_caches(&cfg, &mut AllocationLog::new()).unwrap();
        // [batch=2, step=1, hidden=4]
        let rows = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        kv.write(0, KvPart::Keys, &rows, 2, 2, 1).unwrap();
        assert_eq!(kv.get(0, KvPart::Keys, 0, 1, 2), &[3.0, 4.0]);
        assert_eq!(kv.get(0, KvPart::Keys, 1, 0, 2), &[5.0, 6.0]);
        assert!(matches!(
            kv.write(0, KvPart::Keys, &rows, 2, 3, 1),
            Err(Error::CacheOverflow { needed: 4, capacity: 3 })
        ));
        kv.advance(0, 2, 3).unwrap();
        assert!(kv.advance(0, 2, 1).is_err());
        assert_eq!(kv.filled_len(0, 1), 3);
        kv.reset();
        assert_eq!(kv.uniform_fill(0, 2).unwrap(), 0);
    }
}
