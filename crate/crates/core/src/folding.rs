//! Thread block folding.
//!
//! A kernel normally gives one parallel lane to every element of a row. When
//! the row is longer than the per-unit lane cap, the row is halved
//! repeatedly until each piece fits, giving `2^k` sub-blocks that together
//! act as one oversized block. The extra sub-block coordinate is the only
//! change a kernel needs to handle any row length up to the supported limit.

use std::ops::Range;

use crate::config::{MAX_HIDDEN, MAX_SEQUENCE};
use crate::error::{Error, Result};

/// Lane cap of one parallel unit.
pub const DEFAULT_UNIT_CAP: usize = 1024;

/// Decomposition of one logical row into `sub_block_count` equal sub-blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldingPlan {
    logical_size: usize,
    fold_count: u32,
    sub_block_count: usize,
    threads_per_block: usize,
    unit_cap: usize,
}

/// Plans the minimal number of halvings for a row of `logical_size`.
pub fn plan_folding(logical_size: usize, unit_cap: usize) -> Result<FoldingPlan> {
    if logical_size == 0 || logical_size > MAX_HIDDEN {
        return Err(Error::Folding(format!(
            "logical size {logical_size} outside 1..={MAX_HIDDEN}"
        )));
    }
    if unit_cap == 0 {
        return Err(Error::Folding("unit cap must be at least 1".into()));
    }
    let mut fold_count = 0u32;
    while logical_size.div_ceil(1 << fold_count) > unit_cap {
        fold_count += 1;
    }
    let sub_block_count = 1usize << fold_count;
    Ok(FoldingPlan {
        logical_size,
        fold_count,
        sub_block_count,
        threads_per_block: logical_size.div_ceil(sub_block_count),
        unit_cap,
    })
}

impl FoldingPlan {
    /// Plan for a hidden-size row with the default cap.
    pub fn for_hidden(hidden: usize) -> Result<Self> {
        plan_folding(hidden, DEFAULT_UNIT_CAP)
    }

    /// Plan for a sequence-length row; sequences are capped at 4096.
    pub fn for_sequence(len: usize) -> Result<Self> {
        if len > MAX_SEQUENCE {
            return Err(Error::Folding(format!(
                "sequence length {len} exceeds {MAX_SEQUENCE}"
            )));
        }
        plan_folding(len, DEFAULT_UNIT_CAP)
    }

    pub fn logical_size(&self) -> usize {
        self.logical_size
    }

    pub fn fold_count(&self) -> u32 {
        self.fold_count
    }

    pub fn sub_block_count(&self) -> usize {
        self.sub_block_count
    }

    pub fn threads_per_block(&self) -> usize {
        self.threads_per_block
    }

    pub fn unit_cap(&self) -> usize {
        self.unit_cap
    }

    /// Logical index handled by `lane` of `sub_block`, or `None` for tail
    /// lanes past the end of the row.
    pub fn map_index(&self, sub_block: usize, lane: usize) -> Result<Option<usize>> {
        if sub_block >= self.sub_block_count || lane >= self.threads_per_block {
            return Err(Error::PlanCoordinates {
                sub_block,
                lane,
                sub_blocks: self.sub_block_count,
                lanes: self.threads_per_block,
            });
        }
        let index = sub_block * self.threads_per_block + lane;
        Ok((index < self.logical_size).then_some(index))
    }

    /// Contiguous logical range owned by `sub_block`; empty for blocks made
    /// entirely of tail lanes.
    pub fn block_range(&self, sub_block: usize) -> Range<usize> {
        let start = (sub_block * self.threads_per_block).min(self.logical_size);
        let end = ((sub_block + 1) * self.threads_per_block).min(self.logical_size);
        start..end
    }

    pub fn blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.sub_block_count).map(|b| self.block_range(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example_1280() {
        let p = plan_folding(1280, 1024).unwrap();
        assert_eq!((p.sub_block_count(), p.threads_per_block()), (2, 640));
        assert_eq!(p.fold_count(), 1);
        assert_eq!(p.map_index(1, 0).unwrap(), Some(640));
    }

    #[test]
    fn fits_without_folding() {
        let p = plan_folding(1024, 1024).unwrap();
        assert_eq!((p.sub_block_count(), p.threads_per_block()), (1, 1024));
        assert_eq!(p.map_index(0, 1023).unwrap(), Some(1023));
    }

    #[test]
    fn gpt3_width() {
        let p = plan_folding(12288, 1024).unwrap();
        assert_eq!((p.sub_block_count(), p.threads_per_block()), (16, 768));
    }

    #[test]
    fn uneven_tail() {
        let p = plan_folding(1030, 1024).unwrap();
        assert_eq!((p.sub_block_count(), p.threads_per_block()), (2, 515));
        assert_eq!(p.map_index(1, 514).unwrap(), Some(1029));

        let p = plan_folding(9, 2).unwrap();
        assert_eq!((p.sub_block_count(), p.threads_per_block()), (8, 2));
        assert_eq!(p.map_index(4, 0).unwrap(), Some(8));
        assert_eq!(p.map_index(4, 1).unwrap(), None);
        assert_eq!(p.map_index(7, 1).unwrap(), None);
        assert!(p.block_range(6).is_empty());
    }

    #[test]
    fn coordinates_outside_plan() {
        let p = plan_folding(1280, 1024).unwrap();
        assert!(p.map_index(2, 0).is_err());
        assert!(p.map_index(0, 640).is_err());
    }

    #[test]
    fn size_limits() {
        assert!(plan_folding(0, 1024).is_err());
        assert!(plan_folding(16385, 1024).is_err());
        assert!(plan_folding(16384, 1024).is_ok());
        assert!(FoldingPlan::for_sequence(4097).is_err());
        assert!(FoldingPlan::for_sequence(4096).is_ok());
        assert!(plan_folding(8, 0).is_err());
    }

    #[test]
    fn small_sizes_are_unfolded() {
        for s in 1..=1024 {
            let p = FoldingPlan::for_hidden(s).unwrap();
            assert_eq!((p.sub_block_count(), p.threads_per_block()), (1, s));
        }
    }

    proptest! {
        #[test]
        fn plan_invariants(size in 1usize..=16384, cap in 1usize..=2048) {
            let p = plan_folding(size, cap).unwrap();
            prop_assert!(p.sub_block_count().is_power_of_two());
            prop_assert!(p.threads_per_block() <= cap);
            prop_assert!(p.sub_block_count() * p.threads_per_block() >= size);
            if size > cap {
                prop_assert!(2 * p.threads_per_block() >= cap);
            }
            let covered: usize = p.blocks().map(|r| r.len()).sum();
            prop_assert_eq!(covered, size);
        }
    }
}
