//! Scratch buffer pool with scope-dependent reuse.
//!
//! Buffers are never returned to the system while the pool lives. A request
//! made within a module only takes an idle buffer of exactly the requested
//! size, which keeps a module's repeating request pattern from fragmenting
//! the list. A request that crosses modules takes the first idle buffer large
//! enough, so no new memory is allocated while any idle buffer fits.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use super::log::{AllocationEvent, AllocationLog, Decision, EventKind};
use crate::error::{Error, Result};

/// Tags used by the runtime.
pub mod tags {
    pub const QUERY: &str = "attention.query";
    pub const SCORES: &str = "attention.scores";
    pub const FFN_INNER: &str = "ffn.inner";
    pub const LOGITS: &str = "head.logits";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    WithinModule,
    AcrossModule,
}

#[derive(Debug)]
enum SlotState {
    Idle(Vec<f32>),
    InUse { lease: u64 },
}

#[derive(Debug)]
struct Slot {
    capacity: usize,
    tag: String,
    state: SlotState,
}

/// Live lease on a pool buffer. Owns the storage until released.
///
/// Releasing consumes the handle, so a handle cannot be released twice:
///
/// ```compile_fail
/// use maskfold_core::memory::{BufferPool, Scope};
/// let mut pool = BufferPool::new();
/// let h = pool.request(8, Scope::WithinModule, "x").unwrap();
/// pool.release(h).unwrap();
/// pool.release(h).unwrap();
/// ```
#[derive(Debug)]
pub struct BufferHandle {
    pool_id: u64,
    slot: usize,
    lease: u64,
    len: usize,
    data: Vec<f32>,
}

impl BufferHandle {
    /// Requested element count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    /// Contents are whatever the previous holder left behind.
    /// Handles from a virtual pool have no storage and yield empty slices.
    pub fn as_slice(&self) -> &[f32] {
        &self.data[..self.len.min(self.data.len())]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        let len = self.len.min(self.data.len());
        &mut self.data[..len]
    }
}

/// Snapshot derived from the allocation log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    /// Elements held by the pool, idle or not.
    pub total_capacity: usize,
    /// Largest capacity simultaneously leased.
    pub peak_in_use: usize,
    pub malloc_count: usize,
    pub reuse_count: usize,
}

static NEXT_POOL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct BufferPool {
    id: u64,
    slots: Vec<Slot>,
    log: AllocationLog,
    next_lease: u64,
    backed: bool,
}

impl Default for BufferPool {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn alloc_zeroed(len: usize) -> Result<Vec<f32>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len).map_err(|_| Error::Allocation(len))?;
    v.resize(len, 0.0);
    Ok(v)
}

impl BufferPool {
    pub fn new() -> Self {
        Self {
            id: NEXT_POOL_ID.fetch_add(1, Ordering::Relaxed),
            slots: Vec::new(),
            log: AllocationLog::new(),
            next_lease: 0,
            backed: true,
        }
    }

    /// A pool that runs the reuse policy and keeps the log but never touches
    /// memory. Used to account for configurations too large to run.
    pub fn virtual_pool() -> Self {
        Self {
            backed: false,
            ..Self::new()
        }
    }

    pub fn is_virtual(&self) -> bool {
        !self.backed
    }

    pub fn request(&mut self, size: usize, scope: Scope, tag: &str) -> Result<BufferHandle> {
        if size == 0 {
            return Err(Error::Allocation(0));
        }
        let reuse = self.slots.iter().position(|slot| {
            matches!(slot.state, SlotState::Idle(_))
                && match scope {
                    Scope::WithinModule => slot.capacity == size,
                    Scope::AcrossModule => slot.capacity >= size,
                }
        });
        let lease = self.next_lease;
        self.next_lease += 1;

        let (slot, data, decision) = match reuse {
            Some(index) => {
                let slot = &mut self.slots[index];
                let data = match std::mem::replace(&mut slot.state, SlotState::InUse { lease }) {
                    SlotState::Idle(data) => data,
                    SlotState::InUse { .. } => unreachable!("reuse picked a leased slot"),
                };
                slot.tag = tag.to_string();
                (index, data, Decision::Reused)
            }
            None => {
                let data = if self.backed { alloc_zeroed(size)? } else { Vec::new() };
                self.slots.push(Slot {
                    capacity: size,
                    tag: tag.to_string(),
                    state: SlotState::InUse { lease },
                });
                (self.slots.len() - 1, data, Decision::New)
            }
        };
        self.log.record(AllocationEvent {
            event: EventKind::Request,
            size,
            capacity: self.slots[slot].capacity,
            decision,
            scope: Some(scope),
            tag: tag.to_string(),
        });
        Ok(BufferHandle {
            pool_id: self.id,
            slot,
            lease,
            len: size,
            data,
        })
    }

    /// Marks the buffer idle. Fails for handles this pool did not issue.
    pub fn release(&mut self, handle: BufferHandle) -> Result<()> {
        let stale = Error::StaleHandle {
            slot: handle.slot,
            lease: handle.lease,
        };
        if handle.pool_id != self.id {
            return Err(stale);
        }
        let Some(slot) = self.slots.get_mut(handle.slot) else {
            return Err(stale);
        };
        match slot.state {
            SlotState::InUse { lease } if lease == handle.lease => {}
            _ => return Err(stale),
        }
        slot.state = SlotState::Idle(handle.data);
        self.log.record(AllocationEvent {
            event: EventKind::Release,
            size: handle.len,
            capacity: slot.capacity,
            decision: Decision::None,
            scope: None,
            tag: slot.tag.clone(),
        });
        Ok(())
    }

    pub fn total_capacity(&self) -> usize {
        self.slots.iter().map(|s| s.capacity).sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.slots.len()
    }

    pub fn in_use_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s.state, SlotState::InUse { .. }))
            .count()
    }

    /// Capacities of idle buffers in list order.
    pub fn idle_capacities(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter(|s| matches!(s.state, SlotState::Idle(_)))
            .map(|s| s.capacity)
            .collect()
    }

    pub fn log(&self) -> &AllocationLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut AllocationLog {
        &mut self.log
    }

    /// Replays the request/release history.
    pub fn stats(&self) -> PoolStats {
        let mut stats = PoolStats::default();
        let mut in_use = 0usize;
        for e in self.log.events() {
            match e.event {
                EventKind::Request => {
                    in_use += e.capacity;
                    stats.peak_in_use = stats.peak_in_use.max(in_use);
                    match e.decision {
                        Decision::New => {
                            stats.malloc_count += 1;
                            stats.total_capacity += e.capacity;
                        }
                        Decision::Reused => stats.reuse_count += 1,
                        Decision::None => {}
                    }
                }
                EventKind::Release => in_use -= e.capacity,
                EventKind::CacheAlloc | EventKind::FreshAlloc => {}
            }
        }
        stats
    }
}
