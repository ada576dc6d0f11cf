use std::io::Write;

use serde::Serialize;

use super::pool::Scope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Scratch buffer requested from a pool.
    Request,
    /// Scratch buffer marked idle.
    Release,
    /// Up-front cache allocation.
    CacheAlloc,
    /// Unpooled allocation made by the reference path.
    FreshAlloc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    /// Memory was obtained from the system.
    New,
    /// An idle buffer was handed out again.
    Reused,
    /// No allocation decision (releases).
    None,
}

/// One line of the allocation record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AllocationEvent {
    pub event: EventKind,
    /// Requested element count.
    pub size: usize,
    /// Capacity of the buffer that served the request.
    pub capacity: usize,
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
    pub tag: String,
}

impl AllocationEvent {
    pub fn is_malloc(&self) -> bool {
        self.decision == Decision::New
    }
}

/// Append-only allocation history.
#[derive(Debug, Clone, Default)]
pub struct AllocationLog {
    events: Vec<AllocationEvent>,
}

impl AllocationLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, event: AllocationEvent) {
        self.events.push(event);
    }

    pub(crate) fn record_alloc(&mut self, kind: EventKind, size: usize, tag: &str) {
        self.record(AllocationEvent {
            event: kind,
            size,
            capacity: size,
            decision: Decision::New,
            scope: None,
            tag: tag.to_string(),
        });
    }

    pub fn events(&self) -> &[AllocationEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events recorded after the first `mark` events.
    pub fn since(&self, mark: usize) -> &[AllocationEvent] {
        &self.events[mark.min(self.events.len())..]
    }

    pub fn malloc_count(&self) -> usize {
        self.events.iter().filter(|e| e.is_malloc()).count()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.event == kind).count()
    }

    /// Writes one JSON object per event.
    pub fn write_json_lines<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for event in &self.events {
            serde_json::to_writer(&mut out, event)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
