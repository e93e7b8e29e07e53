//! Socket data plane: per-step registration on writer ranks, asynchronous
//! offset/length reads on reader ranks, and the two learned-preload modes.
//!
//! Reader rank `r` of a reader opens one connection to each writer rank it
//! reads from, on first use. Request/response traffic, preload pushes,
//! request-log publication and buffer releases all travel on that
//! connection.

mod reader;
mod writer;

use std::collections::BTreeMap;

pub use reader::{PreloadMatch, ReadHandle, ReaderPlane, ReaderPlaneStats};
pub use writer::{WriterPlane, WriterPlaneStats};

use crate::model::StepId;

/// Sorted, disjoint, non-adjacent byte ranges `(offset, length)`.
pub type Ranges = Vec<(u64, u64)>;

/// Per peer rank access pattern.
pub type Pattern = BTreeMap<u32, Ranges>;

/// Sorts ranges and merges overlapping or touching ones; drops empty ones.
pub fn normalize_ranges(input: impl IntoIterator<Item = (u64, u64)>) -> Ranges {
    let mut v: Vec<(u64, u64)> = input.into_iter().filter(|r| r.1 > 0).collect();
    v.sort_unstable();
    let mut out: Ranges = Vec::with_capacity(v.len());
    for (off, len) in v {
        match out.last_mut() {
            Some((o, l)) if off <= *o + *l => {
                let end = (*o + *l).max(off + len);
                *l = end - *o;
            }
            _ => out.push((off, len)),
        }
    }
    out
}

/// Total bytes covered by normalized ranges.
pub fn ranges_len(r: &Ranges) -> u64 {
    r.iter().map(|x| x.1).sum()
}

/// Position of `[offset, offset+length)` inside the concatenation of
/// `ranges`, if one range contains it.
pub fn locate(ranges: &Ranges, offset: u64, length: u64) -> Option<u64> {
    let mut pos = 0;
    for &(o, l) in ranges {
        if offset >= o && offset + length <= o + l {
            return Some(pos + offset - o);
        }
        pos += l;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub offset: u64,
    pub length: u64,
    /// Opaque destination token supplied by the caller.
    pub dest: u64,
}

const LOG_INITIAL_CAPACITY: usize = 4;

/// History of remote reads: step → writer rank → reads in issue order.
/// Pairs with no reads hold no allocation; a full list doubles.
#[derive(Debug, Default, Clone)]
pub struct RequestLog {
    steps: BTreeMap<StepId, BTreeMap<u32, Vec<LogEntry>>>,
}

impl RequestLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: StepId, writer_rank: u32, entry: LogEntry) {
        let list = self.steps.entry(step).or_default().entry(writer_rank).or_default();
        if list.len() == list.capacity() {
            let grow = list.capacity().max(LOG_INITIAL_CAPACITY);
            list.reserve_exact(grow);
        }
        list.push(entry);
    }

    pub fn entries(&self, step: StepId, writer_rank: u32) -> &[LogEntry] {
        self.steps
            .get(&step)
            .and_then(|m| m.get(&writer_rank))
            .map_or(&[], Vec::as_slice)
    }

    pub fn writers(&self, step: StepId) -> Vec<u32> {
        self.steps
            .get(&step)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn capacity(&self, step: StepId, writer_rank: u32) -> usize {
        self.steps
            .get(&step)
            .and_then(|m| m.get(&writer_rank))
            .map_or(0, Vec::capacity)
    }

    /// Normalized per-writer ranges read during `step`.
    pub fn pattern(&self, step: StepId) -> Pattern {
        self.steps
            .get(&step)
            .map(|m| {
                m.iter()
                    .map(|(&w, l)| (w, normalize_ranges(l.iter().map(|e| (e.offset, e.length)))))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Keeps only `step`'s history.
    pub fn retain_only(&mut self, step: StepId) {
        self.steps.retain(|s, _| *s == step);
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }

    pub fn steps(&self) -> Vec<StepId> {
        self.steps.keys().copied().collect()
    }
}
