//! Brute-force reference for point-in-time queries: replay every update
//! with timestamp <= t into a flat per-block array, then read maximal
//! linear runs back out. Shares no code with the CDP engine.

use ados_core::cdp::{BlockMapping, MapEntry, QueryRange};

const UNMAPPED: u64 = u64::MAX;

#[derive(Clone, Copy, Debug)]
struct Write {
    timestamp: u64,
    virtual_offset: u64,
    length: u64,
    managed_offset: u64,
}

#[derive(Clone, Debug)]
pub struct Oracle {
    blocks: u64,
    history: Vec<Write>,
}

fn bounds(range: QueryRange, blocks: u64) -> (u64, u64) {
    match range {
        QueryRange::Full => (0, blocks),
        QueryRange::Blocks { virtual_offset, length } => {
            (virtual_offset.min(blocks), virtual_offset.saturating_add(length).min(blocks))
        }
    }
}

impl Oracle {
    pub fn new(blocks: u64) -> Oracle {
        Oracle { blocks, history: Vec::new() }
    }

    /// Records an update. Timestamps must not decrease.
    pub fn push(&mut self, timestamp: u64, virtual_offset: u64, length: u64, managed_offset: u64) {
        assert!(virtual_offset + length <= self.blocks, "update beyond the volume");
        if let Some(last) = self.history.last() {
            assert!(timestamp >= last.timestamp, "timestamps must not decrease");
        }
        self.history.push(Write { timestamp, virtual_offset, length, managed_offset });
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Keeps only the first `n` updates.
    pub fn truncate(&mut self, n: usize) {
        self.history.truncate(n);
    }

    /// Timestamp of update `i`.
    pub fn timestamp(&self, i: usize) -> u64 {
        self.history[i].timestamp
    }

    pub fn answer(&self, t: u64, range: QueryRange) -> BlockMapping {
        self.answer_many(&[(t, range)]).remove(0)
    }

    /// Answers many probes with a single replay, in probe order.
    pub fn answer_many(&self, probes: &[(u64, QueryRange)]) -> Vec<BlockMapping> {
        let mut order: Vec<usize> = (0..probes.len()).collect();
        order.sort_by_key(|&i| probes[i].0);
        let mut blocks = vec![UNMAPPED; self.blocks as usize];
        let mut applied = 0;
        let mut out = vec![Vec::new(); probes.len()];
        for i in order {
            let (t, range) = probes[i];
            while applied < self.history.len() && self.history[applied].timestamp <= t {
                let w = self.history[applied];
                for k in 0..w.length {
                    blocks[(w.virtual_offset + k) as usize] = w.managed_offset + k;
                }
                applied += 1;
            }
            let (lo, hi) = bounds(range, self.blocks);
            out[i] = runs(&blocks, lo, hi);
        }
        out
    }
}

fn runs(blocks: &[u64], lo: u64, hi: u64) -> BlockMapping {
    let mut out: BlockMapping = Vec::new();
    for v in lo..hi {
        let m = blocks[v as usize];
        if m == UNMAPPED {
            continue;
        }
        match out.last_mut() {
            Some(e) if e.virtual_offset + e.length == v && e.managed_offset + e.length == m => e.length += 1,
            _ => out.push(MapEntry { virtual_offset: v, length: 1, managed_offset: m }),
        }
    }
    out
}
