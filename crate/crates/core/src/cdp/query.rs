//! Point-in-time retrieval over any quantum list, shared by the persistent
//! engine and the Plain-KV client.
//!
//! 1. Scan from the newest quantum for `Q_t`, the newest one whose first
//!    record is at or before `t`.
//! 2. If `Q_t` is summarized and `t` is at or past its last record, its
//!    summary is the answer. Otherwise continue backwards to the nearest
//!    summarized quantum `Q_s` older than `Q_t`.
//! 3. Start from `Q_s`'s summary (or an empty map when nothing was ever
//!    trimmed and no summary exists) and merge every record of the quanta
//!    between `Q_s` and `Q_t` in time order.
//! 4. Merge the records of `Q_t` whose timestamp is at most `t`.
//!
//! Only records overlapping the requested range are merged, and the result
//! is clipped to it.

use std::sync::Arc;

use super::{BlockMapping, CdpError, ManagedRange, MapEntry, QueryRange, RangeMap, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantumMeta {
    pub id: u64,
    pub count: u64,
    pub start_time: u64,
    pub end_time: u64,
    pub summarized: bool,
}

pub trait QuantumSource {
    /// Every quantum in the list, newest first.
    fn quanta_newest_first(&self) -> Result<Vec<QuantumMeta>>;
    fn summary(&self, id: u64) -> Result<Arc<Vec<MapEntry>>>;
    /// Calls `f` on the first `n` records of quantum `id` in order until it
    /// returns false.
    fn scan_records(&self, id: u64, n: u64, f: &mut dyn FnMut(&ManagedRange) -> bool) -> Result<()>;
    /// True once any quantum has been aged out.
    fn trimmed(&self) -> bool;
}

fn seed_from_summary(map: &mut RangeMap, summary: &[MapEntry], lo: u64, hi: u64) {
    let start = summary.partition_point(|e| e.end() <= lo);
    for e in &summary[start..] {
        if e.virtual_offset >= hi {
            break;
        }
        clip_merge(map, e.virtual_offset, e.length, e.managed_offset, lo, hi);
    }
}

fn clip_merge(map: &mut RangeMap, v: u64, len: u64, m: u64, lo: u64, hi: u64) {
    let s = v.max(lo);
    let e = (v + len).min(hi);
    if s < e {
        map.merge_into(s, e - s, m + (s - v));
    }
}

pub fn point_in_time(src: &dyn QuantumSource, t: u64, range: QueryRange) -> Result<BlockMapping> {
    let (lo, hi) = range.bounds();
    let list: Vec<QuantumMeta> = src.quanta_newest_first()?.into_iter().filter(|q| q.count > 0).collect();
    let horizon = || list.last().map_or(0, |q| q.end_time);
    let Some(it) = list.iter().position(|q| q.start_time <= t) else {
        return if src.trimmed() { Err(CdpError::HistoryTrimmed { horizon: horizon() }) } else { Ok(Vec::new()) };
    };
    let qt = list[it];
    let mut map = RangeMap::new();
    if qt.summarized && t >= qt.end_time {
        seed_from_summary(&mut map, &src.summary(qt.id)?, lo, hi);
        return Ok(map.entries_in(lo, hi));
    }
    let base = match list[it + 1..].iter().position(|q| q.summarized) {
        Some(j) => {
            let s = it + 1 + j;
            seed_from_summary(&mut map, &src.summary(list[s].id)?, lo, hi);
            s
        }
        None if src.trimmed() => return Err(CdpError::HistoryTrimmed { horizon: horizon() }),
        None => list.len(),
    };
    let mut merge = |r: &ManagedRange| {
        clip_merge(&mut map, r.virtual_offset, u64::from(r.length), r.managed_offset, lo, hi);
    };
    for q in list[it + 1..base].iter().rev() {
        src.scan_records(q.id, q.count, &mut |r| {
            merge(r);
            true
        })?;
    }
    src.scan_records(qt.id, qt.count, &mut |r| {
        if r.timestamp > t {
            return false;
        }
        merge(r);
        true
    })?;
    Ok(map.entries_in(lo, hi))
}
