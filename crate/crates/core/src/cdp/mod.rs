//! Continuous data protection index: per-volume time quanta of 64-byte
//! mapping records, lazy summaries, point-in-time queries and age-out.
//!
//! The persistent engine ([`engine::CdpEngine`]) runs inside the ADO
//! plugin ([`plugin::CdpPlugin`]); [`plainkv`] performs the same logic on
//! the client over the plain key-value API.

pub mod engine;
pub mod heap;
pub mod local;
pub mod plainkv;
pub mod plugin;
pub mod query;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::pmem::PmemError;
use crate::store::StoreError;

pub const RECORD_SIZE: u64 = 64;

/// Records held by a quantum of `bytes` bytes.
pub const fn records_for_bytes(bytes: u64) -> u64 {
    bytes / RECORD_SIZE
}

pub const MIB: u64 = 1 << 20;

/// In-memory image of one persistent record; see [`ManagedRange::encode`]
/// for the byte layout.
#[repr(C, align(64))]
pub struct PersistentManagedRange {
    pub virtual_offset: u64,
    pub length: u32,
    pub reserved: u32,
    pub managed_offset: u64,
    pub timestamp: u64,
    pub sequence: u64,
    pub valid: u64,
    pub padding: [u64; 2],
}

const _: () = assert!(std::mem::size_of::<PersistentManagedRange>() == RECORD_SIZE as usize);
const _: () = assert!(records_for_bytes(4 * MIB) == 65_536);
const _: () = assert!(records_for_bytes(8 * MIB) == 131_072);
const _: () = assert!(records_for_bytes(16 * MIB) == 262_144);

pub const OFF_VALID: u64 = 40;

/// One block-range remapping as written by a volume update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ManagedRange {
    pub virtual_offset: u64,
    pub length: u32,
    pub managed_offset: u64,
    pub timestamp: u64,
    pub sequence: u64,
}

impl ManagedRange {
    /// Little-endian layout: virtual_offset u64 @0, length u32 @8,
    /// reserved u32 @12, managed_offset u64 @16, timestamp u64 @24,
    /// sequence u64 @32, valid u64 @40, zero padding to 64.
    pub fn encode(&self, valid: bool) -> [u8; 64] {
        let mut b = [0u8; 64];
        b[0..8].copy_from_slice(&self.virtual_offset.to_le_bytes());
        b[8..12].copy_from_slice(&self.length.to_le_bytes());
        b[16..24].copy_from_slice(&self.managed_offset.to_le_bytes());
        b[24..32].copy_from_slice(&self.timestamp.to_le_bytes());
        b[32..40].copy_from_slice(&self.sequence.to_le_bytes());
        b[40..48].copy_from_slice(&(valid as u64).to_le_bytes());
        b
    }

    /// Decodes a record and its valid word. Fails on nonzero reserved or
    /// padding bytes, or a valid word other than 0 or 1.
    pub fn decode(b: &[u8]) -> std::result::Result<(ManagedRange, bool), String> {
        if b.len() != 64 {
            return Err(format!("record of {} bytes", b.len()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let reserved = u32::from_le_bytes(b[12..16].try_into().unwrap());
        if reserved != 0 || b[48..].iter().any(|&x| x != 0) {
            return Err("nonzero reserved bytes".into());
        }
        let valid = match u64_at(40) {
            0 => false,
            1 => true,
            v => return Err(format!("valid word {v}")),
        };
        Ok((
            ManagedRange {
                virtual_offset: u64_at(0),
                length: u32::from_le_bytes(b[8..12].try_into().unwrap()),
                managed_offset: u64_at(16),
                timestamp: u64_at(24),
                sequence: u64_at(32),
            },
            valid,
        ))
    }

    pub fn end(&self) -> u64 {
        self.virtual_offset + u64::from(self.length)
    }

    pub fn key(&self) -> (u64, u64) {
        (self.timestamp, self.sequence)
    }
}

/// A contiguous virtual→managed mapping: block `virtual_offset + i` maps to
/// `managed_offset + i` for `i < length`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MapEntry {
    pub virtual_offset: u64,
    pub length: u64,
    pub managed_offset: u64,
}

impl MapEntry {
    pub fn end(&self) -> u64 {
        self.virtual_offset + self.length
    }
}

/// Query result: sorted, non-overlapping, maximal runs.
pub type BlockMapping = Vec<MapEntry>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryRange {
    Full,
    Blocks { virtual_offset: u64, length: u64 },
}

impl QueryRange {
    fn bounds(&self) -> (u64, u64) {
        match *self {
            QueryRange::Full => (0, u64::MAX),
            QueryRange::Blocks { virtual_offset, length } => (virtual_offset, virtual_offset.saturating_add(length)),
        }
    }
}

/// Sorted non-overlapping interval map keyed by virtual start block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RangeMap {
    map: BTreeMap<u64, (u64, u64)>,
}

impl RangeMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: &[MapEntry]) -> Self {
        let mut m = RangeMap::new();
        for e in entries {
            m.map.insert(e.virtual_offset, (e.length, e.managed_offset));
        }
        m
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Writes `[v, v+len) → m`, superseding overlapped parts of existing
    /// entries. Partially covered entries are split and their managed
    /// offsets shifted to keep the mapping linear.
    pub fn merge_into(&mut self, v: u64, len: u64, m: u64) {
        if len == 0 {
            return;
        }
        let end = v + len;
        let mut hits = Vec::new();
        if let Some((&s, &(l, mm))) = self.map.range(..v).next_back() {
            if s + l > v {
                hits.push((s, l, mm));
            }
        }
        hits.extend(self.map.range(v..end).map(|(&s, &(l, mm))| (s, l, mm)));
        for (s, l, mm) in hits {
            self.map.remove(&s);
            if s < v {
                self.map.insert(s, (v - s, mm));
            }
            if s + l > end {
                self.map.insert(end, (s + l - end, mm + (end - s)));
            }
        }
        self.map.insert(v, (len, m));
    }

    pub fn merge_record(&mut self, r: &ManagedRange) {
        self.merge_into(r.virtual_offset, u64::from(r.length), r.managed_offset);
    }

    /// Canonical entries clipped to `[lo, hi)`: adjacent entries that
    /// continue each other linearly are joined.
    pub fn entries_in(&self, lo: u64, hi: u64) -> BlockMapping {
        let mut out: BlockMapping = Vec::new();
        let first = match self.map.range(..=lo).next_back() {
            Some((&s, &(l, _))) if s + l > lo => s,
            _ => lo,
        };
        for (&s, &(l, m)) in self.map.range(first..hi) {
            let cs = s.max(lo);
            let ce = (s + l).min(hi);
            if cs >= ce {
                continue;
            }
            let e = MapEntry { virtual_offset: cs, length: ce - cs, managed_offset: m + (cs - s) };
            match out.last_mut() {
                Some(p) if p.end() == e.virtual_offset && p.managed_offset + p.length == e.managed_offset => {
                    p.length += e.length;
                }
                _ => out.push(e),
            }
        }
        out
    }

    pub fn entries(&self) -> BlockMapping {
        self.entries_in(0, u64::MAX)
    }

    pub fn restrict(&self, range: QueryRange) -> BlockMapping {
        let (lo, hi) = range.bounds();
        self.entries_in(lo, hi)
    }
}

#[derive(Debug, Error)]
pub enum CdpError {
    #[error("plugin heap needs {0} more bytes")]
    NeedMemory(u64),
    #[error("volume not found")]
    VolumeNotFound,
    #[error("history before {horizon} has been trimmed")]
    HistoryTrimmed { horizon: u64 },
    #[error("timestamp {got} precedes last timestamp {last}")]
    OrderingViolation { last: u64, got: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt CDP structure: {0}")]
    Corrupt(String),
    #[error("bad request: {0}")]
    Request(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<PmemError> for CdpError {
    fn from(e: PmemError) -> Self {
        CdpError::Store(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CdpError>;

/// Age-out policy. A tail quantum is removed when more than `count`
/// newer quanta exist, or when it ended more than `age_ns` before the
/// trim time. Zero disables a criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Retention {
    pub count: u64,
    pub age_ns: u64,
}

impl Default for Retention {
    fn default() -> Self {
        Retention { count: 10, age_ns: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeConfig {
    pub quantum_capacity: u64,
    pub retention: Retention,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig { quantum_capacity: records_for_bytes(4 * MIB), retention: Retention::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: u64, l: u64, m: u64) -> MapEntry {
        MapEntry { virtual_offset: v, length: l, managed_offset: m }
    }

    #[test]
    fn record_roundtrip() {
        let r = ManagedRange { virtual_offset: 7, length: 3, managed_offset: 99, timestamp: 5, sequence: 2 };
        let b = r.encode(true);
        assert_eq!(ManagedRange::decode(&b).unwrap(), (r, true));
        assert_eq!(u64::from_le_bytes(b[40..48].try_into().unwrap()), 1);
        let mut bad = b;
        bad[60] = 1;
        assert!(ManagedRange::decode(&bad).is_err());
    }

    #[test]
    fn merge_into_empty() {
        let mut m = RangeMap::new();
        m.merge_into(0, 10, 0);
        assert_eq!(m.entries(), vec![e(0, 10, 0)]);
    }

    #[test]
    fn exact_cover_replaces() {
        let mut m = RangeMap::new();
        m.merge_into(4, 4, 100);
        m.merge_into(4, 4, 200);
        assert_eq!(m.entries(), vec![e(4, 4, 200)]);
    }

    #[test]
    fn bisect_splits_linearly() {
        let mut m = RangeMap::new();
        m.merge_into(0, 10, 0);
        m.merge_into(5, 3, 100);
        assert_eq!(m.entries(), vec![e(0, 5, 0), e(5, 3, 100), e(8, 2, 8)]);
    }

    #[test]
    fn clip_to_subrange() {
        let mut m = RangeMap::new();
        m.merge_into(0, 100, 0);
        m.merge_into(100, 100, 500);
        let r = m.restrict(QueryRange::Blocks { virtual_offset: 90, length: 20 });
        assert_eq!(r, vec![e(90, 10, 90), e(100, 10, 500)]);
    }

    #[test]
    fn adjacent_linear_runs_coalesce() {
        let mut m = RangeMap::new();
        m.merge_into(0, 5, 0);
        m.merge_into(5, 5, 5);
        m.merge_into(10, 5, 50);
        assert_eq!(m.entries(), vec![e(0, 10, 0), e(10, 5, 50)]);
    }

    #[test]
    fn overlap_spanning_several_entries() {
        let mut m = RangeMap::new();
        for i in 0..10 {
            m.merge_into(i * 10, 10, 1000 * i);
        }
        m.merge_into(15, 60, 7);
        assert_eq!(
            m.entries(),
            vec![e(0, 10, 0), e(10, 5, 1000), e(15, 60, 7), e(75, 5, 7005), e(80, 10, 8000), e(90, 10, 9000)]
        );
    }
}
