//! Persistent CDP structures and their operations.
//!
//! ```text
//! volume root (value of the volume tag pair, 128 B)
//!   +0 magic "CDPVOL01"  +8 head  +16 tail  +24 current  +32 next_sequence
//!   +40 quantum_capacity  +48 retention_count  +56 retention_age_ns
//!   +64 quantum_count  +72 last_timestamp  +80 next_ordinal  +88 trimmed
//!
//! quantum header (128 B, plugin heap)
//!   +0 magic "CDPQUAN1"  +8 state  +16 capacity  +24 count  +32 start_time
//!   +40 end_time  +48 records  +56 summary  +64 prev (older)  +72 next (newer)
//!   +80 ordinal
//!
//! summary blob (plugin heap)
//!   +0 magic "CDPSUMM1"  +8 count  +16 as_of  +32 { virtual u64, length u64,
//!   managed u64 } x count
//! ```
//!
//! `head` is the newest quantum and always the OPEN one (`current`).
//! Appending a record writes its payload, persists it, then publishes it
//! with an atomic store of the valid word followed by an atomic store of
//! the quantum's count. Linking, sealing, summary installation and trim
//! each run in one undo-logged transaction. Operations that need plugin
//! heap space fail with [`CdpError::NeedMemory`] before changing anything.

use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::heap::ChunkHeap;
use super::query::{point_in_time, QuantumMeta, QuantumSource};
use super::{BlockMapping, CdpError, ManagedRange, MapEntry, QueryRange, RangeMap, Result, Retention, VolumeConfig};
use super::{OFF_VALID, RECORD_SIZE};
use crate::pmem::{PersistentRegion, NIL};

pub const VOLUME_ROOT_BYTES: u64 = 128;
const VOL_MAGIC: u64 = u64::from_le_bytes(*b"CDPVOL01");
const V_HEAD: u64 = 8;
const V_TAIL: u64 = 16;
const V_CURRENT: u64 = 24;
const V_NEXT_SEQ: u64 = 32;
const V_CAPACITY: u64 = 40;
const V_RET_COUNT: u64 = 48;
const V_RET_AGE: u64 = 56;
const V_QCOUNT: u64 = 64;
const V_LAST_TS: u64 = 72;
const V_NEXT_ORD: u64 = 80;
const V_TRIMMED: u64 = 88;

const QUANTUM_HEADER: u64 = 128;
const Q_MAGIC: u64 = u64::from_le_bytes(*b"CDPQUAN1");
const Q_STATE: u64 = 8;
const Q_CAPACITY: u64 = 16;
const Q_COUNT: u64 = 24;
const Q_START: u64 = 32;
const Q_END: u64 = 40;
const Q_RECORDS: u64 = 48;
const Q_SUMMARY: u64 = 56;
const Q_PREV: u64 = 64;
const Q_NEXT: u64 = 72;
const Q_ORDINAL: u64 = 80;

const S_MAGIC: u64 = u64::from_le_bytes(*b"CDPSUMM1");
const S_HEADER: u64 = 32;
const S_ENTRY: u64 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum QuantumState {
    Open = 1,
    Sealed = 2,
    Summarized = 3,
}

impl QuantumState {
    fn from_word(w: u64) -> Result<Self> {
        match w {
            1 => Ok(QuantumState::Open),
            2 => Ok(QuantumState::Sealed),
            3 => Ok(QuantumState::Summarized),
            s => Err(CdpError::Corrupt(format!("quantum state {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateOutcome {
    pub sequence: u64,
    /// Quantum sealed by this update, if the eager seal happened.
    pub sealed: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VolumeStats {
    pub quanta: u64,
    pub sealed: u64,
    pub summarized: u64,
    pub records: u64,
    pub trimmed: u64,
    pub open_count: u64,
}

#[derive(Clone, Copy, Debug)]
struct Quantum {
    at: u64,
    state: QuantumState,
    capacity: u64,
    count: u64,
    start_time: u64,
    end_time: u64,
    records: u64,
    summary: u64,
    prev: u64,
    next: u64,
    ordinal: u64,
}

fn read_quantum(r: &PersistentRegion, at: u64) -> Result<Quantum> {
    let h = r.read(at, QUANTUM_HEADER)?;
    let w = |o: u64| u64::from_le_bytes(h[o as usize..o as usize + 8].try_into().unwrap());
    if w(0) != Q_MAGIC {
        return Err(CdpError::Corrupt(format!("no quantum at {at:#x}")));
    }
    let q = Quantum {
        at,
        state: QuantumState::from_word(w(Q_STATE))?,
        capacity: w(Q_CAPACITY),
        count: w(Q_COUNT),
        start_time: w(Q_START),
        end_time: w(Q_END),
        records: w(Q_RECORDS),
        summary: w(Q_SUMMARY),
        prev: w(Q_PREV),
        next: w(Q_NEXT),
        ordinal: w(Q_ORDINAL),
    };
    if q.capacity == 0 || q.count > q.capacity {
        return Err(CdpError::Corrupt(format!("quantum {at:#x} count {} capacity {}", q.count, q.capacity)));
    }
    Ok(q)
}

fn read_record(r: &PersistentRegion, q: &Quantum, i: u64) -> Result<(ManagedRange, bool)> {
    ManagedRange::decode(r.read(q.records + i * RECORD_SIZE, RECORD_SIZE)?)
        .map_err(|e| CdpError::Corrupt(format!("quantum {} record {i}: {e}", q.ordinal)))
}

/// Times of the first and last committed record.
fn record_times(r: &PersistentRegion, q: &Quantum) -> Result<(u64, u64)> {
    if q.count == 0 {
        return Ok((u64::MAX, 0));
    }
    Ok((read_record(r, q, 0)?.0.timestamp, read_record(r, q, q.count - 1)?.0.timestamp))
}

fn read_summary(r: &PersistentRegion, at: u64) -> Result<Vec<MapEntry>> {
    if r.read_u64(at)? != S_MAGIC {
        return Err(CdpError::Corrupt(format!("no summary at {at:#x}")));
    }
    let n = r.read_u64(at + 8)?;
    let raw = r.read(at + S_HEADER, n * S_ENTRY)?;
    Ok(raw
        .chunks_exact(S_ENTRY as usize)
        .map(|c| {
            let w = |o: usize| u64::from_le_bytes(c[o..o + 8].try_into().unwrap());
            MapEntry { virtual_offset: w(0), length: w(8), managed_offset: w(16) }
        })
        .collect())
}

fn summary_bytes(count: u64) -> u64 {
    S_HEADER + count * S_ENTRY
}

fn root_word(r: &PersistentRegion, root: u64, off: u64) -> Result<u64> {
    Ok(r.read_u64(root + off)?)
}

pub fn is_volume_root(r: &PersistentRegion, root: u64) -> bool {
    r.read_u64(root).map(|m| m == VOL_MAGIC).unwrap_or(false)
}

fn check_root(r: &PersistentRegion, root: u64) -> Result<()> {
    if is_volume_root(r, root) {
        Ok(())
    } else {
        Err(CdpError::VolumeNotFound)
    }
}

/// Summary computation detached from the region so it can run without
/// holding the pool.
pub struct SummaryJob {
    root: u64,
    quantum: u64,
    base: Arc<Vec<MapEntry>>,
    records: Vec<ManagedRange>,
    as_of: u64,
}

pub struct ComputedSummary {
    root: u64,
    quantum: u64,
    entries: Arc<Vec<MapEntry>>,
    as_of: u64,
}

impl SummaryJob {
    pub fn compute(self) -> ComputedSummary {
        let mut map = RangeMap::from_entries(&self.base);
        for r in &self.records {
            map.merge_record(r);
        }
        ComputedSummary { root: self.root, quantum: self.quantum, entries: Arc::new(map.entries()), as_of: self.as_of }
    }
}

#[derive(Default)]
struct VolCache {
    next_sequence: u64,
    last_timestamp: u64,
    last_summary: Option<(u64, Arc<Vec<MapEntry>>)>,
}

/// Volatile engine state: the plugin heap and per-volume caches. All
/// durable state lives in the region.
#[derive(Default)]
pub struct CdpEngine {
    heap: ChunkHeap,
    volumes: HashMap<u64, VolCache>,
    pending_summary: Option<ComputedSummary>,
}

impl CdpEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Approximate DRAM held by caches, the heap free lists and any
    /// summary awaiting memory.
    pub fn volatile_bytes(&self) -> u64 {
        let entry = std::mem::size_of::<MapEntry>() as u64;
        let caches: u64 = self
            .volumes
            .values()
            .map(|c| std::mem::size_of::<VolCache>() as u64 + c.last_summary.as_ref().map_or(0, |s| s.1.len() as u64 * entry))
            .sum();
        let pending = self.pending_summary.as_ref().map_or(0, |p| p.entries.len() as u64 * entry);
        caches + pending + self.heap.volatile_bytes()
    }

    pub fn heap(&self) -> &ChunkHeap {
        &self.heap
    }

    pub fn add_chunk(&mut self, r: &mut PersistentRegion, pair: u64, offset: u64, len: u64) -> Result<()> {
        self.heap.add_chunk(r, pair, offset, len)
    }

    /// Rebuilds volatile state after a restart: reloads the chunk list,
    /// repairs each volume's OPEN quantum count and claims every reachable
    /// object in the plugin heap.
    pub fn recover(&mut self, r: &mut PersistentRegion, heap_pair: Option<u64>, roots: &[u64]) -> Result<()> {
        self.heap = match heap_pair {
            Some(p) => ChunkHeap::load(r, p)?,
            None => ChunkHeap::new(),
        };
        self.volumes.clear();
        self.pending_summary = None;
        for &root in roots {
            if !is_volume_root(r, root) {
                continue;
            }
            let head = read_quantum(r, root_word(r, root, V_HEAD)?)?;
            let mut count = head.count;
            while count < head.capacity && read_record(r, &head, count)?.1 {
                count += 1;
            }
            if count != head.count {
                r.atomic_store_64(head.at + Q_COUNT, count)?;
            }
            for q in self.walk(r, root)? {
                self.heap.mark_used(q.at, QUANTUM_HEADER)?;
                self.heap.mark_used(q.records, q.capacity * RECORD_SIZE)?;
                if q.summary != NIL {
                    let n = r.read_u64(q.summary + 8)?;
                    self.heap.mark_used(q.summary, summary_bytes(n))?;
                }
            }
        }
        Ok(())
    }

    /// Quanta from tail (oldest) to head.
    fn walk(&self, r: &PersistentRegion, root: u64) -> Result<Vec<Quantum>> {
        let n = root_word(r, root, V_QCOUNT)?;
        let mut out = Vec::with_capacity(n as usize);
        let mut at = root_word(r, root, V_TAIL)?;
        while at != NIL {
            if out.len() as u64 >= n {
                return Err(CdpError::Corrupt("quantum list longer than its count".into()));
            }
            let q = read_quantum(r, at)?;
            at = q.next;
            out.push(q);
        }
        Ok(out)
    }

    fn cache(&mut self, r: &PersistentRegion, root: u64) -> Result<&mut VolCache> {
        if let std::collections::hash_map::Entry::Vacant(e) = self.volumes.entry(root) {
            let head = read_quantum(r, root_word(r, root, V_HEAD)?)?;
            let mut c = VolCache {
                next_sequence: root_word(r, root, V_NEXT_SEQ)?,
                last_timestamp: root_word(r, root, V_LAST_TS)?,
                last_summary: None,
            };
            if head.count > 0 {
                let (last, _) = read_record(r, &head, head.count - 1)?;
                c.next_sequence = last.sequence + 1;
                c.last_timestamp = last.timestamp;
            }
            e.insert(c);
        }
        Ok(self.volumes.get_mut(&root).expect("inserted above"))
    }

    /// Allocates and formats a detached OPEN quantum. Returns the header
    /// and records offsets.
    fn new_quantum(&mut self, r: &mut PersistentRegion, capacity: u64, ordinal: u64, prev: u64) -> Result<(u64, u64)> {
        let rec_bytes = capacity * RECORD_SIZE;
        let need = QUANTUM_HEADER + rec_bytes + 128;
        let Some(hdr) = self.heap.alloc(QUANTUM_HEADER) else {
            return Err(CdpError::NeedMemory(need));
        };
        let Some(records) = self.heap.alloc(rec_bytes) else {
            self.heap.free(hdr, QUANTUM_HEADER);
            return Err(CdpError::NeedMemory(need));
        };
        r.fill(records, rec_bytes, 0)?;
        r.persist(records, rec_bytes)?;
        let mut h = [0u8; QUANTUM_HEADER as usize];
        for (o, v) in [
            (0, Q_MAGIC),
            (Q_STATE, QuantumState::Open as u64),
            (Q_CAPACITY, capacity),
            (Q_START, u64::MAX),
            (Q_RECORDS, records),
            (Q_PREV, prev),
            (Q_ORDINAL, ordinal),
        ] {
            h[o as usize..o as usize + 8].copy_from_slice(&v.to_le_bytes());
        }
        r.write(hdr, &h)?;
        r.persist(hdr, QUANTUM_HEADER)?;
        Ok((hdr, records))
    }

    /// Formats a volume root in the zeroed value at `root` and links its
    /// first quantum. The magic is stored last.
    pub fn init_volume(&mut self, r: &mut PersistentRegion, root: u64, config: VolumeConfig) -> Result<()> {
        if is_volume_root(r, root) {
            return Ok(());
        }
        if config.quantum_capacity == 0 {
            return Err(CdpError::InvalidArgument("quantum capacity 0".into()));
        }
        let (q, _) = self.new_quantum(r, config.quantum_capacity, 0, NIL)?;
        let mut v = [0u8; VOLUME_ROOT_BYTES as usize];
        for (o, x) in [
            (V_HEAD, q),
            (V_TAIL, q),
            (V_CURRENT, q),
            (V_NEXT_SEQ, 1),
            (V_CAPACITY, config.quantum_capacity),
            (V_RET_COUNT, config.retention.count),
            (V_RET_AGE, config.retention.age_ns),
            (V_QCOUNT, 1),
            (V_NEXT_ORD, 1),
        ] {
            v[o as usize..o as usize + 8].copy_from_slice(&x.to_le_bytes());
        }
        r.write(root, &v)?;
        r.persist(root, VOLUME_ROOT_BYTES)?;
        r.atomic_store_64(root, VOL_MAGIC)?;
        self.volumes.remove(&root);
        Ok(())
    }

    pub fn config(&self, r: &PersistentRegion, root: u64) -> Result<VolumeConfig> {
        check_root(r, root)?;
        Ok(VolumeConfig {
            quantum_capacity: root_word(r, root, V_CAPACITY)?,
            retention: Retention { count: root_word(r, root, V_RET_COUNT)?, age_ns: root_word(r, root, V_RET_AGE)? },
        })
    }

    /// Changes the capacity used for future quanta and the retention
    /// policy.
    pub fn configure(&mut self, r: &mut PersistentRegion, root: u64, config: VolumeConfig) -> Result<()> {
        check_root(r, root)?;
        if config.quantum_capacity == 0 {
            return Err(CdpError::InvalidArgument("quantum capacity 0".into()));
        }
        let mut b = [0u8; 24];
        b[..8].copy_from_slice(&config.quantum_capacity.to_le_bytes());
        b[8..16].copy_from_slice(&config.retention.count.to_le_bytes());
        b[16..].copy_from_slice(&config.retention.age_ns.to_le_bytes());
        r.transaction(|r| r.tx_write(root + V_CAPACITY, &b))?;
        Ok(())
    }

    /// Appends one record. A full OPEN quantum left by an earlier update is
    /// sealed first; a quantum filled by this update is sealed eagerly when
    /// heap space allows.
    pub fn update(
        &mut self,
        r: &mut PersistentRegion,
        root: u64,
        virtual_offset: u64,
        length: u64,
        managed_offset: u64,
        timestamp: u64,
    ) -> Result<UpdateOutcome> {
        check_root(r, root)?;
        if length == 0 || length > u64::from(u32::MAX) {
            return Err(CdpError::InvalidArgument(format!("length {length}")));
        }
        if virtual_offset.checked_add(length).is_none() || managed_offset.checked_add(length).is_none() {
            return Err(CdpError::InvalidArgument("range overflows".into()));
        }
        let last = self.cache(r, root)?.last_timestamp;
        if timestamp < last {
            return Err(CdpError::OrderingViolation { last, got: timestamp });
        }
        let mut head = read_quantum(r, root_word(r, root, V_HEAD)?)?;
        if head.count == head.capacity {
            self.seal(r, root)?;
            head = read_quantum(r, root_word(r, root, V_HEAD)?)?;
        }
        let cache = self.cache(r, root)?;
        let rec = ManagedRange {
            virtual_offset,
            length: length as u32,
            managed_offset,
            timestamp,
            sequence: cache.next_sequence,
        };
        let slot = head.records + head.count * RECORD_SIZE;
        r.write(slot, &rec.encode(false)[..OFF_VALID as usize])?;
        r.persist(slot, OFF_VALID)?;
        r.atomic_store_64(slot + OFF_VALID, 1)?;
        r.atomic_store_64(head.at + Q_COUNT, head.count + 1)?;
        let cache = self.cache(r, root)?;
        cache.next_sequence += 1;
        cache.last_timestamp = timestamp;
        let mut out = UpdateOutcome { sequence: rec.sequence, sealed: None };
        if head.count + 1 == head.capacity {
            match self.seal(r, root) {
                Ok(q) => out.sealed = Some(q),
                Err(CdpError::NeedMemory(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Seals the head quantum if it is full (an eager seal that found no
    /// heap space leaves it so).
    pub fn seal_if_full(&mut self, r: &mut PersistentRegion, root: u64) -> Result<Option<u64>> {
        check_root(r, root)?;
        let head = read_quantum(r, root_word(r, root, V_HEAD)?)?;
        if head.count < head.capacity {
            return Ok(None);
        }
        self.seal(r, root).map(Some)
    }

    /// Timestamp of the newest record, used as the clock for age-based
    /// trimming in the background.
    pub fn last_timestamp(&mut self, r: &PersistentRegion, root: u64) -> Result<u64> {
        check_root(r, root)?;
        Ok(self.cache(r, root)?.last_timestamp)
    }

    /// Seals the full head quantum and links a fresh OPEN one in a single
    /// transaction. Returns the sealed quantum.
    fn seal(&mut self, r: &mut PersistentRegion, root: u64) -> Result<u64> {
        let old = read_quantum(r, root_word(r, root, V_HEAD)?)?;
        debug_assert_eq!(old.count, old.capacity);
        let capacity = root_word(r, root, V_CAPACITY)?;
        let ordinal = root_word(r, root, V_NEXT_ORD)?;
        let (new, new_records) = self.new_quantum(r, capacity, ordinal, old.at)?;
        let (start, end) = record_times(r, &old)?;
        let (next_seq, last_ts) = {
            let c = self.cache(r, root)?;
            (c.next_sequence, c.last_timestamp)
        };
        let qcount = root_word(r, root, V_QCOUNT)?;
        let res = r.transaction(|r| {
            r.tx_write_u64(old.at + Q_STATE, QuantumState::Sealed as u64)?;
            r.tx_write_u64(old.at + Q_START, start)?;
            r.tx_write_u64(old.at + Q_END, end)?;
            r.tx_write_u64(old.at + Q_NEXT, new)?;
            r.tx_write_u64(root + V_HEAD, new)?;
            r.tx_write_u64(root + V_CURRENT, new)?;
            r.tx_write_u64(root + V_NEXT_SEQ, next_seq)?;
            r.tx_write_u64(root + V_QCOUNT, qcount + 1)?;
            r.tx_write_u64(root + V_LAST_TS, last_ts)?;
            r.tx_write_u64(root + V_NEXT_ORD, ordinal + 1)
        });
        if let Err(e) = res {
            self.heap.free(new, QUANTUM_HEADER);
            self.heap.free(new_records, capacity * RECORD_SIZE);
            return Err(e.into());
        }
        Ok(old.at)
    }

    /// Oldest SEALED quantum ready to summarize, with everything needed to
    /// compute its summary off the region.
    pub fn prepare_summary(&mut self, r: &PersistentRegion, root: u64) -> Result<Option<SummaryJob>> {
        check_root(r, root)?;
        let Some(q) = self.walk(r, root)?.into_iter().find(|q| q.state == QuantumState::Sealed) else {
            return Ok(None);
        };
        let base = if q.prev == NIL {
            Arc::new(Vec::new())
        } else {
            let p = read_quantum(r, q.prev)?;
            if p.state != QuantumState::Summarized {
                return Err(CdpError::Corrupt("sealed quantum follows an unsummarized one".into()));
            }
            self.summary_of(r, root, &p)?
        };
        let mut records = Vec::with_capacity(q.count as usize);
        for i in 0..q.count {
            records.push(read_record(r, &q, i)?.0);
        }
        Ok(Some(SummaryJob { root, quantum: q.at, base, records, as_of: q.end_time }))
    }

    fn summary_of(&mut self, r: &PersistentRegion, root: u64, q: &Quantum) -> Result<Arc<Vec<MapEntry>>> {
        if let Some(c) = self.volumes.get(&root) {
            if let Some((at, s)) = &c.last_summary {
                if *at == q.at {
                    return Ok(s.clone());
                }
            }
        }
        Ok(Arc::new(read_summary(r, q.summary)?))
    }

    /// Writes a computed summary and marks its quantum SUMMARIZED.
    pub fn commit_summary(&mut self, r: &mut PersistentRegion, s: ComputedSummary) -> Result<()> {
        let q = read_quantum(r, s.quantum)?;
        if q.state != QuantumState::Sealed {
            return Ok(());
        }
        let n = s.entries.len() as u64;
        let Some(blob) = self.heap.alloc(summary_bytes(n)) else {
            let need = summary_bytes(n) + 128;
            self.pending_summary = Some(s);
            return Err(CdpError::NeedMemory(need));
        };
        let mut raw = Vec::with_capacity(summary_bytes(n) as usize);
        for w in [S_MAGIC, n, s.as_of, 0] {
            raw.extend_from_slice(&w.to_le_bytes());
        }
        for e in s.entries.iter() {
            for w in [e.virtual_offset, e.length, e.managed_offset] {
                raw.extend_from_slice(&w.to_le_bytes());
            }
        }
        r.write(blob, &raw)?;
        r.persist(blob, raw.len() as u64)?;
        let res = r.transaction(|r| {
            r.tx_write_u64(q.at + Q_SUMMARY, blob)?;
            r.tx_write_u64(q.at + Q_STATE, QuantumState::Summarized as u64)
        });
        if let Err(e) = res {
            self.heap.free(blob, summary_bytes(n));
            return Err(e.into());
        }
        if let Some(c) = self.volumes.get_mut(&s.root) {
            c.last_summary = Some((q.at, s.entries));
        }
        Ok(())
    }

    /// Summarizes every SEALED quantum of the volume, oldest first.
    pub fn summarize_all(&mut self, r: &mut PersistentRegion, root: u64) -> Result<usize> {
        let mut done = 0;
        if let Some(p) = self.pending_summary.take() {
            self.commit_summary(r, p)?;
            done += 1;
        }
        while let Some(job) = self.prepare_summary(r, root)? {
            self.commit_summary(r, job.compute())?;
            done += 1;
        }
        Ok(done)
    }

    /// Ages out tail quanta per the volume's retention policy. A tail is
    /// only removed once its successor is summarized, and the OPEN quantum
    /// is never removed.
    pub fn trim(&mut self, r: &mut PersistentRegion, root: u64, now: u64) -> Result<u64> {
        check_root(r, root)?;
        let ret = self.config(r, root)?.retention;
        let mut trimmed = 0;
        loop {
            let tail = read_quantum(r, root_word(r, root, V_TAIL)?)?;
            if tail.next == NIL {
                break;
            }
            let next = read_quantum(r, tail.next)?;
            if next.state != QuantumState::Summarized {
                break;
            }
            let qcount = root_word(r, root, V_QCOUNT)?;
            let by_count = ret.count > 0 && qcount > ret.count + 1;
            let by_age = ret.age_ns > 0 && tail.end_time.saturating_add(ret.age_ns) < now;
            if !(by_count || by_age) {
                break;
            }
            let total = root_word(r, root, V_TRIMMED)?;
            r.transaction(|r| {
                r.tx_write_u64(next.at + Q_PREV, NIL)?;
                r.tx_write_u64(root + V_TAIL, next.at)?;
                r.tx_write_u64(root + V_QCOUNT, qcount - 1)?;
                r.tx_write_u64(root + V_TRIMMED, total + 1)
            })?;
            if tail.summary != NIL {
                let n = r.read_u64(tail.summary + 8)?;
                self.heap.free(tail.summary, summary_bytes(n));
            }
            self.heap.free(tail.records, tail.capacity * RECORD_SIZE);
            self.heap.free(tail.at, QUANTUM_HEADER);
            trimmed += 1;
        }
        Ok(trimmed)
    }

    pub fn query(&mut self, r: &PersistentRegion, root: u64, t: u64, range: QueryRange) -> Result<BlockMapping> {
        check_root(r, root)?;
        let cached = self.volumes.get(&root).and_then(|c| c.last_summary.clone());
        point_in_time(&RegionSource { r, root, cached }, t, range)
    }

    pub fn stats(&self, r: &PersistentRegion, root: u64) -> Result<VolumeStats> {
        check_root(r, root)?;
        let mut s = VolumeStats { trimmed: root_word(r, root, V_TRIMMED)?, ..Default::default() };
        for q in self.walk(r, root)? {
            s.quanta += 1;
            s.records += q.count;
            match q.state {
                QuantumState::Open => s.open_count = q.count,
                QuantumState::Sealed => s.sealed += 1,
                QuantumState::Summarized => s.summarized += 1,
            }
        }
        Ok(s)
    }

    /// Every committed record, oldest first.
    pub fn records(&self, r: &PersistentRegion, root: u64) -> Result<Vec<ManagedRange>> {
        check_root(r, root)?;
        let mut out = Vec::new();
        for q in self.walk(r, root)? {
            for i in 0..q.count {
                out.push(read_record(r, &q, i)?.0);
            }
        }
        Ok(out)
    }

    /// Full structural sweep of one volume: list links and count, state
    /// ordering, record well-formedness and ordering, uncommitted slots
    /// empty of valid words, summaries canonical and equal to a replay.
    pub fn check_volume(&self, r: &PersistentRegion, root: u64) -> Result<VolumeStats> {
        let bad = |m: String| Err(CdpError::Corrupt(m));
        check_root(r, root)?;
        let list = self.walk(r, root)?;
        let qcount = root_word(r, root, V_QCOUNT)?;
        if list.len() as u64 != qcount {
            return bad(format!("list has {} quanta, root says {qcount}", list.len()));
        }
        let head = root_word(r, root, V_HEAD)?;
        if list.last().map(|q| q.at) != Some(head) || root_word(r, root, V_CURRENT)? != head {
            return bad("head/current do not end the list".into());
        }
        if list[0].prev != NIL {
            return bad("tail has a predecessor".into());
        }
        let mut prev_key = None;
        let mut prev_state = QuantumState::Summarized;
        for (i, q) in list.iter().enumerate() {
            if i > 0 && (q.prev != list[i - 1].at || q.ordinal != list[i - 1].ordinal + 1) {
                return bad(format!("broken link at quantum {}", q.ordinal));
            }
            let is_head = i + 1 == list.len();
            if is_head != (q.state == QuantumState::Open) {
                return bad(format!("quantum {} in state {:?}", q.ordinal, q.state));
            }
            if q.state > prev_state {
                return bad(format!("quantum {} summarized after a sealed one", q.ordinal));
            }
            prev_state = q.state;
            if !is_head && q.count != q.capacity {
                return bad(format!("sealed quantum {} not full", q.ordinal));
            }
            for s in 0..q.capacity {
                let (rec, valid) = read_record(r, q, s)?;
                if valid != (s < q.count) {
                    return bad(format!("quantum {} slot {s} valid={valid} count={}", q.ordinal, q.count));
                }
                if !valid {
                    continue;
                }
                if rec.length == 0 {
                    return bad("zero-length record".into());
                }
                if prev_key.is_some_and(|k| k >= rec.key()) {
                    return bad(format!("records out of order in quantum {}", q.ordinal));
                }
                prev_key = Some(rec.key());
            }
            if q.state != QuantumState::Open {
                let (start, end) = record_times(r, q)?;
                if (start, end) != (q.start_time, q.end_time) {
                    return bad(format!("quantum {} time bounds stale", q.ordinal));
                }
            }
            if (q.state == QuantumState::Summarized) != (q.summary != NIL) {
                return bad(format!("quantum {} summary pointer vs state", q.ordinal));
            }
        }
        // Summaries must equal a replay from the oldest retained summary.
        let mut map = (root_word(r, root, V_TRIMMED)? == 0).then(RangeMap::new);
        for q in &list {
            if let Some(m) = map.as_mut() {
                for i in 0..q.count {
                    m.merge_record(&read_record(r, q, i)?.0);
                }
            }
            if q.state == QuantumState::Summarized {
                let s = read_summary(r, q.summary)?;
                let expect = match &map {
                    Some(m) => m.entries(),
                    None => RangeMap::from_entries(&s).entries(),
                };
                if expect != s {
                    return bad(format!("summary of quantum {} differs from replay", q.ordinal));
                }
                map = Some(RangeMap::from_entries(&s));
            }
        }
        self.stats(r, root)
    }

    /// SHA-256 of the volume's logical state: configuration, trim count,
    /// and for each quantum its ordinal, state, committed records and
    /// summary entries.
    pub fn volume_digest(&self, r: &PersistentRegion, root: u64) -> Result<[u8; 32]> {
        check_root(r, root)?;
        let mut h = Sha256::new();
        for o in [V_CAPACITY, V_RET_COUNT, V_RET_AGE, V_TRIMMED] {
            h.update(root_word(r, root, o)?.to_le_bytes());
        }
        for q in self.walk(r, root)? {
            h.update(q.ordinal.to_le_bytes());
            h.update((q.state as u64).to_le_bytes());
            h.update(q.count.to_le_bytes());
            h.update(r.read(q.records, q.count * RECORD_SIZE)?);
            if q.summary != NIL {
                for e in read_summary(r, q.summary)? {
                    for w in [e.virtual_offset, e.length, e.managed_offset] {
                        h.update(w.to_le_bytes());
                    }
                }
            }
        }
        Ok(h.finalize().into())
    }
}

struct RegionSource<'a> {
    r: &'a PersistentRegion,
    root: u64,
    cached: Option<(u64, Arc<Vec<MapEntry>>)>,
}

impl QuantumSource for RegionSource<'_> {
    fn quanta_newest_first(&self) -> Result<Vec<QuantumMeta>> {
        let mut out = Vec::new();
        let mut at = root_word(self.r, self.root, V_HEAD)?;
        while at != NIL {
            let q = read_quantum(self.r, at)?;
            let (start_time, end_time) = match q.state {
                QuantumState::Open => record_times(self.r, &q)?,
                _ => (q.start_time, q.end_time),
            };
            out.push(QuantumMeta {
                id: q.at,
                count: q.count,
                start_time,
                end_time,
                summarized: q.state == QuantumState::Summarized,
            });
            at = q.prev;
        }
        Ok(out)
    }

    fn summary(&self, id: u64) -> Result<Arc<Vec<MapEntry>>> {
        if let Some((at, s)) = &self.cached {
            if *at == id {
                return Ok(s.clone());
            }
        }
        let q = read_quantum(self.r, id)?;
        Ok(Arc::new(read_summary(self.r, q.summary)?))
    }

    fn scan_records(&self, id: u64, n: u64, f: &mut dyn FnMut(&ManagedRange) -> bool) -> Result<()> {
        let q = read_quantum(self.r, id)?;
        let raw = self.r.read(q.records, n * RECORD_SIZE)?;
        for c in raw.chunks_exact(RECORD_SIZE as usize) {
            let w = |o: usize| u64::from_le_bytes(c[o..o + 8].try_into().unwrap());
            let rec = ManagedRange {
                virtual_offset: w(0),
                length: u32::from_le_bytes(c[8..12].try_into().unwrap()),
                managed_offset: w(16),
                timestamp: w(24),
                sequence: w(32),
            };
            if !f(&rec) {
                break;
            }
        }
        Ok(())
    }

    fn trimmed(&self) -> bool {
        root_word(self.r, self.root, V_TRIMMED).map(|t| t > 0).unwrap_or(false)
    }
}
