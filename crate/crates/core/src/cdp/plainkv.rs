//! CDP over the plain key-value API. The client owns the quantum list and
//! runs seal, summarize and trim itself; the store only sees pairs:
//!
//! ```text
//! "<tag>.m"            meta: first_ordinal, capacity, retention_count,
//!                      retention_age_ns, trimmed (u64 each)
//! "<tag>.r<ord>.<i>"   one 64-byte record per update (hex ordinal/index)
//! "<tag>.s<ord>"       summary of quantum <ord>: count u64 then triples
//! ```
//!
//! Every update costs one put. A seal adds a summary put, and a trim
//! erases the quantum's record and summary pairs and rewrites the meta.

use std::collections::VecDeque;
use std::sync::Arc;

use super::query::{point_in_time, QuantumMeta, QuantumSource};
use super::{BlockMapping, CdpError, ManagedRange, MapEntry, QueryRange, RangeMap, Result, Retention, VolumeConfig};
use crate::store::{Pool, StoreError};

/// The subset of the key-value API Plain-KV needs.
pub trait KvBackend {
    fn put(&mut self, key: &[u8], value: &[u8]) -> std::result::Result<(), StoreError>;
    /// Missing keys are `StoreError::NotFound`.
    fn get(&mut self, key: &[u8]) -> std::result::Result<Vec<u8>, StoreError>;
    fn erase(&mut self, key: &[u8]) -> std::result::Result<(), StoreError>;
}

impl KvBackend for Pool {
    fn put(&mut self, key: &[u8], value: &[u8]) -> std::result::Result<(), StoreError> {
        Pool::put(self, key, value)
    }

    fn get(&mut self, key: &[u8]) -> std::result::Result<Vec<u8>, StoreError> {
        Pool::get(self, key)
    }

    fn erase(&mut self, key: &[u8]) -> std::result::Result<(), StoreError> {
        Pool::erase(self, key).map(|_| ())
    }
}

/// Store operations issued, by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlainKvCounters {
    pub record_puts: u64,
    pub summary_puts: u64,
    pub meta_puts: u64,
    pub erases: u64,
    pub gets: u64,
}

impl PlainKvCounters {
    pub fn total(&self) -> u64 {
        self.record_puts + self.summary_puts + self.meta_puts + self.erases + self.gets
    }
}

struct LocalQuantum {
    ordinal: u64,
    records: Vec<ManagedRange>,
    summary: Option<Arc<Vec<MapEntry>>>,
}

pub struct PlainKvVolume {
    tag: String,
    config: VolumeConfig,
    /// Oldest first; the last one is OPEN.
    quanta: VecDeque<LocalQuantum>,
    trimmed: u64,
    next_sequence: u64,
    last_timestamp: u64,
    counters: PlainKvCounters,
}

fn record_key(tag: &str, ordinal: u64, i: u64) -> Vec<u8> {
    format!("{tag}.r{ordinal:x}.{i:x}").into_bytes()
}

fn summary_key(tag: &str, ordinal: u64) -> Vec<u8> {
    format!("{tag}.s{ordinal:x}").into_bytes()
}

fn meta_key(tag: &str) -> Vec<u8> {
    format!("{tag}.m").into_bytes()
}

fn encode_summary(entries: &[MapEntry]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 24 * entries.len());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        for w in [e.virtual_offset, e.length, e.managed_offset] {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

fn decode_summary(b: &[u8]) -> Result<Vec<MapEntry>> {
    let w = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
    if b.len() < 8 || (b.len() - 8) as u64 != w(0).saturating_mul(24) {
        return Err(CdpError::Corrupt(format!("summary pair of {} bytes", b.len())));
    }
    Ok((0..w(0) as usize)
        .map(|i| MapEntry { virtual_offset: w(8 + 24 * i), length: w(16 + 24 * i), managed_offset: w(24 + 24 * i) })
        .collect())
}

impl PlainKvVolume {
    /// Creates the volume's meta pair, or rebuilds the volume if it exists.
    pub fn open_or_create(kv: &mut dyn KvBackend, tag: &str, config: VolumeConfig) -> Result<Self> {
        match Self::rebuild(kv, tag) {
            Err(CdpError::VolumeNotFound) => {}
            r => return r,
        }
        if config.quantum_capacity == 0 {
            return Err(CdpError::InvalidArgument("zero quantum capacity".into()));
        }
        let mut v = PlainKvVolume {
            tag: tag.to_string(),
            config,
            quanta: VecDeque::from([LocalQuantum { ordinal: 0, records: Vec::new(), summary: None }]),
            trimmed: 0,
            next_sequence: 0,
            last_timestamp: 0,
            counters: PlainKvCounters::default(),
        };
        v.put_meta(kv)?;
        Ok(v)
    }

    /// Reconstructs the quantum list by reading the meta pair and probing
    /// record keys in order until one is missing.
    pub fn rebuild(kv: &mut dyn KvBackend, tag: &str) -> Result<Self> {
        let counters = PlainKvCounters { gets: 1, ..Default::default() };
        let meta = match kv.get(&meta_key(tag)) {
            Ok(m) => m,
            Err(StoreError::NotFound) => return Err(CdpError::VolumeNotFound),
            Err(e) => return Err(e.into()),
        };
        if meta.len() != 40 {
            return Err(CdpError::Corrupt(format!("meta pair of {} bytes", meta.len())));
        }
        let w = |i: usize| u64::from_le_bytes(meta[i * 8..i * 8 + 8].try_into().unwrap());
        let config = VolumeConfig { quantum_capacity: w(1), retention: Retention { count: w(2), age_ns: w(3) } };
        let mut v = PlainKvVolume {
            tag: tag.to_string(),
            config,
            quanta: VecDeque::new(),
            trimmed: w(4),
            next_sequence: 0,
            last_timestamp: 0,
            counters,
        };
        let mut ordinal = w(0);
        loop {
            let mut q = LocalQuantum { ordinal, records: Vec::new(), summary: None };
            loop {
                v.counters.gets += 1;
                match kv.get(&record_key(tag, ordinal, q.records.len() as u64)) {
                    Ok(b) => {
                        let (r, _) = ManagedRange::decode(&b).map_err(CdpError::Corrupt)?;
                        v.next_sequence = r.sequence + 1;
                        v.last_timestamp = r.timestamp;
                        q.records.push(r);
                    }
                    Err(StoreError::NotFound) => break,
                    Err(e) => return Err(e.into()),
                }
            }
            if (q.records.len() as u64) < v.config.quantum_capacity {
                v.quanta.push_back(q);
                break;
            }
            v.counters.gets += 1;
            match kv.get(&summary_key(tag, ordinal)) {
                Ok(b) => q.summary = Some(Arc::new(decode_summary(&b)?)),
                Err(StoreError::NotFound) => {}
                Err(e) => return Err(e.into()),
            }
            v.quanta.push_back(q);
            ordinal += 1;
        }
        // A seal interrupted before its summary was written.
        v.finish_seals(kv)?;
        Ok(v)
    }

    /// Approximate DRAM held by the client-side copy of the volume.
    pub fn volatile_bytes(&self) -> u64 {
        let rec = std::mem::size_of::<ManagedRange>() as u64;
        let entry = std::mem::size_of::<MapEntry>() as u64;
        self.quanta
            .iter()
            .map(|q| {
                std::mem::size_of::<LocalQuantum>() as u64
                    + q.records.capacity() as u64 * rec
                    + q.summary.as_ref().map_or(0, |s| s.len() as u64 * entry)
            })
            .sum()
    }

    pub fn counters(&self) -> PlainKvCounters {
        self.counters
    }

    pub fn config(&self) -> VolumeConfig {
        self.config
    }

    pub fn quanta(&self) -> usize {
        self.quanta.len()
    }

    pub fn trimmed(&self) -> u64 {
        self.trimmed
    }

    fn put_meta(&mut self, kv: &mut dyn KvBackend) -> Result<()> {
        let first = self.quanta.front().map_or(0, |q| q.ordinal);
        let mut b = Vec::with_capacity(40);
        for x in [first, self.config.quantum_capacity, self.config.retention.count, self.config.retention.age_ns, self.trimmed] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        self.counters.meta_puts += 1;
        kv.put(&meta_key(&self.tag), &b)?;
        Ok(())
    }

    pub fn configure(&mut self, kv: &mut dyn KvBackend, config: VolumeConfig) -> Result<()> {
        if config.quantum_capacity == 0 {
            return Err(CdpError::InvalidArgument("zero quantum capacity".into()));
        }
        self.config = config;
        self.put_meta(kv)
    }

    pub fn update(&mut self, kv: &mut dyn KvBackend, v: u64, len: u64, m: u64, ts: u64) -> Result<u64> {
        if len == 0 || len > u64::from(u32::MAX) {
            return Err(CdpError::InvalidArgument(format!("length {len}")));
        }
        if v.checked_add(len).is_none() || m.checked_add(len).is_none() {
            return Err(CdpError::InvalidArgument("range overflows".into()));
        }
        if ts < self.last_timestamp {
            return Err(CdpError::OrderingViolation { last: self.last_timestamp, got: ts });
        }
        let rec = ManagedRange { virtual_offset: v, length: len as u32, managed_offset: m, timestamp: ts, sequence: self.next_sequence };
        let q = self.quanta.back_mut().expect("open quantum");
        let key = record_key(&self.tag, q.ordinal, q.records.len() as u64);
        self.counters.record_puts += 1;
        kv.put(&key, &rec.encode(true))?;
        q.records.push(rec);
        self.next_sequence += 1;
        self.last_timestamp = ts;
        if q.records.len() as u64 >= self.config.quantum_capacity {
            let ordinal = q.ordinal + 1;
            self.quanta.push_back(LocalQuantum { ordinal, records: Vec::new(), summary: None });
            self.finish_seals(kv)?;
        }
        Ok(rec.sequence)
    }

    /// Summarizes sealed quanta that lack a summary, then trims.
    fn finish_seals(&mut self, kv: &mut dyn KvBackend) -> Result<()> {
        let n = self.quanta.len();
        for i in 0..n.saturating_sub(1) {
            if self.quanta[i].summary.is_some() {
                continue;
            }
            let mut map = match i.checked_sub(1).and_then(|p| self.quanta[p].summary.clone()) {
                Some(s) => RangeMap::from_entries(&s),
                None => RangeMap::new(),
            };
            for r in &self.quanta[i].records {
                map.merge_record(r);
            }
            let entries = map.entries();
            self.counters.summary_puts += 1;
            kv.put(&summary_key(&self.tag, self.quanta[i].ordinal), &encode_summary(&entries))?;
            self.quanta[i].summary = Some(Arc::new(entries));
        }
        self.trim(kv, self.last_timestamp).map(|_| ())
    }

    pub fn trim(&mut self, kv: &mut dyn KvBackend, now: u64) -> Result<u64> {
        let ret = self.config.retention;
        let mut removed = Vec::new();
        while self.quanta.len() >= 2 && self.quanta[1].summary.is_some() {
            let tail = &self.quanta[0];
            let qcount = self.quanta.len() as u64;
            let end = tail.records.last().map_or(0, |r| r.timestamp);
            let by_count = ret.count > 0 && qcount > ret.count + 1;
            let by_age = ret.age_ns > 0 && end.saturating_add(ret.age_ns) < now;
            if !(by_count || by_age) {
                break;
            }
            removed.push(self.quanta.pop_front().unwrap());
            self.trimmed += 1;
        }
        if removed.is_empty() {
            return Ok(0);
        }
        self.put_meta(kv)?;
        for q in &removed {
            for i in 0..q.records.len() as u64 {
                self.counters.erases += 1;
                kv.erase(&record_key(&self.tag, q.ordinal, i))?;
            }
            if q.summary.is_some() {
                self.counters.erases += 1;
                kv.erase(&summary_key(&self.tag, q.ordinal))?;
            }
        }
        Ok(removed.len() as u64)
    }

    pub fn query(&self, t: u64, range: QueryRange) -> Result<BlockMapping> {
        point_in_time(self, t, range)
    }
}

impl QuantumSource for PlainKvVolume {
    fn quanta_newest_first(&self) -> Result<Vec<QuantumMeta>> {
        Ok(self
            .quanta
            .iter()
            .rev()
            .map(|q| QuantumMeta {
                id: q.ordinal,
                count: q.records.len() as u64,
                start_time: q.records.first().map_or(u64::MAX, |r| r.timestamp),
                end_time: q.records.last().map_or(0, |r| r.timestamp),
                summarized: q.summary.is_some(),
            })
            .collect())
    }

    fn summary(&self, id: u64) -> Result<Arc<Vec<MapEntry>>> {
        self.find(id)?.summary.clone().ok_or_else(|| CdpError::Corrupt(format!("quantum {id} has no summary")))
    }

    fn scan_records(&self, id: u64, n: u64, f: &mut dyn FnMut(&ManagedRange) -> bool) -> Result<()> {
        for r in self.find(id)?.records.iter().take(n as usize) {
            if !f(r) {
                break;
            }
        }
        Ok(())
    }

    fn trimmed(&self) -> bool {
        self.trimmed > 0
    }
}

impl PlainKvVolume {
    fn find(&self, id: u64) -> Result<&LocalQuantum> {
        let first = self.quanta.front().map_or(0, |q| q.ordinal);
        id.checked_sub(first)
            .and_then(|i| self.quanta.get(i as usize))
            .ok_or_else(|| CdpError::Corrupt(format!("quantum {id} not in list")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdp::local::LocalCdp;
    use crate::cdp::MIB;
    use crate::pmem::BackingKind;

    fn pool() -> Pool {
        Pool::create_in_memory("kv", 32 * MIB, BackingKind::Memory).unwrap()
    }

    fn cfg(cap: u64, count: u64) -> VolumeConfig {
        VolumeConfig { quantum_capacity: cap, retention: Retention { count, age_ns: 0 } }
    }

    #[test]
    fn one_put_per_update() {
        let mut kv = pool();
        let mut v = PlainKvVolume::open_or_create(&mut kv, "vol", cfg(1000, 10)).unwrap();
        let before = v.counters();
        for i in 0..100 {
            v.update(&mut kv, i, 1, i, i).unwrap();
        }
        let c = v.counters();
        assert_eq!(c.total() - before.total(), 100);
        assert_eq!(c.record_puts, 100);
    }

    #[test]
    fn matches_persistent_engine() {
        let mut kv = pool();
        let mut v = PlainKvVolume::open_or_create(&mut kv, "vol", cfg(5, 2)).unwrap();
        let mut ado = LocalCdp::new(pool(), MIB, cfg(5, 2)).unwrap();
        let mut x = 99u64;
        for i in 0..200 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
            let (vo, l, m) = ((x >> 40) % 300, 1 + (x >> 20) % 20, i * 32);
            v.update(&mut kv, vo, l, m, i / 2).unwrap();
            ado.update(b"vol", vo, l, m, i / 2).unwrap();
        }
        assert_eq!(v.trimmed(), ado.stats(b"vol").unwrap().trimmed);
        for t in 0..101 {
            let a = v.query(t, QueryRange::Full).map_err(|e| e.to_string());
            let b = ado.query(b"vol", t, QueryRange::Full).map_err(|e| e.to_string());
            assert_eq!(a, b, "t={t}");
        }
    }

    #[test]
    fn rebuild_reproduces_answers() {
        let mut kv = pool();
        let mut v = PlainKvVolume::open_or_create(&mut kv, "vol", cfg(4, 3)).unwrap();
        for i in 0..30 {
            v.update(&mut kv, i % 9, 3, i * 10, i).unwrap();
        }
        let w = PlainKvVolume::rebuild(&mut kv, "vol").unwrap();
        assert_eq!(w.quanta(), v.quanta());
        for t in 0..32 {
            assert_eq!(
                v.query(t, QueryRange::Full).map_err(|e| e.to_string()),
                w.query(t, QueryRange::Full).map_err(|e| e.to_string())
            );
        }
        assert!(matches!(PlainKvVolume::rebuild(&mut kv, "other"), Err(CdpError::VolumeNotFound)));
    }

    #[test]
    fn trim_erases_pairs() {
        let mut kv = pool();
        let mut v = PlainKvVolume::open_or_create(&mut kv, "vol", cfg(4, 1)).unwrap();
        for i in 0..16 {
            v.update(&mut kv, i, 1, i, i).unwrap();
        }
        assert!(v.trimmed() > 0);
        assert!(matches!(kv.get(b"vol.r0.0"), Err(StoreError::NotFound)));
        assert!(matches!(kv.get(b"vol.s0"), Err(StoreError::NotFound)));
        assert!(kv.get(b"vol.r3.0").is_ok());
    }
}
