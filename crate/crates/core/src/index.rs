//! Persistent hopscotch hash table mapping variable-length keys to value
//! references. The table lives entirely inside a [`PersistentRegion`].
//!
//! ```text
//! header  (64 B)  magic, bucket_count, hop_range, seed, buckets, count
//! buckets         bucket_count x { hop_bitmap u64, entry u64 }
//! entry   (40 B + key)  key_offset, key_length, value_offset, value_length,
//!                       lock_word, key bytes
//! ```
//!
//! Every entry sits within `hop_range - 1` buckets of its home bucket, and
//! bit `i` of a home bucket's bitmap is set iff bucket `home + i` (mod
//! bucket_count) holds an entry homed there. Mutations run inside the
//! caller's transaction when one is active, otherwise in their own.

use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::pmem::{PersistentRegion, PmemError, NIL};

const TABLE_MAGIC: u64 = u64::from_le_bytes(*b"HOPSCOT1");
const H_BUCKETS: u64 = 8;
const H_HOP: u64 = 16;
const H_SEED: u64 = 24;
const H_ARRAY: u64 = 32;
const H_COUNT: u64 = 40;
const HEADER_BYTES: u64 = 64;
const BUCKET: u64 = 16;

const E_KEY_OFF: u64 = 0;
const E_KEY_LEN: u64 = 8;
const E_VALUE_OFF: u64 = 16;
const E_VALUE_LEN: u64 = 24;
const E_LOCK: u64 = 32;
const ENTRY_BYTES: u64 = 40;

pub const DEFAULT_HOP_RANGE: u64 = 32;
pub const DEFAULT_SEED: u64 = 0x6d63_6173_5f68_6f70;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("corrupt table: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Pmem(#[from] PmemError),
}

pub type Result<T> = std::result::Result<T, IndexError>;

/// Location of a value inside the region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ValueRef {
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    Replaced(ValueRef),
}

/// A live entry as read from the region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub offset: u64,
    pub key: Vec<u8>,
    pub value: ValueRef,
    pub lock_word: u64,
}

pub fn hash_key(key: &[u8], seed: u64) -> u64 {
    xxh3_64_with_seed(key, seed)
}

/// Bucket storage used by the insertion algorithm: the persistent array or
/// a scratch copy built during resize.
trait Buckets {
    fn len(&self) -> u64;
    fn hop(&self, i: u64) -> Result<u64>;
    fn entry(&self, i: u64) -> Result<u64>;
    fn set_hop(&mut self, i: u64, v: u64) -> Result<()>;
    fn set_entry(&mut self, i: u64, v: u64) -> Result<()>;
}

struct RegionBuckets<'a> {
    region: &'a mut PersistentRegion,
    base: u64,
    n: u64,
}

impl Buckets for RegionBuckets<'_> {
    fn len(&self) -> u64 {
        self.n
    }
    fn hop(&self, i: u64) -> Result<u64> {
        Ok(self.region.read_u64(self.base + i * BUCKET)?)
    }
    fn entry(&self, i: u64) -> Result<u64> {
        Ok(self.region.read_u64(self.base + i * BUCKET + 8)?)
    }
    fn set_hop(&mut self, i: u64, v: u64) -> Result<()> {
        Ok(self.region.tx_write_u64(self.base + i * BUCKET, v)?)
    }
    fn set_entry(&mut self, i: u64, v: u64) -> Result<()> {
        Ok(self.region.tx_write_u64(self.base + i * BUCKET + 8, v)?)
    }
}

struct ScratchBuckets(Vec<[u64; 2]>);

impl Buckets for ScratchBuckets {
    fn len(&self) -> u64 {
        self.0.len() as u64
    }
    fn hop(&self, i: u64) -> Result<u64> {
        Ok(self.0[i as usize][0])
    }
    fn entry(&self, i: u64) -> Result<u64> {
        Ok(self.0[i as usize][1])
    }
    fn set_hop(&mut self, i: u64, v: u64) -> Result<()> {
        self.0[i as usize][0] = v;
        Ok(())
    }
    fn set_entry(&mut self, i: u64, v: u64) -> Result<()> {
        self.0[i as usize][1] = v;
        Ok(())
    }
}

/// Hopscotch insertion of `entry` homed at `home`. Returns false when no
/// slot can be brought into the neighborhood; the caller then resizes.
fn place<B: Buckets>(b: &mut B, home: u64, entry: u64, hop_range: u64) -> Result<bool> {
    let n = b.len();
    let mask = n - 1;
    let mut dist = match (0..n).find_map(|d| match b.entry((home + d) & mask) {
        Ok(NIL) => Some(Ok(d)),
        Ok(_) => None,
        Err(e) => Some(Err(e)),
    }) {
        Some(d) => d?,
        None => return Ok(false),
    };
    while dist >= hop_range {
        let free = (home + dist) & mask;
        let mut moved = false;
        // candidate homes from farthest to nearest
        'search: for k in (1..hop_range).rev() {
            let cand = (free + n - k) & mask;
            let hop = b.hop(cand)?;
            for i in 0..k {
                if hop & (1 << i) != 0 {
                    let from = (cand + i) & mask;
                    let e = b.entry(from)?;
                    b.set_entry(free, e)?;
                    b.set_hop(cand, (hop | (1 << k)) & !(1 << i))?;
                    b.set_entry(from, NIL)?;
                    dist -= k - i;
                    moved = true;
                    break 'search;
                }
            }
        }
        if !moved {
            return Ok(false);
        }
    }
    let slot = (home + dist) & mask;
    b.set_entry(slot, entry)?;
    let hop = b.hop(home)?;
    b.set_hop(home, hop | (1 << dist))?;
    Ok(true)
}

/// Handle to a table stored in a region. Holds only the header offset and
/// volatile statistics; all table state is read from the region.
#[derive(Debug, Clone)]
pub struct HopscotchTable {
    header: u64,
    resizes: u64,
    last_resize_load: Option<f64>,
}

struct Geometry {
    buckets: u64,
    hop_range: u64,
    seed: u64,
    array: u64,
}

impl HopscotchTable {
    /// Allocates an empty table. `initial_buckets` must be a power of two
    /// and at least twice the neighborhood size.
    pub fn create(
        region: &mut PersistentRegion,
        initial_buckets: u64,
        hop_range: u64,
        seed: u64,
    ) -> Result<Self> {
        if !(2..=64).contains(&hop_range) {
            return Err(IndexError::Parameter(format!("hop range {hop_range} not in 2..=64")));
        }
        if !initial_buckets.is_power_of_two() || initial_buckets < 2 * hop_range {
            return Err(IndexError::Parameter(format!(
                "bucket count {initial_buckets} must be a power of two >= {}",
                2 * hop_range
            )));
        }
        let own_tx = !region.tx_active();
        if own_tx {
            region.tx_begin()?;
        }
        let res = (|| -> Result<u64> {
            let header = region.heap_alloc(HEADER_BYTES, 64)?;
            let array = region.heap_alloc(initial_buckets * BUCKET, 64)?;
            region.fill(array, initial_buckets * BUCKET, 0)?;
            region.persist(array, initial_buckets * BUCKET)?;
            let mut h = [0u8; HEADER_BYTES as usize];
            for (off, v) in [
                (0, TABLE_MAGIC),
                (H_BUCKETS, initial_buckets),
                (H_HOP, hop_range),
                (H_SEED, seed),
                (H_ARRAY, array),
                (H_COUNT, 0),
            ] {
                h[off as usize..off as usize + 8].copy_from_slice(&v.to_le_bytes());
            }
            region.write(header, &h)?;
            region.persist(header, HEADER_BYTES)?;
            Ok(header)
        })();
        finish(region, own_tx, res).map(|header| HopscotchTable {
            header,
            resizes: 0,
            last_resize_load: None,
        })
    }

    pub fn open(region: &PersistentRegion, header: u64) -> Result<Self> {
        if region.read_u64(header)? != TABLE_MAGIC {
            return Err(IndexError::Corrupt(format!("no table at {header:#x}")));
        }
        let t = HopscotchTable { header, resizes: 0, last_resize_load: None };
        let g = t.geometry(region)?;
        if !g.buckets.is_power_of_two() || !(2..=64).contains(&g.hop_range) {
            return Err(IndexError::Corrupt("bad geometry".into()));
        }
        region.read(g.array, g.buckets * BUCKET)?;
        Ok(t)
    }

    pub fn offset(&self) -> u64 {
        self.header
    }

    pub fn resizes(&self) -> u64 {
        self.resizes
    }

    /// Load factor observed right before the most recent resize.
    pub fn last_resize_load(&self) -> Option<f64> {
        self.last_resize_load
    }

    fn geometry(&self, r: &PersistentRegion) -> Result<Geometry> {
        Ok(Geometry {
            buckets: r.read_u64(self.header + H_BUCKETS)?,
            hop_range: r.read_u64(self.header + H_HOP)?,
            seed: r.read_u64(self.header + H_SEED)?,
            array: r.read_u64(self.header + H_ARRAY)?,
        })
    }

    pub fn len(&self, region: &PersistentRegion) -> Result<u64> {
        Ok(region.read_u64(self.header + H_COUNT)?)
    }

    pub fn is_empty(&self, region: &PersistentRegion) -> Result<bool> {
        Ok(self.len(region)? == 0)
    }

    pub fn bucket_count(&self, region: &PersistentRegion) -> Result<u64> {
        Ok(region.read_u64(self.header + H_BUCKETS)?)
    }

    /// Total bytes owned by the table itself (header and bucket array).
    pub fn footprint(&self, region: &PersistentRegion) -> Result<u64> {
        Ok(HEADER_BYTES + self.bucket_count(region)? * BUCKET)
    }

    fn key_matches(r: &PersistentRegion, entry: u64, key: &[u8]) -> Result<bool> {
        let klen = r.read_u64(entry + E_KEY_LEN)?;
        if klen != key.len() as u64 {
            return Ok(false);
        }
        let koff = r.read_u64(entry + E_KEY_OFF)?;
        Ok(r.read(koff, klen)? == key)
    }

    /// Returns `(bucket, entry offset)` for `key`.
    fn find(&self, r: &PersistentRegion, key: &[u8]) -> Result<Option<(u64, u64)>> {
        let g = self.geometry(r)?;
        let mask = g.buckets - 1;
        let home = hash_key(key, g.seed) & mask;
        let mut hop = r.read_u64(g.array + home * BUCKET)?;
        while hop != 0 {
            let i = hop.trailing_zeros() as u64;
            hop &= hop - 1;
            let slot = (home + i) & mask;
            let e = r.read_u64(g.array + slot * BUCKET + 8)?;
            if e != NIL && Self::key_matches(r, e, key)? {
                return Ok(Some((slot, e)));
            }
        }
        Ok(None)
    }

    pub fn get(&self, region: &PersistentRegion, key: &[u8]) -> Result<Option<Entry>> {
        match self.find(region, key)? {
            Some((_, e)) => Ok(Some(read_entry(region, e)?)),
            None => Ok(None),
        }
    }

    /// Inserts or replaces the value reference for `key`.
    pub fn put(
        &mut self,
        region: &mut PersistentRegion,
        key: &[u8],
        value: ValueRef,
    ) -> Result<PutOutcome> {
        if key.is_empty() {
            return Err(IndexError::Parameter("empty key".into()));
        }
        let own_tx = !region.tx_active();
        if own_tx {
            region.tx_begin()?;
        }
        let res = self.put_in_tx(region, key, value);
        finish(region, own_tx, res)
    }

    fn put_in_tx(
        &mut self,
        r: &mut PersistentRegion,
        key: &[u8],
        value: ValueRef,
    ) -> Result<PutOutcome> {
        if let Some((_, e)) = self.find(r, key)? {
            let old = ValueRef {
                offset: r.read_u64(e + E_VALUE_OFF)?,
                length: r.read_u64(e + E_VALUE_LEN)?,
            };
            let mut buf = [0u8; 16];
            buf[..8].copy_from_slice(&value.offset.to_le_bytes());
            buf[8..].copy_from_slice(&value.length.to_le_bytes());
            r.tx_write(e + E_VALUE_OFF, &buf)?;
            return Ok(PutOutcome::Replaced(old));
        }
        let entry = r.heap_alloc(ENTRY_BYTES + key.len() as u64, 8)?;
        let mut rec = Vec::with_capacity(ENTRY_BYTES as usize + key.len());
        for v in [entry + ENTRY_BYTES, key.len() as u64, value.offset, value.length, 0] {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        rec.extend_from_slice(key);
        r.write(entry, &rec)?;
        r.persist(entry, rec.len() as u64)?;
        loop {
            let g = self.geometry(r)?;
            let home = hash_key(key, g.seed) & (g.buckets - 1);
            let mut b = RegionBuckets { region: r, base: g.array, n: g.buckets };
            if place(&mut b, home, entry, g.hop_range)? {
                break;
            }
            self.resize(r)?;
        }
        let count = r.read_u64(self.header + H_COUNT)?;
        r.tx_write_u64(self.header + H_COUNT, count + 1)?;
        Ok(PutOutcome::Inserted)
    }

    /// Doubles the bucket array and rehashes every entry. The new array is
    /// built in DRAM, written to fresh memory and persisted, then swapped in
    /// by a logged header update.
    fn resize(&mut self, r: &mut PersistentRegion) -> Result<()> {
        let g = self.geometry(r)?;
        let count = r.read_u64(self.header + H_COUNT)?;
        self.last_resize_load = Some(count as f64 / g.buckets as f64);
        let mut entries = Vec::with_capacity(count as usize);
        for i in 0..g.buckets {
            let e = r.read_u64(g.array + i * BUCKET + 8)?;
            if e != NIL {
                let koff = r.read_u64(e + E_KEY_OFF)?;
                let klen = r.read_u64(e + E_KEY_LEN)?;
                entries.push((hash_key(r.read(koff, klen)?, g.seed), e));
            }
        }
        let mut n = g.buckets * 2;
        let scratch = 'grow: loop {
            let mut s = ScratchBuckets(vec![[0, 0]; n as usize]);
            for &(h, e) in &entries {
                if !place(&mut s, h & (n - 1), e, g.hop_range)? {
                    n *= 2;
                    continue 'grow;
                }
            }
            break s;
        };
        let bytes = n * BUCKET;
        let array = r.heap_alloc(bytes, 64)?;
        let mut raw = Vec::with_capacity(bytes as usize);
        for [hop, e] in &scratch.0 {
            raw.extend_from_slice(&hop.to_le_bytes());
            raw.extend_from_slice(&e.to_le_bytes());
        }
        r.write(array, &raw)?;
        r.persist(array, bytes)?;
        let mut hdr = [0u8; 32];
        hdr[..8].copy_from_slice(&n.to_le_bytes());
        hdr[8..16].copy_from_slice(&g.hop_range.to_le_bytes());
        hdr[16..24].copy_from_slice(&g.seed.to_le_bytes());
        hdr[24..].copy_from_slice(&array.to_le_bytes());
        r.tx_write(self.header + H_BUCKETS, &hdr)?;
        r.heap_free(g.array)?;
        self.resizes += 1;
        Ok(())
    }

    /// Removes `key`, freeing its entry record. The value memory belongs to
    /// the caller and is returned, not freed.
    pub fn erase(&mut self, region: &mut PersistentRegion, key: &[u8]) -> Result<Option<ValueRef>> {
        let own_tx = !region.tx_active();
        if own_tx {
            region.tx_begin()?;
        }
        let res = self.erase_in_tx(region, key);
        finish(region, own_tx, res)
    }

    fn erase_in_tx(&mut self, r: &mut PersistentRegion, key: &[u8]) -> Result<Option<ValueRef>> {
        let Some((slot, e)) = self.find(r, key)? else {
            return Ok(None);
        };
        let g = self.geometry(r)?;
        let mask = g.buckets - 1;
        let home = hash_key(key, g.seed) & mask;
        let dist = (slot + g.buckets - home) & mask;
        let old = ValueRef {
            offset: r.read_u64(e + E_VALUE_OFF)?,
            length: r.read_u64(e + E_VALUE_LEN)?,
        };
        r.tx_write_u64(g.array + slot * BUCKET + 8, NIL)?;
        let hop = r.read_u64(g.array + home * BUCKET)?;
        r.tx_write_u64(g.array + home * BUCKET, hop & !(1 << dist))?;
        let count = r.read_u64(self.header + H_COUNT)?;
        r.tx_write_u64(self.header + H_COUNT, count - 1)?;
        r.heap_free(e)?;
        Ok(Some(old))
    }

    /// Visits every live entry once, in bucket order.
    pub fn iterate(
        &self,
        region: &PersistentRegion,
        mut visit: impl FnMut(&Entry),
    ) -> Result<()> {
        let mut pos = 0;
        loop {
            let (batch, next) = self.scan(region, pos, 1024)?;
            batch.iter().for_each(&mut visit);
            match next {
                Some(n) => pos = n,
                None => return Ok(()),
            }
        }
    }

    /// Up to `max` entries starting at bucket `pos`, plus the bucket to
    /// resume from (None at the end).
    pub fn scan(
        &self,
        region: &PersistentRegion,
        pos: u64,
        max: usize,
    ) -> Result<(Vec<Entry>, Option<u64>)> {
        let g = self.geometry(region)?;
        let mut out = Vec::new();
        let mut i = pos;
        while i < g.buckets {
            if out.len() == max {
                return Ok((out, Some(i)));
            }
            let e = region.read_u64(g.array + i * BUCKET + 8)?;
            if e != NIL {
                out.push(read_entry(region, e)?);
            }
            i += 1;
        }
        Ok((out, None))
    }

    pub fn set_lock_word(region: &mut PersistentRegion, entry: u64, value: u64) -> Result<()> {
        Ok(region.atomic_store_64(entry + E_LOCK, value)?)
    }

    pub fn lock_word(region: &PersistentRegion, entry: u64) -> Result<u64> {
        Ok(region.read_u64(entry + E_LOCK)?)
    }

    /// Offsets owned by the table and its entries (header, bucket array,
    /// entry records), for reachability checks.
    pub fn owned_allocations(&self, region: &PersistentRegion) -> Result<Vec<u64>> {
        let g = self.geometry(region)?;
        let mut out = vec![self.header, g.array];
        self.iterate(region, |e| out.push(e.offset))?;
        Ok(out)
    }

    /// Full scan of the structural invariants: neighborhood distance,
    /// bitmap/occupancy agreement, unique keys, entry count.
    pub fn check_invariants(&self, region: &PersistentRegion) -> Result<()> {
        let g = self.geometry(region)?;
        let mask = g.buckets - 1;
        let mut expect_hop = vec![0u64; g.buckets as usize];
        let mut keys = std::collections::HashSet::new();
        let mut live = 0;
        for slot in 0..g.buckets {
            let e = region.read_u64(g.array + slot * BUCKET + 8)?;
            if e == NIL {
                continue;
            }
            live += 1;
            let ent = read_entry(region, e)?;
            let home = hash_key(&ent.key, g.seed) & mask;
            let dist = (slot + g.buckets - home) & mask;
            if dist >= g.hop_range {
                return Err(IndexError::Corrupt(format!("entry in {slot} is {dist} from home")));
            }
            expect_hop[home as usize] |= 1 << dist;
            if !keys.insert(ent.key) {
                return Err(IndexError::Corrupt("duplicate key".into()));
            }
        }
        for (i, &h) in expect_hop.iter().enumerate() {
            let got = region.read_u64(g.array + i as u64 * BUCKET)?;
            if got != h {
                return Err(IndexError::Corrupt(format!("bucket {i} bitmap {got:#x} != {h:#x}")));
            }
        }
        if live != self.len(region)? {
            return Err(IndexError::Corrupt("entry count mismatch".into()));
        }
        Ok(())
    }
}

fn read_entry(r: &PersistentRegion, e: u64) -> Result<Entry> {
    let koff = r.read_u64(e + E_KEY_OFF)?;
    let klen = r.read_u64(e + E_KEY_LEN)?;
    Ok(Entry {
        offset: e,
        key: r.read(koff, klen)?.to_vec(),
        value: ValueRef { offset: r.read_u64(e + E_VALUE_OFF)?, length: r.read_u64(e + E_VALUE_LEN)? },
        lock_word: r.read_u64(e + E_LOCK)?,
    })
}

fn finish<T>(r: &mut PersistentRegion, own_tx: bool, res: Result<T>) -> Result<T> {
    if !own_tx {
        return res;
    }
    match res {
        Ok(v) => {
            r.tx_commit()?;
            Ok(v)
        }
        Err(e) => {
            r.tx_abort()?;
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::{BackingKind, CrashPlan, DropPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn region(cap: u64) -> PersistentRegion {
        PersistentRegion::create_in_memory(cap, 4096, BackingKind::Memory).unwrap()
    }

    fn vref(i: u64) -> ValueRef {
        ValueRef { offset: 4096 + i, length: i }
    }

    #[test]
    fn empty_table_lookup() {
        let mut r = region(1 << 20);
        let t = HopscotchTable::create(&mut r, 64, 32, DEFAULT_SEED).unwrap();
        assert!(t.get(&r, b"anything").unwrap().is_none());
        assert_eq!(t.len(&r).unwrap(), 0);
    }

    #[test]
    fn bad_bucket_counts() {
        let mut r = region(1 << 20);
        assert!(matches!(
            HopscotchTable::create(&mut r, 48, 32, 0),
            Err(IndexError::Parameter(_))
        ));
        assert!(matches!(
            HopscotchTable::create(&mut r, 32, 32, 0),
            Err(IndexError::Parameter(_))
        ));
    }

    #[test]
    fn create_in_full_region() {
        let mut r = region(crate::pmem::minimum_capacity(4096));
        while r.heap_alloc(60_000, 64).is_ok() {}
        while r.heap_alloc(64, 64).is_ok() {}
        assert!(matches!(
            HopscotchTable::create(&mut r, 1 << 16, 32, 0),
            Err(IndexError::Pmem(PmemError::OutOfMemory(_)))
        ));
    }

    #[test]
    fn put_get_replace_erase() {
        let mut r = region(1 << 20);
        let mut t = HopscotchTable::create(&mut r, 64, 32, DEFAULT_SEED).unwrap();
        assert_eq!(t.put(&mut r, b"k", vref(1)).unwrap(), PutOutcome::Inserted);
        assert_eq!(t.get(&r, b"k").unwrap().unwrap().value, vref(1));
        assert_eq!(t.put(&mut r, b"k", vref(2)).unwrap(), PutOutcome::Replaced(vref(1)));
        assert_eq!(t.erase(&mut r, b"k").unwrap(), Some(vref(2)));
        assert!(t.get(&r, b"k").unwrap().is_none());
        assert_eq!(t.erase(&mut r, b"k").unwrap(), None);
        assert!(matches!(t.put(&mut r, b"", vref(0)), Err(IndexError::Parameter(_))));
    }

    #[test]
    fn random_puts_match_reference_map() {
        let mut r = region(16 << 20);
        let mut t = HopscotchTable::create(&mut r, 64, 32, DEFAULT_SEED).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut oracle = HashMap::new();
        for i in 0..10_000u64 {
            let key: Vec<u8> = (0..rng.gen_range(1..24)).map(|_| rng.gen()).collect();
            t.put(&mut r, &key, vref(i)).unwrap();
            oracle.insert(key, vref(i));
        }
        for (k, v) in &oracle {
            assert_eq!(t.get(&r, k).unwrap().unwrap().value, *v);
        }
        let mut seen = HashMap::new();
        t.iterate(&r, |e| {
            assert!(seen.insert(e.key.clone(), e.value).is_none());
        })
        .unwrap();
        assert_eq!(seen, oracle);
        t.check_invariants(&r).unwrap();
        assert!(t.resizes() > 0);
    }

    #[test]
    fn collision_chain_forces_displacement() {
        let mut r = region(4 << 20);
        let mut t = HopscotchTable::create(&mut r, 256, 8, DEFAULT_SEED).unwrap();
        // Fill the region after home bucket 10 with keys homed nearby so a
        // later key homed at 10 must displace across the neighborhood.
        let mask = 255;
        let mut by_home: HashMap<u64, Vec<Vec<u8>>> = HashMap::new();
        let mut i = 0u64;
        while (10..40).any(|h| by_home.get(&h).map_or(0, |v| v.len()) < 2) {
            let k = format!("key-{i}").into_bytes();
            i += 1;
            let h = hash_key(&k, DEFAULT_SEED) & mask;
            if (10..40).contains(&h) {
                by_home.entry(h).or_default().push(k);
            }
        }
        let mut inserted = vec![];
        for h in 11..40u64 {
            for k in by_home[&h].iter().take(2) {
                t.put(&mut r, k, vref(inserted.len() as u64)).unwrap();
                inserted.push(k.clone());
            }
        }
        for k in by_home[&10].iter().take(2) {
            t.put(&mut r, k, vref(inserted.len() as u64)).unwrap();
            inserted.push(k.clone());
        }
        for (n, k) in inserted.iter().enumerate() {
            assert_eq!(t.get(&r, k).unwrap().unwrap().value, vref(n as u64));
        }
        t.check_invariants(&r).unwrap();
    }

    #[test]
    fn load_factor_before_resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let mut r = region(8 << 20);
            let mut t = HopscotchTable::create(&mut r, 1024, 32, trial).unwrap();
            while t.resizes() == 0 {
                let key = rng.gen::<[u8; 16]>();
                t.put(&mut r, &key, vref(0)).unwrap();
            }
            let load = t.last_resize_load().unwrap();
            assert!(load >= 0.7, "trial {trial}: resized at load {load}");
        }
    }

    #[test]
    fn crash_during_erase_is_all_or_nothing() {
        for n in 0..40 {
            let mut r = PersistentRegion::create_in_memory(1 << 20, 256, BackingKind::Emulated).unwrap();
            let mut t = HopscotchTable::create(&mut r, 64, 32, DEFAULT_SEED).unwrap();
            let root = r.heap_alloc(8, 8).unwrap();
            r.write_u64(root, t.offset()).unwrap();
            r.persist(root, 8).unwrap();
            r.set_root(root).unwrap();
            for k in 0..20u64 {
                t.put(&mut r, &k.to_le_bytes(), vref(k)).unwrap();
            }
            let start = r.durability_events();
            r.set_crash_plan(Some(CrashPlan { at_event: start + n, seed: n, policy: DropPolicy::Random }))
                .unwrap();
            t.erase(&mut r, &7u64.to_le_bytes()).unwrap();
            let r2 = PersistentRegion::open_image(r.crash_image().unwrap(), BackingKind::Memory).unwrap();
            let t2 = HopscotchTable::open(&r2, r2.read_u64(r2.root().unwrap()).unwrap()).unwrap();
            t2.check_invariants(&r2).unwrap();
            let len = t2.len(&r2).unwrap();
            match t2.get(&r2, &7u64.to_le_bytes()).unwrap() {
                Some(e) => {
                    assert_eq!(e.value, vref(7));
                    assert_eq!(len, 20);
                }
                None => assert_eq!(len, 19),
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn equivalent_to_reference_map(ops in proptest::collection::vec((0u8..3, 0u16..300), 1..600)) {
            let mut r = region(4 << 20);
            let mut t = HopscotchTable::create(&mut r, 64, 32, DEFAULT_SEED).unwrap();
            let mut oracle = HashMap::new();
            for (i, (op, k)) in ops.into_iter().enumerate() {
                let key = format!("k{k}").into_bytes();
                if op < 2 {
                    t.put(&mut r, &key, vref(i as u64)).unwrap();
                    oracle.insert(key, vref(i as u64));
                } else {
                    proptest::prop_assert_eq!(t.erase(&mut r, &key).unwrap(), oracle.remove(&key));
                }
            }
            t.check_invariants(&r).unwrap();
            let mut got = HashMap::new();
            t.iterate(&r, |e| { got.insert(e.key.clone(), e.value); }).unwrap();
            proptest::prop_assert_eq!(got, oracle);
        }
    }
}
