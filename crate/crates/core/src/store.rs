//! Shard engine: named pools, each a persistent region holding a hopscotch
//! index plus the keys and values it references.
//!
//! Pool layout: the region root points at the table header. A region whose
//! root is NIL (fresh, or crashed before initialisation finished) is turned
//! into a valid empty pool on open.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::index::{HopscotchTable, IndexError, PutOutcome, ValueRef, DEFAULT_HOP_RANGE, DEFAULT_SEED};
use crate::pmem::{BackingKind, PersistentRegion, PmemError, SyncMode, DEFAULT_LOG_CAPACITY, NIL};

pub const INITIAL_BUCKETS: u64 = 1024;
const POOL_SUFFIX: &str = "pool";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("pool {0} already exists")]
    NameCollision(String),
    #[error("pool {0} not found")]
    PoolNotFound(String),
    #[error("key not found")]
    NotFound,
    #[error("pool {0} has open handles")]
    Busy(String),
    #[error("out of pool memory")]
    OutOfMemory,
    #[error("pair is locked by ADO work {0}")]
    LockedByAdo(u64),
    #[error("handle belongs to shard {owner}, not shard {shard}")]
    WrongShard { owner: u16, shard: u16 },
    #[error("unknown pool handle {0:#x}")]
    InvalidHandle(u64),
    #[error("unknown or stale iteration cursor")]
    UnknownCursor,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("storage error: {0}")]
    Pmem(PmemError),
    #[error("index error: {0}")]
    Index(IndexError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<PmemError> for StoreError {
    fn from(e: PmemError) -> Self {
        match e {
            PmemError::OutOfMemory(_) => StoreError::OutOfMemory,
            e => StoreError::Pmem(e),
        }
    }
}

impl From<IndexError> for StoreError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Pmem(p) => p.into(),
            e => StoreError::Index(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Who is issuing an operation: a plain client, or the ADO work item that
/// currently holds the pair lock.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Client,
    Work(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefEntry {
    pub key: Vec<u8>,
    pub value: ValueRef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolInfo {
    pub size: u64,
    pub free_bytes: u64,
    pub used_bytes: u64,
    pub pairs: u64,
}

/// Resumable iteration position. A cursor is only valid for the
/// generation of the pool it was issued for; any insert or erase
/// invalidates it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Cursor {
    pub generation: u64,
    pub position: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KeyPattern {
    Exact(Vec<u8>),
    Prefix(Vec<u8>),
    /// First key strictly greater than the given one.
    After(Vec<u8>),
}

pub struct Pool {
    name: String,
    region: PersistentRegion,
    table: HopscotchTable,
    generation: u64,
    sorted_keys: Option<BTreeSet<Vec<u8>>>,
}

fn in_tx<T>(r: &mut PersistentRegion, f: impl FnOnce(&mut PersistentRegion) -> Result<T>) -> Result<T> {
    r.tx_begin()?;
    match f(r) {
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

impl Pool {
    pub fn create_file(path: &Path, name: &str, size: u64, sync: SyncMode) -> Result<Pool> {
        let region = PersistentRegion::create_file(path, size, DEFAULT_LOG_CAPACITY, sync)?;
        Pool::from_region(name, region)
    }

    pub fn open_file(path: &Path, name: &str, sync: SyncMode) -> Result<Pool> {
        let region = PersistentRegion::open_file(path, sync)?;
        Pool::from_region(name, region)
    }

    pub fn create_in_memory(name: &str, size: u64, kind: BackingKind) -> Result<Pool> {
        let region = PersistentRegion::create_in_memory(size, DEFAULT_LOG_CAPACITY, kind)?;
        Pool::from_region(name, region)
    }

    /// Adopts a recovered region: initialises an empty pool if the root is
    /// NIL, opens the table and clears stale pair locks.
    pub fn from_region(name: &str, mut region: PersistentRegion) -> Result<Pool> {
        let root = region.root()?;
        let table = if root == NIL {
            let table = in_tx(&mut region, |r| {
                let t = HopscotchTable::create(r, INITIAL_BUCKETS, DEFAULT_HOP_RANGE, DEFAULT_SEED)?;
                r.set_root(t.offset())?;
                Ok(t)
            })?;
            region.sync_all()?;
            table
        } else {
            HopscotchTable::open(&region, root)?
        };
        let mut pool = Pool { name: name.to_string(), region, table, generation: 0, sorted_keys: None };
        pool.clear_locks()?;
        Ok(pool)
    }

    fn clear_locks(&mut self) -> Result<()> {
        let mut locked = Vec::new();
        self.table.iterate(&self.region, |e| {
            if e.lock_word != 0 {
                locked.push(e.offset);
            }
        })?;
        for e in locked {
            HopscotchTable::set_lock_word(&mut self.region, e, 0)?;
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn region(&self) -> &PersistentRegion {
        &self.region
    }

    pub fn region_mut(&mut self) -> &mut PersistentRegion {
        &mut self.region
    }

    pub fn into_region(self) -> PersistentRegion {
        self.region
    }

    pub fn table(&self) -> &HopscotchTable {
        &self.table
    }

    fn touched(&mut self) {
        self.generation += 1;
    }

    fn check_access(lock_word: u64, access: Access) -> Result<()> {
        match (lock_word, access) {
            (0, _) => Ok(()),
            (w, Access::Work(id)) if w == id => Ok(()),
            (w, _) => Err(StoreError::LockedByAdo(w)),
        }
    }

    fn check_key(key: &[u8]) -> Result<()> {
        if key.is_empty() {
            return Err(StoreError::InvalidArgument("empty key".into()));
        }
        Ok(())
    }

    /// Allocates and persists a value, returning its reference. Must run
    /// inside a transaction so a rollback also releases the memory.
    fn store_value(r: &mut PersistentRegion, bytes: &[u8], size: u64) -> Result<ValueRef> {
        if size == 0 {
            return Ok(ValueRef { offset: NIL, length: 0 });
        }
        let off = r.heap_alloc(size, 8)?;
        r.write(off, bytes)?;
        r.fill(off + bytes.len() as u64, size - bytes.len() as u64, 0)?;
        r.persist(off, size)?;
        Ok(ValueRef { offset: off, length: size })
    }

    fn free_value(r: &mut PersistentRegion, v: ValueRef) -> Result<()> {
        if v.offset != NIL {
            r.heap_free(v.offset)?;
        }
        Ok(())
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Result<()> {
        self.put_as(key, value, Access::Client)
    }

    pub fn put_as(&mut self, key: &[u8], value: &[u8], access: Access) -> Result<()> {
        Self::check_key(key)?;
        let existing = self.table.get(&self.region, key)?;
        if let Some(e) = &existing {
            Self::check_access(e.lock_word, access)?;
        }
        let table = &mut self.table;
        let outcome = in_tx(&mut self.region, |r| {
            let v = Self::store_value(r, value, value.len() as u64)?;
            let outcome = table.put(r, key, v)?;
            if let PutOutcome::Replaced(old) = outcome {
                Self::free_value(r, old)?;
            }
            Ok(outcome)
        })?;
        if outcome == PutOutcome::Inserted {
            self.inserted(key);
        }
        Ok(())
    }

    fn inserted(&mut self, key: &[u8]) {
        self.touched();
        if let Some(k) = &mut self.sorted_keys {
            k.insert(key.to_vec());
        }
    }

    fn erased(&mut self, key: &[u8]) {
        self.touched();
        if let Some(k) = &mut self.sorted_keys {
            k.remove(key);
        }
    }

    pub fn get(&self, key: &[u8]) -> Result<Vec<u8>> {
        self.get_as(key, Access::Client)
    }

    pub fn get_as(&self, key: &[u8], access: Access) -> Result<Vec<u8>> {
        let e = self.table.get(&self.region, key)?.ok_or(StoreError::NotFound)?;
        Self::check_access(e.lock_word, access)?;
        self.read_value(e.value)
    }

    pub fn read_value(&self, v: ValueRef) -> Result<Vec<u8>> {
        if v.length == 0 {
            return Ok(Vec::new());
        }
        Ok(self.region.read(v.offset, v.length)?.to_vec())
    }

    pub fn contains(&self, key: &[u8]) -> Result<bool> {
        Ok(self.table.get(&self.region, key)?.is_some())
    }

    /// Value reference without a lock check (plugins read in place).
    pub fn value_ref(&self, key: &[u8]) -> Result<ValueRef> {
        Ok(self.table.get(&self.region, key)?.ok_or(StoreError::NotFound)?.value)
    }

    pub fn erase(&mut self, key: &[u8]) -> Result<()> {
        self.erase_as(key, Access::Client)
    }

    pub fn erase_as(&mut self, key: &[u8], access: Access) -> Result<()> {
        let e = self.table.get(&self.region, key)?.ok_or(StoreError::NotFound)?;
        Self::check_access(e.lock_word, access)?;
        let table = &mut self.table;
        in_tx(&mut self.region, |r| {
            let old = table.erase(r, key)?.ok_or(StoreError::NotFound)?;
            Self::free_value(r, old)
        })?;
        self.erased(key);
        Ok(())
    }

    /// Reallocates the value, keeping the first min(old, new) bytes and
    /// zeroing any new tail.
    pub fn resize(&mut self, key: &[u8], new_size: u64) -> Result<ValueRef> {
        self.resize_as(key, new_size, Access::Client)
    }

    pub fn resize_as(&mut self, key: &[u8], new_size: u64, access: Access) -> Result<ValueRef> {
        let e = self.table.get(&self.region, key)?.ok_or(StoreError::NotFound)?;
        Self::check_access(e.lock_word, access)?;
        let keep = e.value.length.min(new_size);
        let prefix = if keep == 0 { Vec::new() } else { self.region.read(e.value.offset, keep)?.to_vec() };
        let table = &mut self.table;
        in_tx(&mut self.region, |r| {
            let v = Self::store_value(r, &prefix, new_size)?;
            table.put(r, key, v)?;
            Self::free_value(r, e.value)?;
            Ok(v)
        })
    }

    /// Creates a zeroed value of `size` bytes unless the key exists.
    /// Returns the value reference and whether it was created.
    pub fn create_key(&mut self, key: &[u8], size: u64, access: Access) -> Result<(ValueRef, bool)> {
        Self::check_key(key)?;
        if let Some(e) = self.table.get(&self.region, key)? {
            Self::check_access(e.lock_word, access)?;
            return Ok((e.value, false));
        }
        let table = &mut self.table;
        let v = in_tx(&mut self.region, |r| {
            let v = Self::store_value(r, &[], size)?;
            table.put(r, key, v)?;
            Ok(v)
        })?;
        self.inserted(key);
        Ok((v, true))
    }

    /// Takes the pair lock for `work_id` (nonzero).
    pub fn lock_key(&mut self, key: &[u8], work_id: u64) -> Result<()> {
        assert_ne!(work_id, 0, "work ids are nonzero");
        let e = self.table.get(&self.region, key)?.ok_or(StoreError::NotFound)?;
        if e.lock_word != 0 {
            return Err(StoreError::LockedByAdo(e.lock_word));
        }
        HopscotchTable::set_lock_word(&mut self.region, e.offset, work_id)?;
        Ok(())
    }

    /// Releases the pair lock if `work_id` holds it. Returns whether it did.
    pub fn unlock_key(&mut self, key: &[u8], work_id: u64) -> Result<bool> {
        match self.table.get(&self.region, key)? {
            Some(e) if e.lock_word == work_id => {
                HopscotchTable::set_lock_word(&mut self.region, e.offset, 0)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    pub fn lock_holder(&self, key: &[u8]) -> Result<Option<u64>> {
        Ok(self.table.get(&self.region, key)?.and_then(|e| (e.lock_word != 0).then_some(e.lock_word)))
    }

    pub fn allocate(&mut self, size: u64, alignment: u64) -> Result<u64> {
        let off = self.region.heap_alloc(size, alignment)?;
        Ok(off)
    }

    pub fn free(&mut self, offset: u64) -> Result<()> {
        self.region.heap_free(offset)?;
        Ok(())
    }

    pub fn info(&self) -> Result<PoolInfo> {
        let h = self.region.heap_stats();
        Ok(PoolInfo {
            size: self.region.capacity(),
            free_bytes: h.free_bytes,
            used_bytes: h.used_bytes(),
            pairs: self.table.len(&self.region)?,
        })
    }

    pub fn len(&self) -> Result<u64> {
        Ok(self.table.len(&self.region)?)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn ref_vector(&self) -> Result<Vec<RefEntry>> {
        let mut out = Vec::new();
        self.table.iterate(&self.region, |e| out.push(RefEntry { key: e.key.clone(), value: e.value }))?;
        Ok(out)
    }

    pub fn start_cursor(&self) -> Cursor {
        Cursor { generation: self.generation, position: 0 }
    }

    /// Up to `max` pairs from `cursor`; the returned cursor is None at the
    /// end of the table.
    pub fn iterate(&self, cursor: Cursor, max: usize) -> Result<(Vec<RefEntry>, Option<Cursor>)> {
        if cursor.generation != self.generation {
            return Err(StoreError::UnknownCursor);
        }
        let (batch, next) = self.table.scan(&self.region, cursor.position, max.max(1))?;
        Ok((
            batch.into_iter().map(|e| RefEntry { key: e.key, value: e.value }).collect(),
            next.map(|position| Cursor { generation: self.generation, position }),
        ))
    }

    /// Looks a key up through the ordered key index, built on first use and
    /// maintained afterwards.
    pub fn find_key(&mut self, pattern: &KeyPattern) -> Result<Option<Vec<u8>>> {
        if self.sorted_keys.is_none() {
            let mut keys = BTreeSet::new();
            self.table.iterate(&self.region, |e| {
                keys.insert(e.key.clone());
            })?;
            self.sorted_keys = Some(keys);
        }
        let keys = self.sorted_keys.as_ref().expect("built above");
        use std::ops::Bound::{Excluded, Included, Unbounded};
        Ok(match pattern {
            KeyPattern::Exact(k) => keys.get(k).cloned(),
            KeyPattern::Prefix(p) => keys
                .range::<Vec<u8>, _>((Included(p), Unbounded))
                .next()
                .filter(|k| k.starts_with(p))
                .cloned(),
            KeyPattern::After(k) => keys.range::<Vec<u8>, _>((Excluded(k), Unbounded)).next().cloned(),
        })
    }

    /// SHA-256 over every (key, value) pair in key order.
    pub fn digest(&self) -> Result<[u8; 32]> {
        let mut pairs = self.ref_vector()?;
        pairs.sort_by(|a, b| a.key.cmp(&b.key));
        let mut h = Sha256::new();
        for p in pairs {
            h.update((p.key.len() as u64).to_le_bytes());
            h.update(&p.key);
            h.update(p.value.length.to_le_bytes());
            h.update(self.read_value(p.value)?);
        }
        Ok(h.finalize().into())
    }

    /// Structural sweep: table invariants, heap tiling, and every
    /// allocation the table references is live.
    pub fn check(&self) -> std::result::Result<(), String> {
        self.table.check_invariants(&self.region).map_err(|e| e.to_string())?;
        self.region.extents().map_err(|e| format!("heap: {e}"))?;
        let mut owned = self.table.owned_allocations(&self.region).map_err(|e| e.to_string())?;
        for e in self.ref_vector().map_err(|e| e.to_string())? {
            if e.value.offset != NIL {
                owned.push(e.value.offset);
            }
        }
        for off in owned {
            if !self.region.is_live_allocation(off) {
                return Err(format!("reachable object {off:#x} is not allocated"));
            }
        }
        Ok(())
    }
}

/// Pool handles carry the owning shard id in their top 16 bits.
pub type PoolHandle = u64;

pub fn handle_shard(h: PoolHandle) -> u16 {
    (h >> 48) as u16
}

enum Storage {
    Dir { path: PathBuf, sync: SyncMode },
    Memory { kind: BackingKind },
}

struct PoolSlot {
    pool: Arc<Mutex<Pool>>,
    open_handles: usize,
}

/// One shard's pool registry. Pools in a directory-backed shard are files
/// `<dir>/<name>.pool`; in-memory pools live until deleted.
pub struct Shard {
    id: u16,
    storage: Storage,
    pools: HashMap<String, PoolSlot>,
    handles: HashMap<PoolHandle, String>,
    next_handle: u64,
}

pub fn validate_pool_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidArgument(format!("bad pool name {name:?}")))
    }
}

impl Shard {
    pub fn with_dir(id: u16, dir: impl Into<PathBuf>, sync: SyncMode) -> Result<Shard> {
        let path = dir.into();
        fs::create_dir_all(&path)?;
        Ok(Shard::new(id, Storage::Dir { path, sync }))
    }

    pub fn in_memory(id: u16, kind: BackingKind) -> Shard {
        Shard::new(id, Storage::Memory { kind })
    }

    fn new(id: u16, storage: Storage) -> Shard {
        Shard { id, storage, pools: HashMap::new(), handles: HashMap::new(), next_handle: 1 }
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    fn pool_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.{POOL_SUFFIX}"))
    }

    fn issue(&mut self, name: &str) -> PoolHandle {
        let h = (u64::from(self.id) << 48) | self.next_handle;
        self.next_handle += 1;
        self.handles.insert(h, name.to_string());
        self.pools.get_mut(name).expect("slot exists").open_handles += 1;
        h
    }

    pub fn create_pool(&mut self, name: &str, size: u64) -> Result<PoolHandle> {
        validate_pool_name(name)?;
        let pool = match &self.storage {
            Storage::Dir { path, sync } => {
                let target = Self::pool_path(path, name);
                if self.pools.contains_key(name) || target.exists() {
                    return Err(StoreError::NameCollision(name.into()));
                }
                // Initialise under a temporary name so a crash leaves either
                // no pool or a complete one.
                let tmp = path.join(format!("{name}.{POOL_SUFFIX}.tmp"));
                let _ = fs::remove_file(&tmp);
                let pool = Pool::create_file(&tmp, name, size, *sync)?;
                fs::rename(&tmp, &target)?;
                if let Ok(d) = fs::File::open(path) {
                    let _ = d.sync_all();
                }
                pool
            }
            Storage::Memory { kind } => {
                if self.pools.contains_key(name) {
                    return Err(StoreError::NameCollision(name.into()));
                }
                Pool::create_in_memory(name, size, *kind)?
            }
        };
        self.pools.insert(name.into(), PoolSlot { pool: Arc::new(Mutex::new(pool)), open_handles: 0 });
        Ok(self.issue(name))
    }

    pub fn open_pool(&mut self, name: &str) -> Result<PoolHandle> {
        validate_pool_name(name)?;
        if !self.pools.contains_key(name) {
            let Storage::Dir { path, sync } = &self.storage else {
                return Err(StoreError::PoolNotFound(name.into()));
            };
            let p = Self::pool_path(path, name);
            if !p.exists() {
                return Err(StoreError::PoolNotFound(name.into()));
            }
            let pool = Pool::open_file(&p, name, *sync)?;
            self.pools.insert(name.into(), PoolSlot { pool: Arc::new(Mutex::new(pool)), open_handles: 0 });
        }
        Ok(self.issue(name))
    }

    fn resolve(&self, h: PoolHandle) -> Result<&String> {
        let owner = handle_shard(h);
        if owner != self.id {
            return Err(StoreError::WrongShard { owner, shard: self.id });
        }
        self.handles.get(&h).ok_or(StoreError::InvalidHandle(h))
    }

    pub fn close_pool(&mut self, h: PoolHandle) -> Result<()> {
        let name = self.resolve(h)?.clone();
        self.handles.remove(&h);
        let slot = self.pools.get_mut(&name).expect("open handle has a slot");
        slot.open_handles -= 1;
        if slot.open_handles == 0 && matches!(self.storage, Storage::Dir { .. }) {
            self.pools.remove(&name);
        }
        Ok(())
    }

    pub fn delete_pool(&mut self, name: &str) -> Result<()> {
        validate_pool_name(name)?;
        if let Some(slot) = self.pools.get(name) {
            if slot.open_handles > 0 {
                return Err(StoreError::Busy(name.into()));
            }
        }
        match &self.storage {
            Storage::Dir { path, .. } => {
                let p = Self::pool_path(path, name);
                if !p.exists() {
                    return Err(StoreError::PoolNotFound(name.into()));
                }
                fs::remove_file(p)?;
            }
            Storage::Memory { .. } => {
                self.pools.remove(name).ok_or_else(|| StoreError::PoolNotFound(name.into()))?;
            }
        }
        Ok(())
    }

    pub fn pool(&self, h: PoolHandle) -> Result<Arc<Mutex<Pool>>> {
        let name = self.resolve(h)?;
        Ok(self.pools[name].pool.clone())
    }

    pub fn pool_name(&self, h: PoolHandle) -> Result<&str> {
        self.resolve(h).map(|s| s.as_str())
    }

    /// Currently open pools by name.
    pub fn open_pools(&self) -> impl Iterator<Item = (&str, &Arc<Mutex<Pool>>)> {
        self.pools.iter().filter(|(_, s)| s.open_handles > 0).map(|(n, s)| (n.as_str(), &s.pool))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem_pool() -> Pool {
        Pool::create_in_memory("p", 4 << 20, BackingKind::Memory).unwrap()
    }

    #[test]
    fn put_get_roundtrip() {
        let mut p = mem_pool();
        p.put(b"k", b"abc").unwrap();
        assert_eq!(p.get(b"k").unwrap(), b"abc");
        p.put(b"k", b"").unwrap();
        assert_eq!(p.get(b"k").unwrap(), b"");
        assert!(matches!(p.get(b"x"), Err(StoreError::NotFound)));
        assert!(matches!(p.put(b"", b"v"), Err(StoreError::InvalidArgument(_))));
    }

    #[test]
    fn resize_preserves_prefix_and_zeroes_tail() {
        let mut p = mem_pool();
        p.put(b"k", b"hello").unwrap();
        p.resize(b"k", 9).unwrap();
        assert_eq!(p.get(b"k").unwrap(), b"hello\0\0\0\0");
        p.resize(b"k", 2).unwrap();
        assert_eq!(p.get(b"k").unwrap(), b"he");
    }

    #[test]
    fn locked_pair_rejects_client_ops() {
        let mut p = mem_pool();
        p.put(b"k", b"v").unwrap();
        p.lock_key(b"k", 7).unwrap();
        assert!(matches!(p.put(b"k", b"w"), Err(StoreError::LockedByAdo(7))));
        assert!(matches!(p.get(b"k"), Err(StoreError::LockedByAdo(7))));
        assert!(matches!(p.lock_key(b"k", 8), Err(StoreError::LockedByAdo(7))));
        p.put_as(b"k", b"w", Access::Work(7)).unwrap();
        assert!(!p.unlock_key(b"k", 8).unwrap());
        assert!(p.unlock_key(b"k", 7).unwrap());
        assert_eq!(p.get(b"k").unwrap(), b"w");
    }

    #[test]
    fn put_larger_than_pool() {
        let mut p = mem_pool();
        assert!(matches!(p.put(b"k", &vec![1; 8 << 20]), Err(StoreError::OutOfMemory)));
        assert!(p.is_empty().unwrap());
        p.check().unwrap();
    }

    #[test]
    fn allocation_accounting() {
        let mut p = Pool::create_in_memory("p", 128 << 20, BackingKind::Memory).unwrap();
        let before = p.info().unwrap().free_bytes;
        p.allocate(64 << 20, 64).unwrap();
        let after = p.info().unwrap().free_bytes;
        assert!(before - after >= 64 << 20);
        assert!(before - after <= (64 << 20) + 4096);
    }

    #[test]
    fn cursor_invalidated_by_erase() {
        let mut p = mem_pool();
        for i in 0..10u8 {
            p.put(&[b'k', i], &[i]).unwrap();
        }
        let (batch, next) = p.iterate(p.start_cursor(), 4).unwrap();
        assert_eq!(batch.len(), 4);
        p.erase(&[b'k', 9]).unwrap();
        assert!(matches!(p.iterate(next.unwrap(), 4), Err(StoreError::UnknownCursor)));
        let mut all = Vec::new();
        let mut c = Some(p.start_cursor());
        while let Some(cur) = c {
            let (b, n) = p.iterate(cur, 3).unwrap();
            all.extend(b);
            c = n;
        }
        assert_eq!(all.len(), 9);
    }

    #[test]
    fn find_key_patterns() {
        let mut p = mem_pool();
        for k in ["apple", "banana", "band", "cherry"] {
            p.put(k.as_bytes(), b"").unwrap();
        }
        assert_eq!(p.find_key(&KeyPattern::Prefix(b"ban".to_vec())).unwrap().unwrap(), b"banana");
        assert_eq!(p.find_key(&KeyPattern::After(b"banana".to_vec())).unwrap().unwrap(), b"band");
        p.put(b"bana", b"").unwrap();
        assert_eq!(p.find_key(&KeyPattern::Prefix(b"ban".to_vec())).unwrap().unwrap(), b"bana");
        assert!(p.find_key(&KeyPattern::Exact(b"kiwi".to_vec())).unwrap().is_none());
    }

    #[test]
    fn shard_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Shard::with_dir(3, dir.path(), SyncMode::Msync).unwrap();
        let h = s.create_pool("p", 1 << 20).unwrap();
        assert!(matches!(s.create_pool("p", 1 << 20), Err(StoreError::NameCollision(_))));
        s.pool(h).unwrap().lock().put(b"k", b"v").unwrap();
        assert!(matches!(s.delete_pool("p"), Err(StoreError::Busy(_))));
        s.close_pool(h).unwrap();
        let h = s.open_pool("p").unwrap();
        assert_eq!(s.pool(h).unwrap().lock().get(b"k").unwrap(), b"v");
        let foreign = (4u64 << 48) | 1;
        assert!(matches!(s.pool(foreign), Err(StoreError::WrongShard { owner: 4, shard: 3 })));
        s.close_pool(h).unwrap();
        s.delete_pool("p").unwrap();
        assert!(matches!(s.open_pool("p"), Err(StoreError::PoolNotFound(_))));
        assert!(matches!(s.open_pool("missing"), Err(StoreError::PoolNotFound(_))));
    }
}
