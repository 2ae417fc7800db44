//! The CDP engine hosted directly on a pool, without the ADO runtime.
//! Plugin heap chunks are taken straight from the pool allocator and
//! summarization and trim run inline after each seal.

use std::collections::HashMap;

use super::engine::{is_volume_root, CdpEngine, UpdateOutcome, VolumeStats, VOLUME_ROOT_BYTES};
use super::heap::{HEAP_KEY, HEAP_PAIR_BYTES};
use super::{BlockMapping, CdpError, ManagedRange, QueryRange, Result, VolumeConfig, MIB};
use crate::pmem::PersistentRegion;
use crate::store::{Access, Pool, StoreError};

pub const DEFAULT_CHUNK: u64 = 64 * MIB;

pub fn check_tag(tag: &[u8]) -> Result<()> {
    if tag.is_empty() || tag.starts_with(b"__cdp.") {
        return Err(CdpError::InvalidArgument(format!("bad volume tag {:?}", String::from_utf8_lossy(tag))));
    }
    Ok(())
}

/// Volume tag and root offset.
pub type VolumeRoot = (Vec<u8>, u64);

/// Heap pair offset and volume roots found in a pool.
pub fn discover(pool: &Pool) -> Result<(Option<u64>, Vec<VolumeRoot>)> {
    let heap = match pool.value_ref(HEAP_KEY) {
        Ok(v) => Some(v.offset),
        Err(StoreError::NotFound) => None,
        Err(e) => return Err(e.into()),
    };
    let roots = pool
        .ref_vector()?
        .into_iter()
        .filter(|e| e.value.length == VOLUME_ROOT_BYTES && is_volume_root(pool.region(), e.value.offset))
        .map(|e| (e.key, e.value.offset))
        .collect();
    Ok((heap, roots))
}

pub struct LocalCdp {
    pool: Pool,
    engine: CdpEngine,
    chunk_size: u64,
    default_config: VolumeConfig,
    roots: HashMap<Vec<u8>, u64>,
    maintain: bool,
}

impl LocalCdp {
    /// Adopts a pool, recovering any CDP state it holds.
    pub fn new(pool: Pool, chunk_size: u64, default_config: VolumeConfig) -> Result<Self> {
        let mut me = LocalCdp {
            pool,
            engine: CdpEngine::new(),
            chunk_size,
            default_config,
            roots: HashMap::new(),
            maintain: true,
        };
        let (heap, roots) = discover(&me.pool)?;
        let offsets: Vec<u64> = roots.iter().map(|r| r.1).collect();
        me.engine.recover(me.pool.region_mut(), heap, &offsets)?;
        me.roots = roots.into_iter().collect();
        Ok(me)
    }

    /// With maintenance off, sealed quanta are left for explicit
    /// [`summarize`](Self::summarize) and [`trim`](Self::trim) calls.
    pub fn set_maintenance(&mut self, on: bool) {
        self.maintain = on;
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut Pool {
        &mut self.pool
    }

    pub fn engine(&self) -> &CdpEngine {
        &self.engine
    }

    pub fn into_pool(self) -> Pool {
        self.pool
    }

    fn grow(&mut self, need: u64) -> Result<()> {
        let (pair, _) = self.pool.create_key(HEAP_KEY, HEAP_PAIR_BYTES, Access::Client)?;
        let size = self.chunk_size.max(need.next_multiple_of(MIB));
        let chunk = self.pool.allocate(size, 64)?;
        self.engine.add_chunk(self.pool.region_mut(), pair.offset, chunk, size)
    }

    fn with_memory<T>(&mut self, mut op: impl FnMut(&mut CdpEngine, &mut PersistentRegion) -> Result<T>) -> Result<T> {
        loop {
            match op(&mut self.engine, self.pool.region_mut()) {
                Err(CdpError::NeedMemory(n)) => self.grow(n)?,
                r => return r,
            }
        }
    }

    fn root(&self, tag: &[u8]) -> Result<u64> {
        self.roots.get(tag).copied().ok_or(CdpError::VolumeNotFound)
    }

    fn root_or_create(&mut self, tag: &[u8], config: VolumeConfig) -> Result<(u64, bool)> {
        check_tag(tag)?;
        if let Some(&r) = self.roots.get(tag) {
            return Ok((r, false));
        }
        let (v, _) = self.pool.create_key(tag, VOLUME_ROOT_BYTES, Access::Client)?;
        self.with_memory(|e, r| e.init_volume(r, v.offset, config))?;
        self.roots.insert(tag.to_vec(), v.offset);
        Ok((v.offset, true))
    }

    /// Creates the volume with `config`, or reconfigures it.
    pub fn configure(&mut self, tag: &[u8], config: VolumeConfig) -> Result<()> {
        let (root, created) = self.root_or_create(tag, config)?;
        if !created {
            self.engine.configure(self.pool.region_mut(), root, config)?;
        }
        Ok(())
    }

    pub fn update(&mut self, tag: &[u8], v: u64, len: u64, m: u64, ts: u64) -> Result<UpdateOutcome> {
        let (root, _) = self.root_or_create(tag, self.default_config)?;
        let mut out = self.with_memory(|e, r| e.update(r, root, v, len, m, ts))?;
        if out.sealed.is_none() {
            out.sealed = self.with_memory(|e, r| e.seal_if_full(r, root))?;
        }
        if out.sealed.is_some() && self.maintain {
            self.with_memory(|e, r| e.summarize_all(r, root))?;
            let now = self.engine.last_timestamp(self.pool.region(), root)?;
            self.engine.trim(self.pool.region_mut(), root, now)?;
        }
        Ok(out)
    }

    pub fn query(&mut self, tag: &[u8], t: u64, range: QueryRange) -> Result<BlockMapping> {
        let root = self.root(tag)?;
        self.engine.query(self.pool.region(), root, t, range)
    }

    pub fn summarize(&mut self, tag: &[u8]) -> Result<usize> {
        let root = self.root(tag)?;
        self.with_memory(|e, r| e.summarize_all(r, root))
    }

    pub fn trim(&mut self, tag: &[u8], now: u64) -> Result<u64> {
        let root = self.root(tag)?;
        self.engine.trim(self.pool.region_mut(), root, now)
    }

    pub fn stats(&self, tag: &[u8]) -> Result<VolumeStats> {
        self.engine.stats(self.pool.region(), self.root(tag)?)
    }

    pub fn records(&self, tag: &[u8]) -> Result<Vec<ManagedRange>> {
        self.engine.records(self.pool.region(), self.root(tag)?)
    }

    /// Timestamp of the newest committed record, or 0.
    pub fn last_timestamp(&mut self, tag: &[u8]) -> Result<u64> {
        let root = self.root(tag)?;
        self.engine.last_timestamp(self.pool.region(), root)
    }

    pub fn volumes(&self) -> Vec<Vec<u8>> {
        let mut v: Vec<_> = self.roots.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn digest(&self, tag: &[u8]) -> Result<[u8; 32]> {
        self.engine.volume_digest(self.pool.region(), self.root(tag)?)
    }

    /// Invariant sweep over the pool and every volume.
    pub fn check(&self) -> std::result::Result<(), String> {
        self.pool.check()?;
        for c in self.engine.heap().chunks() {
            if !self.pool.region().is_live_allocation(c.0) {
                return Err(format!("heap chunk {:#x} not allocated", c.0));
            }
        }
        for (tag, &root) in &self.roots {
            self.engine
                .check_volume(self.pool.region(), root)
                .map_err(|e| format!("volume {}: {e}", String::from_utf8_lossy(tag)))?;
        }
        Ok(())
    }
}
