//! Plugin-local heap. Coarse chunks come from the pool allocator and are
//! listed durably in the value of the [`HEAP_KEY`] pair:
//!
//! ```text
//! +0 magic "CDPHEAP1"   +8 count u64   +16 { offset u64, length u64 } x count
//! ```
//!
//! Free space inside the chunks is volatile. After a restart every chunk
//! starts free and the engine marks each object reachable from a volume
//! root as used, so objects that were never linked are reclaimed.

use std::collections::BTreeMap;

use super::{CdpError, Result};
use crate::pmem::PersistentRegion;

pub const HEAP_KEY: &[u8] = b"__cdp.heap";
pub const MAX_CHUNKS: u64 = 1024;
pub const HEAP_PAIR_BYTES: u64 = 16 + 16 * MAX_CHUNKS;
const HEAP_MAGIC: u64 = u64::from_le_bytes(*b"CDPHEAP1");
const ALIGN: u64 = 64;

#[derive(Debug, Default)]
pub struct ChunkHeap {
    pair: Option<u64>,
    chunks: Vec<(u64, u64)>,
    free: BTreeMap<u64, u64>,
}

impl ChunkHeap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Approximate DRAM held by the free lists.
    pub fn volatile_bytes(&self) -> u64 {
        (self.chunks.len() * 16 + self.free.len() * 48) as u64
    }

    /// Reads the chunk list from the pair value at `pair`. A zeroed value
    /// (pair created but never written) is an empty heap.
    pub fn load(region: &PersistentRegion, pair: u64) -> Result<Self> {
        let mut h = ChunkHeap { pair: Some(pair), ..Default::default() };
        let magic = region.read_u64(pair)?;
        if magic == 0 {
            return Ok(h);
        }
        if magic != HEAP_MAGIC {
            return Err(CdpError::Corrupt("bad heap pair magic".into()));
        }
        let n = region.read_u64(pair + 8)?;
        if n > MAX_CHUNKS {
            return Err(CdpError::Corrupt(format!("{n} heap chunks")));
        }
        for i in 0..n {
            let off = region.read_u64(pair + 16 + i * 16)?;
            let len = region.read_u64(pair + 24 + i * 16)?;
            if !region.is_live_allocation(off) || region.allocation_size(off).is_some_and(|s| s < len) {
                return Err(CdpError::Corrupt(format!("heap chunk {off:#x} is not a pool allocation")));
            }
            h.chunks.push((off, len));
            h.free.insert(off, len);
        }
        Ok(h)
    }

    pub fn pair(&self) -> Option<u64> {
        self.pair
    }

    pub fn chunks(&self) -> &[(u64, u64)] {
        &self.chunks
    }

    pub fn chunk_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.1).sum()
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.values().sum()
    }

    /// Records a chunk obtained from the pool. The entry is persisted
    /// before the count that publishes it.
    pub fn add_chunk(&mut self, region: &mut PersistentRegion, pair: u64, offset: u64, len: u64) -> Result<()> {
        if self.pair.is_some_and(|p| p != pair) {
            return Err(CdpError::InvalidArgument("heap pair moved".into()));
        }
        self.pair = Some(pair);
        let n = self.chunks.len() as u64;
        if n == MAX_CHUNKS {
            return Err(CdpError::InvalidArgument("plugin heap chunk table full".into()));
        }
        if region.read_u64(pair)? != HEAP_MAGIC {
            region.write_u64(pair + 8, 0)?;
            region.persist(pair + 8, 8)?;
            region.atomic_store_64(pair, HEAP_MAGIC)?;
        }
        let mut e = [0u8; 16];
        e[..8].copy_from_slice(&offset.to_le_bytes());
        e[8..].copy_from_slice(&len.to_le_bytes());
        region.write(pair + 16 + n * 16, &e)?;
        region.persist(pair + 16 + n * 16, 16)?;
        region.atomic_store_64(pair + 8, n + 1)?;
        self.chunks.push((offset, len));
        self.free_range(offset, len);
        Ok(())
    }

    /// First-fit allocation of `size` bytes aligned to 64.
    pub fn alloc(&mut self, size: u64) -> Option<u64> {
        let size = size.max(1).next_multiple_of(ALIGN);
        let (&start, &len) = self.free.iter().find(|(&s, &l)| {
            let a = s.next_multiple_of(ALIGN);
            a + size <= s + l
        })?;
        let at = start.next_multiple_of(ALIGN);
        self.free.remove(&start);
        if at > start {
            self.free.insert(start, at - start);
        }
        if at + size < start + len {
            self.free.insert(at + size, start + len - at - size);
        }
        Some(at)
    }

    pub fn free(&mut self, offset: u64, size: u64) {
        self.free_range(offset, size.max(1).next_multiple_of(ALIGN));
    }

    fn free_range(&mut self, mut start: u64, mut len: u64) {
        if let Some((&ps, &pl)) = self.free.range(..start).next_back() {
            debug_assert!(ps + pl <= start, "double free in plugin heap");
            if ps + pl == start {
                self.free.remove(&ps);
                start = ps;
                len += pl;
            }
        }
        if let Some(&nl) = self.free.get(&(start + len)) {
            self.free.remove(&(start + len));
            len += nl;
        }
        self.free.insert(start, len);
    }

    /// Claims `[offset, offset+size)` during recovery. Fails if the range
    /// is not entirely free, which means two objects overlap or an object
    /// lies outside every chunk.
    pub fn mark_used(&mut self, offset: u64, size: u64) -> Result<()> {
        let size = size.max(1).next_multiple_of(ALIGN);
        let Some((&s, &l)) = self.free.range(..=offset).next_back() else {
            return Err(CdpError::Corrupt(format!("object {offset:#x} outside the plugin heap")));
        };
        if offset + size > s + l {
            return Err(CdpError::Corrupt(format!("object {offset:#x}+{size} overlaps another object")));
        }
        self.free.remove(&s);
        if offset > s {
            self.free.insert(s, offset - s);
        }
        if offset + size < s + l {
            self.free.insert(offset + size, s + l - offset - size);
        }
        Ok(())
    }
}
