//! Two-level heap.
//!
//! The coarse level tiles the region body with tagged extents. Every extent
//! starts with a 64-byte boundary tag:
//!
//! ```text
//! +0  magic u32 "EXT1"   +4 kind u32 (FREE=1 LARGE=2 SLAB=3)
//! +8  length u64 (whole extent, multiple of 64)
//! +16 class u64 / +24 slot_count u64 / +32 slots_offset u64   (SLAB only)
//! ```
//!
//! Large allocations are extents whose payload begins right after the tag.
//! Small allocations come from slabs: a slab carries a persistent slot
//! bitmap after its tag. The fine level (free slot lists, merged free
//! ranges) is volatile and rebuilt on open by walking the tags.
//!
//! Frees issued inside a transaction are deferred: the persistent tag or
//! bitmap bit changes immediately (logged), but the memory only becomes
//! allocatable after commit, so a rollback never finds freed bytes reused.

use std::collections::{BTreeMap, BTreeSet};

use super::{PersistentRegion, PmemError, Result};

const TAG_MAGIC: u32 = u32::from_le_bytes(*b"EXT1");
const TAG: u64 = 64;
const KIND_FREE: u32 = 1;
const KIND_LARGE: u32 = 2;
const KIND_SLAB: u32 = 3;
const SLAB_SIZE: u64 = 64 * 1024;
const MIN_CLASS: u64 = 64;
const MAX_CLASS: u64 = 4096;
const NCLASSES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtentKind {
    Free,
    Large,
    Slab { class: u64 },
}

/// One tagged extent as found on media.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtentInfo {
    pub start: u64,
    pub length: u64,
    pub kind: ExtentKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeapStats {
    pub body_bytes: u64,
    pub free_bytes: u64,
    pub live_allocations: u64,
}

impl HeapStats {
    pub fn used_bytes(&self) -> u64 {
        self.body_bytes - self.free_bytes
    }
}

#[derive(Debug)]
struct Slab {
    class: u64,
    slots_offset: u64,
    slot_count: u64,
    free: Vec<u32>,
}

#[derive(Debug)]
enum Pending {
    Range(u64, u64),
    Slot(u64, u32),
}

#[derive(Debug)]
pub(super) struct Heap {
    body_start: u64,
    body_end: u64,
    free: BTreeMap<u64, u64>,
    large: BTreeMap<u64, u64>,
    slabs: BTreeMap<u64, Slab>,
    avail: [BTreeSet<u64>; NCLASSES],
    pending: Vec<Pending>,
    live: u64,
}

fn class_index(class: u64) -> usize {
    (class.trailing_zeros() - MIN_CLASS.trailing_zeros()) as usize
}

fn bitmap_bytes(class: u64) -> u64 {
    (SLAB_SIZE / class).div_ceil(64) * 8
}

impl Heap {
    pub(super) fn empty(body_start: u64, body_end: u64) -> Self {
        Heap {
            body_start,
            body_end,
            free: BTreeMap::new(),
            large: BTreeMap::new(),
            slabs: BTreeMap::new(),
            avail: Default::default(),
            pending: Vec::new(),
            live: 0,
        }
    }

    fn insert_free(&mut self, mut start: u64, mut len: u64) {
        if let Some((&ps, &pl)) = self.free.range(..start).next_back() {
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

    /// First free range able to hold an extent of `need` bytes whose
    /// payload (tag + 64) is aligned to `align`.
    fn find_fit(&self, need: u64, align: u64) -> Option<(u64, u64, u64)> {
        for (&s, &l) in &self.free {
            let payload = (s + TAG).next_multiple_of(align);
            let tag_start = payload - TAG;
            if tag_start + need <= s + l {
                return Some((s, l, tag_start));
            }
        }
        None
    }
}

impl PersistentRegion {
    pub(super) fn format_heap(&mut self) -> Result<()> {
        let (s, e) = (self.heap.body_start, self.heap.body_end);
        self.write_tag(s, KIND_FREE, e - s)?;
        self.persist(s, TAG)?;
        self.heap = Heap::empty(s, e);
        self.heap.free.insert(s, e - s);
        Ok(())
    }

    fn write_tag(&mut self, at: u64, kind: u32, len: u64) -> Result<()> {
        let mut tag = [0u8; 16];
        tag[0..4].copy_from_slice(&TAG_MAGIC.to_le_bytes());
        tag[4..8].copy_from_slice(&kind.to_le_bytes());
        tag[8..16].copy_from_slice(&len.to_le_bytes());
        if self.tx_active() {
            self.tx_write(at, &tag)
        } else {
            self.write(at, &tag)
        }
    }

    fn read_tag(&self, at: u64) -> Result<(u32, u64)> {
        let magic = self.read_u32(at)?;
        if magic != TAG_MAGIC {
            return Err(PmemError::HeapCorruption(format!("bad tag magic at {at:#x}")));
        }
        Ok((self.read_u32(at + 4)?, self.read_u64(at + 8)?))
    }

    /// Walks the boundary tags on media, validating the tiling.
    pub fn extents(&self) -> Result<Vec<ExtentInfo>> {
        let (mut at, end) = (self.heap.body_start, self.heap.body_end);
        let mut out = Vec::new();
        while at < end {
            let (kind, len) = self.read_tag(at)?;
            if len < TAG || len % 64 != 0 || at + len > end {
                return Err(PmemError::HeapCorruption(format!("extent {at:#x} length {len}")));
            }
            let kind = match kind {
                KIND_FREE => ExtentKind::Free,
                KIND_LARGE => ExtentKind::Large,
                KIND_SLAB => ExtentKind::Slab { class: self.read_u64(at + 16)? },
                k => return Err(PmemError::HeapCorruption(format!("extent {at:#x} kind {k}"))),
            };
            out.push(ExtentInfo { start: at, length: len, kind });
            at += len;
        }
        if at != end {
            return Err(PmemError::HeapCorruption("tiling overruns body".into()));
        }
        Ok(out)
    }

    /// Discards the volatile allocator state and rebuilds it from the tags.
    pub fn rebuild_heap(&mut self) -> Result<()> {
        let mut heap = Heap::empty(self.heap.body_start, self.heap.body_end);
        for ext in self.extents()? {
            match ext.kind {
                ExtentKind::Free => heap.insert_free(ext.start, ext.length),
                ExtentKind::Large => {
                    heap.large.insert(ext.start, ext.length);
                    heap.live += 1;
                }
                ExtentKind::Slab { class } => {
                    let at = ext.start;
                    let slot_count = self.read_u64(at + 24)?;
                    let slots_offset = self.read_u64(at + 32)?;
                    if !(MIN_CLASS..=MAX_CLASS).contains(&class)
                        || !class.is_power_of_two()
                        || ext.length != SLAB_SIZE
                        || slots_offset < at + TAG + bitmap_bytes(class)
                        || slots_offset + slot_count * class > at + SLAB_SIZE
                    {
                        return Err(PmemError::HeapCorruption(format!("slab {at:#x} geometry")));
                    }
                    let mut free = Vec::new();
                    for i in (0..slot_count).rev() {
                        let w = self.read_u64(at + TAG + (i / 64) * 8)?;
                        if w & (1 << (i % 64)) == 0 {
                            free.push(i as u32);
                        } else {
                            heap.live += 1;
                        }
                    }
                    if !free.is_empty() {
                        heap.avail[class_index(class)].insert(at);
                    }
                    heap.slabs.insert(at, Slab { class, slots_offset, slot_count, free });
                }
            }
        }
        self.heap = heap;
        Ok(())
    }

    pub(super) fn heap_commit_pending(&mut self) {
        for p in std::mem::take(&mut self.heap.pending) {
            match p {
                Pending::Range(s, l) => self.heap.insert_free(s, l),
                Pending::Slot(slab, idx) => {
                    let s = self.heap.slabs.get_mut(&slab).expect("pending slot of unknown slab");
                    s.free.push(idx);
                    let ci = class_index(s.class);
                    self.heap.avail[ci].insert(slab);
                }
            }
        }
    }

    /// Allocates `size` bytes aligned to `alignment` (a power of two).
    /// Runs inside the caller's transaction if one is active.
    pub fn heap_alloc(&mut self, size: u64, alignment: u64) -> Result<u64> {
        if size == 0 || !alignment.is_power_of_two() {
            return Err(PmemError::InvalidArgument(format!(
                "allocation of {size} bytes aligned to {alignment}"
            )));
        }
        if self.tx_active() {
            self.alloc_in_tx(size, alignment)
        } else {
            self.transaction(|r| r.alloc_in_tx(size, alignment))
        }
    }

    pub fn heap_free(&mut self, offset: u64) -> Result<()> {
        if self.tx_active() {
            self.free_in_tx(offset)
        } else {
            self.transaction(|r| r.free_in_tx(offset))
        }
    }

    fn alloc_in_tx(&mut self, size: u64, alignment: u64) -> Result<u64> {
        let want = size.max(alignment).max(MIN_CLASS);
        if want <= MAX_CLASS {
            self.alloc_slot(want.next_power_of_two())
        } else {
            self.alloc_extent(KIND_LARGE, TAG + size.next_multiple_of(64), alignment.max(64))
                .map(|tag| tag + TAG)
        }
    }

    /// Carves an extent out of the free ranges; returns its tag offset.
    fn alloc_extent(&mut self, kind: u32, need: u64, align: u64) -> Result<u64> {
        let (s, l, tag_start) = self
            .heap
            .find_fit(need, align)
            .ok_or(PmemError::OutOfMemory(need))?;
        let prefix = tag_start - s;
        let suffix = s + l - tag_start - need;
        if prefix > 0 {
            self.write_tag(s, KIND_FREE, prefix)?;
        }
        self.write_tag(tag_start, kind, need)?;
        if suffix > 0 {
            self.write_tag(tag_start + need, KIND_FREE, suffix)?;
        }
        let h = &mut self.heap;
        h.free.remove(&s);
        if prefix > 0 {
            h.free.insert(s, prefix);
        }
        if suffix > 0 {
            h.free.insert(tag_start + need, suffix);
        }
        if kind == KIND_LARGE {
            h.large.insert(tag_start, need);
            h.live += 1;
        }
        Ok(tag_start)
    }

    fn alloc_slot(&mut self, class: u64) -> Result<u64> {
        let ci = class_index(class);
        let slab_at = match self.heap.avail[ci].first() {
            Some(&at) => at,
            None => self.new_slab(class)?,
        };
        let slab = self.heap.slabs.get_mut(&slab_at).unwrap();
        let idx = slab.free.pop().expect("available slab without free slots") as u64;
        let off = slab.slots_offset + idx * class;
        if slab.free.is_empty() {
            self.heap.avail[ci].remove(&slab_at);
        }
        let word_at = slab_at + TAG + (idx / 64) * 8;
        let w = self.read_u64(word_at)?;
        self.tx_write_u64(word_at, w | (1 << (idx % 64)))?;
        self.heap.live += 1;
        Ok(off)
    }

    fn new_slab(&mut self, class: u64) -> Result<u64> {
        let at = self.alloc_extent(KIND_SLAB, SLAB_SIZE, 64)?;
        let bm = bitmap_bytes(class);
        let slots_offset = (at + TAG + bm).next_multiple_of(class);
        let slot_count = (at + SLAB_SIZE - slots_offset) / class;
        let mut geo = [0u8; 24];
        geo[0..8].copy_from_slice(&class.to_le_bytes());
        geo[8..16].copy_from_slice(&slot_count.to_le_bytes());
        geo[16..24].copy_from_slice(&slots_offset.to_le_bytes());
        self.tx_write(at + 16, &geo)?;
        self.tx_write(at + TAG, &vec![0u8; bm as usize])?;
        let free = (0..slot_count as u32).rev().collect();
        self.heap.slabs.insert(at, Slab { class, slots_offset, slot_count, free });
        self.heap.avail[class_index(class)].insert(at);
        Ok(at)
    }

    fn slot_of(&self, offset: u64) -> Option<(u64, u32)> {
        let (&at, slab) = self.heap.slabs.range(..=offset).next_back()?;
        if offset < slab.slots_offset || offset >= slab.slots_offset + slab.slot_count * slab.class {
            return None;
        }
        let rel = offset - slab.slots_offset;
        rel.is_multiple_of(slab.class).then_some((at, (rel / slab.class) as u32))
    }

    fn free_in_tx(&mut self, offset: u64) -> Result<()> {
        if let Some((slab_at, idx)) = self.slot_of(offset) {
            let word_at = slab_at + TAG + (idx as u64 / 64) * 8;
            let w = self.read_u64(word_at)?;
            let bit = 1u64 << (idx % 64);
            if w & bit == 0 {
                return Err(PmemError::HeapCorruption(format!("double free of slot {offset:#x}")));
            }
            self.tx_write_u64(word_at, w & !bit)?;
            self.heap.pending.push(Pending::Slot(slab_at, idx));
            self.heap.live -= 1;
            return Ok(());
        }
        let tag_start = offset.checked_sub(TAG).ok_or_else(|| {
            PmemError::HeapCorruption(format!("free of non-allocation {offset:#x}"))
        })?;
        let len = match self.heap.large.get(&tag_start) {
            Some(&l) => l,
            None => {
                return Err(PmemError::HeapCorruption(format!(
                    "free of {offset:#x}: not a live allocation"
                )))
            }
        };
        let (kind, tag_len) = self.read_tag(tag_start)?;
        if kind != KIND_LARGE || tag_len != len {
            return Err(PmemError::HeapCorruption(format!("tag mismatch at {tag_start:#x}")));
        }
        self.write_tag(tag_start, KIND_FREE, len)?;
        self.heap.large.remove(&tag_start);
        self.heap.pending.push(Pending::Range(tag_start, len));
        self.heap.live -= 1;
        Ok(())
    }

    /// True iff `offset` is the start of a live allocation.
    pub fn is_live_allocation(&self, offset: u64) -> bool {
        if let Some((slab_at, idx)) = self.slot_of(offset) {
            let word_at = slab_at + TAG + (idx as u64 / 64) * 8;
            return self.read_u64(word_at).map(|w| w & (1 << (idx % 64)) != 0).unwrap_or(false);
        }
        offset >= TAG && self.heap.large.contains_key(&(offset - TAG))
    }

    /// Usable size of the live allocation at `offset`.
    pub fn allocation_size(&self, offset: u64) -> Option<u64> {
        if let Some((slab_at, _)) = self.slot_of(offset) {
            return self.is_live_allocation(offset).then(|| self.heap.slabs[&slab_at].class);
        }
        let tag_start = offset.checked_sub(TAG)?;
        self.heap.large.get(&tag_start).map(|l| l - TAG)
    }

    /// Every live allocation as `(offset, usable size)`, in address order.
    pub fn live_allocations(&self) -> Result<Vec<(u64, u64)>> {
        let mut out = Vec::new();
        for ext in self.extents()? {
            match ext.kind {
                ExtentKind::Free => {}
                ExtentKind::Large => out.push((ext.start + TAG, ext.length - TAG)),
                ExtentKind::Slab { class } => {
                    let n = self.read_u64(ext.start + 24)?;
                    let slots = self.read_u64(ext.start + 32)?;
                    for i in 0..n {
                        let w = self.read_u64(ext.start + TAG + (i / 64) * 8)?;
                        if w & (1 << (i % 64)) != 0 {
                            out.push((slots + i * class, class));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn heap_stats(&self) -> HeapStats {
        let h = &self.heap;
        let coarse: u64 = h.free.values().sum();
        let pending: u64 = h
            .pending
            .iter()
            .map(|p| match p {
                Pending::Range(_, l) => *l,
                Pending::Slot(s, _) => h.slabs[s].class,
            })
            .sum();
        let slots: u64 = h.slabs.values().map(|s| s.free.len() as u64 * s.class).sum();
        HeapStats {
            body_bytes: h.body_end - h.body_start,
            free_bytes: coarse + slots + pending,
            live_allocations: h.live,
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::pmem::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn region(cap: u64) -> PersistentRegion {
        PersistentRegion::create_in_memory(cap, 256, BackingKind::Memory).unwrap()
    }

    fn overlaps(v: &[(u64, u64)]) -> bool {
        let mut v = v.to_vec();
        v.sort();
        v.windows(2).any(|w| w[0].0 + w[0].1 > w[1].0)
    }

    #[test]
    fn alignment_contract() {
        let mut r = region(4 << 20);
        for align in [1u64, 8, 64, 128, 4096, 8192, 65536] {
            for size in [1u64, 64, 100, 5000, 70000] {
                let a = r.heap_alloc(size, align).unwrap();
                assert_eq!(a % align, 0, "size {size} align {align}");
                assert!(r.allocation_size(a).unwrap() >= size);
            }
        }
        assert_eq!(r.heap_alloc(64, 64).unwrap() % 64, 0);
    }

    #[test]
    fn double_free_detected() {
        let mut r = region(1 << 20);
        let small = r.heap_alloc(64, 64).unwrap();
        let big = r.heap_alloc(10_000, 64).unwrap();
        r.heap_free(small).unwrap();
        r.heap_free(big).unwrap();
        assert!(matches!(r.heap_free(small), Err(PmemError::HeapCorruption(_))));
        assert!(matches!(r.heap_free(big), Err(PmemError::HeapCorruption(_))));
        assert!(matches!(r.heap_free(12345), Err(PmemError::HeapCorruption(_))));
    }

    #[test]
    fn exhaustion_then_reopen_consistent() {
        let mut r = region(512 * 1024);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut live = vec![];
        loop {
            let size = rng.gen_range(1..3000u64);
            match r.heap_alloc(size, 8) {
                Ok(a) => live.push((a, r.allocation_size(a).unwrap())),
                Err(PmemError::OutOfMemory(_)) => break,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(!overlaps(&live));
        let r2 = PersistentRegion::open_image(r.image(), BackingKind::Memory).unwrap();
        let mut found = r2.live_allocations().unwrap();
        found.sort();
        live.sort();
        assert_eq!(found, live);
        assert_eq!(r2.heap_stats(), r.heap_stats());
    }

    #[test]
    fn free_memory_is_reused() {
        let mut r = region(1 << 20);
        let before = r.heap_stats().free_bytes;
        let a = r.heap_alloc(200_000, 64).unwrap();
        assert!(r.heap_stats().free_bytes <= before - 200_000);
        r.heap_free(a).unwrap();
        assert_eq!(r.heap_stats().free_bytes, before);
        let b = r.heap_alloc(200_000, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn free_inside_tx_not_reused_before_commit() {
        let mut r = region(1 << 20);
        let a = r.heap_alloc(100_000, 64).unwrap();
        r.tx_begin().unwrap();
        r.heap_free(a).unwrap();
        let b = r.heap_alloc(100_000, 64).unwrap();
        assert_ne!(a, b);
        r.tx_commit().unwrap();
        let c = r.heap_alloc(100_000, 64).unwrap();
        assert_eq!(c, a);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        /// Rebuilding the fine state never yields an allocator that hands
        /// out memory overlapping a live allocation.
        #[test]
        fn rebuild_never_overlaps_live(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = region(2 << 20);
            let mut live: Vec<(u64, u64)> = vec![];
            for round in 0..3 {
                for _ in 0..200 {
                    if !live.is_empty() && rng.gen_bool(0.4) {
                        let i = rng.gen_range(0..live.len());
                        let (a, _) = live.swap_remove(i);
                        r.heap_free(a).unwrap();
                    } else {
                        let size = if rng.gen_bool(0.8) { rng.gen_range(1..4096) } else { rng.gen_range(4097..40_000) };
                        let align = 1u64 << rng.gen_range(0..10);
                        match r.heap_alloc(size, align) {
                            Ok(a) => live.push((a, size)),
                            Err(PmemError::OutOfMemory(_)) => {}
                            Err(e) => panic!("{e}"),
                        }
                    }
                }
                proptest::prop_assert!(!overlaps(&live));
                if round < 2 {
                    r.rebuild_heap().unwrap();
                }
            }
            let mut bitmap: Vec<(u64, u64)> = r.live_allocations().unwrap();
            bitmap.sort();
            let mut expect: Vec<u64> = live.iter().map(|l| l.0).collect();
            expect.sort();
            proptest::prop_assert_eq!(bitmap.iter().map(|b| b.0).collect::<Vec<_>>(), expect);
        }
    }
}
