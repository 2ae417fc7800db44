//! Emulated persistent memory.
//!
//! A [`PersistentRegion`] is a byte region addressed by region-relative
//! offsets. It is backed by a shared file mapping, by anonymous memory, or
//! by the [`emulator::CrashEmulator`] write-back cache model. Every region
//! carries a fixed header page, an undo log providing crash-atomic
//! multi-word updates, and a two-level heap.
//!
//! Region layout:
//!
//! ```text
//! 0       4 KiB header page (magic, version, root, heap metadata, log offsets)
//! 4 KiB   undo log: state word, entry count, capacity, entries of 80 bytes
//! body    heap: tagged extents tiling [body_start, capacity)
//! ```
//!
//! All durable integers are little-endian. Offset `0` (the header) doubles
//! as NIL since no object can live there.

pub mod emulator;
mod heap;
mod undo;

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use memmap2::MmapMut;
use thiserror::Error;

pub use emulator::{CrashPlan, DropPolicy};
pub use heap::{ExtentInfo, ExtentKind, HeapStats};
pub use undo::TxState;

use emulator::CrashEmulator;
use heap::Heap;
use undo::UndoLog;

pub const MAGIC: [u8; 8] = *b"MCASADO1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_SIZE: u64 = 4096;
pub const NIL: u64 = 0;
pub const DEFAULT_LOG_CAPACITY: u64 = 4096;
/// Smallest heap body a region may have.
pub const MIN_BODY: u64 = 64 * 1024;

const HDR_VERSION: u64 = 8;
const HDR_ROOT: u64 = 16;
const HDR_HEAP_META: u64 = 24;
const HDR_UNDO_LOG: u64 = 32;
const HDR_CAPACITY: u64 = 40;
/// Heap metadata block lives inside the header page.
const HEAP_META_OFFSET: u64 = 64;

#[derive(Debug, Error)]
pub enum PmemError {
    #[error("region already exists: {0}")]
    AlreadyExists(PathBuf),
    #[error("capacity {requested} below minimum {minimum}")]
    Capacity { requested: u64, minimum: u64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("transaction state error: {0}")]
    State(&'static str),
    #[error("undo log full ({0} entries)")]
    LogFull(u64),
    #[error("offset {0:#x} is not 8-byte aligned")]
    Alignment(u64),
    #[error("out of memory: requested {0} bytes")]
    OutOfMemory(u64),
    #[error("heap corruption: {0}")]
    HeapCorruption(String),
    #[error("range {offset:#x}+{length} outside region of {capacity} bytes")]
    Bounds { offset: u64, length: u64, capacity: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PmemError>;

/// How `persist` reaches the backing file in mapped mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncMode {
    /// `msync` the range on every persist.
    #[default]
    Msync,
    /// Rely on the shared mapping; durable across process crashes only.
    Process,
}

enum Backing {
    Mapped { map: MmapMut, _file: File, sync: SyncMode },
    Memory(Vec<u8>),
    Emulated(Box<CrashEmulator>),
}

impl Backing {
    #[inline]
    fn bytes(&self) -> &[u8] {
        match self {
            Backing::Mapped { map, .. } => map,
            Backing::Memory(v) => v,
            Backing::Emulated(e) => e.bytes(),
        }
    }
}

/// Countdown of durability events for mapped regions; when it reaches zero
/// the process aborts. Used by the server's crash-point flag.
static PROCESS_CRASH_COUNTDOWN: AtomicU64 = AtomicU64::new(0);

/// Arms a process abort at the `n`-th persist across all mapped regions
/// (1-based). `0` disarms.
pub fn set_process_crash_point(n: u64) {
    PROCESS_CRASH_COUNTDOWN.store(n, Ordering::SeqCst);
}

fn process_crash_tick() {
    let prev = PROCESS_CRASH_COUNTDOWN.load(Ordering::Relaxed);
    if prev == 0 {
        return;
    }
    if PROCESS_CRASH_COUNTDOWN.fetch_sub(1, Ordering::SeqCst) == 1 {
        eprintln!("crash point reached, aborting");
        std::process::abort();
    }
}

/// Kind of storage behind a newly created region.
#[derive(Clone, Copy, Debug)]
pub enum BackingKind {
    Memory,
    Emulated,
}

pub struct PersistentRegion {
    backing: Backing,
    path: Option<PathBuf>,
    capacity: u64,
    log: UndoLog,
    heap: Heap,
}

impl std::fmt::Debug for PersistentRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PersistentRegion")
            .field("path", &self.path)
            .field("capacity", &self.capacity)
            .finish()
    }
}

fn layout(capacity: u64, log_capacity: u64) -> (u64, u64) {
    let log_bytes = undo::log_bytes(log_capacity);
    let body_start = HEADER_SIZE + log_bytes.next_multiple_of(4096);
    let body_end = capacity & !63;
    (body_start, body_end)
}

/// Smallest legal capacity for a given undo-log size.
pub fn minimum_capacity(log_capacity: u64) -> u64 {
    layout(0, log_capacity).0 + MIN_BODY
}

/// Zero-filled buffer that reports allocation failure instead of
/// aborting. Pages stay untouched until written.
fn zeroed(len: u64) -> Result<Vec<u8>> {
    let n = usize::try_from(len).map_err(|_| PmemError::OutOfMemory(len))?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let layout = std::alloc::Layout::array::<u8>(n).map_err(|_| PmemError::OutOfMemory(len))?;
    // SAFETY: the layout has nonzero size; a non-null block holds `n`
    // zeroed bytes from the global allocator with the alignment of u8,
    // which is what a Vec<u8> of capacity `n` owns.
    unsafe {
        let p = std::alloc::alloc_zeroed(layout);
        if p.is_null() {
            return Err(PmemError::OutOfMemory(len));
        }
        Ok(Vec::from_raw_parts(p, n, n))
    }
}

impl PersistentRegion {
    /// Creates a file-backed region of exactly `capacity` bytes.
    pub fn create(path: impl AsRef<Path>, capacity: u64) -> Result<Self> {
        Self::create_file(path, capacity, DEFAULT_LOG_CAPACITY, SyncMode::Msync)
    }

    pub fn create_file(
        path: impl AsRef<Path>,
        capacity: u64,
        log_capacity: u64,
        sync: SyncMode,
    ) -> Result<Self> {
        let path = path.as_ref();
        check_capacity(capacity, log_capacity)?;
        let file = match OpenOptions::new().read(true).write(true).create_new(true).open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(PmemError::AlreadyExists(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        file.set_len(capacity)?;
        // SAFETY: the file was just created by us and is sized; the mapping
        // is owned by this region for its lifetime.
        let map = unsafe { MmapMut::map_mut(&file)? };
        let backing = Backing::Mapped { map, _file: file, sync };
        let mut region = Self::format(backing, capacity, log_capacity)?;
        region.path = Some(path.to_path_buf());
        Ok(region)
    }

    /// Creates a region that lives only in memory.
    pub fn create_in_memory(capacity: u64, log_capacity: u64, kind: BackingKind) -> Result<Self> {
        check_capacity(capacity, log_capacity)?;
        let bytes = zeroed(capacity)?;
        let backing = match kind {
            BackingKind::Memory => Backing::Memory(bytes),
            BackingKind::Emulated => Backing::Emulated(Box::new(CrashEmulator::new(bytes))),
        };
        Self::format(backing, capacity, log_capacity)
    }

    fn format(backing: Backing, capacity: u64, log_capacity: u64) -> Result<Self> {
        let (body_start, body_end) = layout(capacity, log_capacity);
        let mut region = PersistentRegion {
            backing,
            path: None,
            capacity,
            log: UndoLog::new(HEADER_SIZE, log_capacity),
            heap: Heap::empty(body_start, body_end),
        };
        region.write_u32(HDR_VERSION, FORMAT_VERSION)?;
        region.write_u64(HDR_ROOT, NIL)?;
        region.write_u64(HDR_HEAP_META, HEAP_META_OFFSET)?;
        region.write_u64(HDR_UNDO_LOG, HEADER_SIZE)?;
        region.write_u64(HDR_CAPACITY, capacity)?;
        region.log.format(&mut region.backing)?;
        region.format_heap()?;
        region.persist(0, HEADER_SIZE)?;
        // The magic goes last: a region without it was never fully created.
        region.write(0, &MAGIC)?;
        region.persist(0, 8)?;
        Ok(region)
    }

    /// Opens an existing file-backed region, running recovery.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_file(path, SyncMode::Msync)
    }

    pub fn open_file(path: impl AsRef<Path>, sync: SyncMode) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        if len < HEADER_SIZE {
            return Err(PmemError::Format(format!("file of {len} bytes is truncated")));
        }
        // SAFETY: see `create_file`.
        let map = unsafe { MmapMut::map_mut(&file)? };
        let mut region = Self::attach(Backing::Mapped { map, _file: file, sync }, len)?;
        region.path = Some(path.to_path_buf());
        Ok(region)
    }

    /// Opens a region from a raw image, e.g. one produced by the crash
    /// emulator.
    pub fn open_image(image: Vec<u8>, kind: BackingKind) -> Result<Self> {
        let len = image.len() as u64;
        if len < HEADER_SIZE {
            return Err(PmemError::Format(format!("image of {len} bytes is truncated")));
        }
        let backing = match kind {
            BackingKind::Memory => Backing::Memory(image),
            BackingKind::Emulated => Backing::Emulated(Box::new(CrashEmulator::new(image))),
        };
        Self::attach(backing, len)
    }

    fn attach(backing: Backing, len: u64) -> Result<Self> {
        let bytes = backing.bytes();
        if bytes[0..8] != MAGIC {
            return Err(PmemError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(PmemError::Format(format!("unsupported version {version}")));
        }
        let capacity = u64::from_le_bytes(bytes[40..48].try_into().unwrap());
        if capacity != len {
            return Err(PmemError::Format(format!(
                "header capacity {capacity} does not match backing length {len}"
            )));
        }
        let log_off = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        if log_off != HEADER_SIZE {
            return Err(PmemError::Format(format!("undo log offset {log_off:#x}")));
        }
        let mut log = UndoLog::load(&backing, log_off, capacity)?;
        let (body_start, body_end) = layout(capacity, log.capacity());
        let mut backing = backing;
        log.recover(&mut backing)?;
        let mut region = PersistentRegion {
            backing,
            path: None,
            capacity,
            log,
            heap: Heap::empty(body_start, body_end),
        };
        region.rebuild_heap()?;
        let root = region.root()?;
        if root != NIL && !region.is_live_allocation(root) {
            return Err(PmemError::Format(format!("root {root:#x} is not a live allocation")));
        }
        Ok(region)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn is_emulated(&self) -> bool {
        matches!(self.backing, Backing::Emulated(_))
    }

    // ---- raw access ---------------------------------------------------

    #[inline]
    fn check(&self, offset: u64, length: u64) -> Result<()> {
        match offset.checked_add(length) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(PmemError::Bounds { offset, length, capacity: self.capacity }),
        }
    }

    #[inline]
    pub fn read(&self, offset: u64, length: u64) -> Result<&[u8]> {
        self.check(offset, length)?;
        Ok(&self.backing.bytes()[offset as usize..(offset + length) as usize])
    }

    #[inline]
    pub fn read_u64(&self, offset: u64) -> Result<u64> {
        Ok(u64::from_le_bytes(self.read(offset, 8)?.try_into().unwrap()))
    }

    #[inline]
    pub fn read_u32(&self, offset: u64) -> Result<u32> {
        Ok(u32::from_le_bytes(self.read(offset, 4)?.try_into().unwrap()))
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        self.check(offset, data.len() as u64)?;
        raw_write(&mut self.backing, offset, data);
        Ok(())
    }

    pub fn write_u64(&mut self, offset: u64, value: u64) -> Result<()> {
        self.write(offset, &value.to_le_bytes())
    }

    pub fn write_u32(&mut self, offset: u64, value: u32) -> Result<()> {
        self.write(offset, &value.to_le_bytes())
    }

    pub fn fill(&mut self, offset: u64, length: u64, byte: u8) -> Result<()> {
        self.check(offset, length)?;
        let (o, l) = (offset as usize, length as usize);
        match &mut self.backing {
            Backing::Mapped { map, .. } => map[o..o + l].fill(byte),
            Backing::Memory(v) => v[o..o + l].fill(byte),
            Backing::Emulated(e) => e.fill(o, l, byte),
        }
        Ok(())
    }

    /// Durability barrier for a range.
    pub fn persist(&mut self, offset: u64, length: u64) -> Result<()> {
        self.check(offset, length)?;
        raw_persist(&mut self.backing, offset, length)
    }

    /// Stores an aligned 64-bit word and makes it durable. The emulator
    /// never tears such a store.
    pub fn atomic_store_64(&mut self, offset: u64, value: u64) -> Result<()> {
        if !offset.is_multiple_of(8) {
            return Err(PmemError::Alignment(offset));
        }
        self.check(offset, 8)?;
        raw_write(&mut self.backing, offset, &value.to_le_bytes());
        raw_persist(&mut self.backing, offset, 8)
    }

    // ---- root -----------------------------------------------------------

    pub fn root(&self) -> Result<u64> {
        self.read_u64(HDR_ROOT)
    }

    /// Sets the root object. Inside a transaction the change is logged;
    /// otherwise it is a single atomic store.
    pub fn set_root(&mut self, offset: u64) -> Result<()> {
        if offset != NIL && !self.is_live_allocation(offset) {
            return Err(PmemError::InvalidArgument(format!(
                "root {offset:#x} is not a live allocation"
            )));
        }
        if self.tx_active() {
            self.tx_write_u64(HDR_ROOT, offset)
        } else {
            self.atomic_store_64(HDR_ROOT, offset)
        }
    }

    // ---- crash emulation -------------------------------------------------

    pub fn set_crash_plan(&mut self, plan: Option<CrashPlan>) -> Result<()> {
        match &mut self.backing {
            Backing::Emulated(e) => {
                e.set_plan(plan);
                Ok(())
            }
            _ => Err(PmemError::InvalidArgument("region is not emulated".into())),
        }
    }

    /// Number of durability events so far (emulated regions only).
    pub fn durability_events(&self) -> u64 {
        match &self.backing {
            Backing::Emulated(e) => e.events(),
            _ => 0,
        }
    }

    pub fn crashed(&self) -> bool {
        matches!(&self.backing, Backing::Emulated(e) if e.crashed())
    }

    /// Media contents after a power failure at the planned crash point.
    pub fn crash_image(&self) -> Result<Vec<u8>> {
        match &self.backing {
            Backing::Emulated(e) => Ok(e.crash_image()),
            _ => Err(PmemError::InvalidArgument("region is not emulated".into())),
        }
    }

    /// Full image as of a clean shutdown.
    pub fn image(&self) -> Vec<u8> {
        match &self.backing {
            Backing::Emulated(e) => e.clean_image(),
            other => other.bytes().to_vec(),
        }
    }

    /// Flushes everything to the backing file.
    pub fn sync_all(&mut self) -> Result<()> {
        if let Backing::Mapped { map, .. } = &mut self.backing {
            map.flush()?;
        }
        Ok(())
    }
}

impl Drop for PersistentRegion {
    fn drop(&mut self) {
        if let Backing::Mapped { map, .. } = &mut self.backing {
            let _ = map.flush();
        }
    }
}

fn check_capacity(capacity: u64, log_capacity: u64) -> Result<()> {
    if log_capacity == 0 {
        return Err(PmemError::InvalidArgument("undo log capacity must be nonzero".into()));
    }
    let minimum = minimum_capacity(log_capacity);
    if capacity < minimum {
        return Err(PmemError::Capacity { requested: capacity, minimum });
    }
    Ok(())
}

#[inline]
fn raw_write(backing: &mut Backing, offset: u64, data: &[u8]) {
    let o = offset as usize;
    match backing {
        Backing::Mapped { map, .. } => map[o..o + data.len()].copy_from_slice(data),
        Backing::Memory(v) => v[o..o + data.len()].copy_from_slice(data),
        Backing::Emulated(e) => e.write(o, data),
    }
}

fn raw_persist(backing: &mut Backing, offset: u64, length: u64) -> Result<()> {
    match backing {
        Backing::Mapped { map, sync, .. } => {
            process_crash_tick();
            if *sync == SyncMode::Msync && length > 0 {
                map.flush_range(offset as usize, length as usize)?;
            }
        }
        Backing::Memory(_) => {}
        Backing::Emulated(e) => e.persist(offset as usize, length as usize),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem(cap: u64) -> PersistentRegion {
        PersistentRegion::create_in_memory(cap, 64, BackingKind::Memory).unwrap()
    }

    #[test]
    fn create_reports_one_free_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let cap = 64 << 20;
        let r = PersistentRegion::create(dir.path().join("r"), cap).unwrap();
        let stats = r.heap_stats();
        let (body_start, body_end) = layout(cap, DEFAULT_LOG_CAPACITY);
        assert_eq!(stats.free_bytes, body_end - body_start);
        assert_eq!(r.extents().unwrap().len(), 1);
        assert_eq!(std::fs::metadata(dir.path().join("r")).unwrap().len(), cap);
    }

    #[test]
    fn create_existing_path_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r");
        drop(PersistentRegion::create(&p, 1 << 20).unwrap());
        assert!(matches!(PersistentRegion::create(&p, 1 << 20), Err(PmemError::AlreadyExists(_))));
    }

    #[test]
    fn tiny_capacity_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = PersistentRegion::create(dir.path().join("r"), 1024).unwrap_err();
        assert!(matches!(err, PmemError::Capacity { .. }));
    }

    #[test]
    fn zero_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z");
        std::fs::write(&p, vec![0u8; 1 << 20]).unwrap();
        assert!(matches!(PersistentRegion::open(&p), Err(PmemError::Format(_))));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        drop(PersistentRegion::create(&p, 1 << 20).unwrap());
        let f = OpenOptions::new().write(true).open(&p).unwrap();
        f.set_len(512 * 1024).unwrap();
        assert!(matches!(PersistentRegion::open(&p), Err(PmemError::Format(_))));
        f.set_len(100).unwrap();
        assert!(matches!(PersistentRegion::open(&p), Err(PmemError::Format(_))));
    }

    #[test]
    fn header_is_bit_exact() {
        let r = mem(1 << 20);
        let h = r.read(0, 40).unwrap();
        assert_eq!(&h[0..8], b"MCASADO1");
        assert_eq!(u32::from_le_bytes(h[8..12].try_into().unwrap()), 1);
        assert_eq!(&h[12..16], &[0; 4]);
        assert_eq!(u64::from_le_bytes(h[16..24].try_into().unwrap()), NIL);
        assert_eq!(u64::from_le_bytes(h[24..32].try_into().unwrap()), HEAP_META_OFFSET);
        assert_eq!(u64::from_le_bytes(h[32..40].try_into().unwrap()), HEADER_SIZE);
    }

    #[test]
    fn reopen_preserves_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r");
        let mut r = PersistentRegion::create(&p, 1 << 20).unwrap();
        let a = r.heap_alloc(100, 8).unwrap();
        r.write(a, b"hello").unwrap();
        r.persist(a, 5).unwrap();
        r.set_root(a).unwrap();
        drop(r);
        let r = PersistentRegion::open(&p).unwrap();
        assert_eq!(r.root().unwrap(), a);
        assert_eq!(r.read(a, 5).unwrap(), b"hello");
    }

    #[test]
    fn atomic_store_alignment_and_roundtrip() {
        let mut r = mem(1 << 20);
        let a = r.heap_alloc(64, 64).unwrap();
        assert!(matches!(r.atomic_store_64(a + 3, 1), Err(PmemError::Alignment(_))));
        r.atomic_store_64(a + 8, 0xDEAD_BEEF).unwrap();
        assert_eq!(r.read_u64(a + 8).unwrap(), 0xDEAD_BEEF);
    }

    #[test]
    fn persist_out_of_range() {
        let mut r = mem(1 << 20);
        assert!(matches!(r.persist((1 << 20) - 4, 8), Err(PmemError::Bounds { .. })));
        assert!(matches!(r.read(u64::MAX - 2, 8), Err(PmemError::Bounds { .. })));
    }

    #[test]
    fn persisted_write_survives_crash_unpersisted_may_not() {
        let mut r = PersistentRegion::create_in_memory(1 << 20, 64, BackingKind::Emulated).unwrap();
        let a = r.heap_alloc(64, 64).unwrap();
        r.write_u64(a, 7).unwrap();
        r.persist(a, 8).unwrap();
        r.write_u64(a + 8, 9).unwrap();
        let plan = CrashPlan { at_event: r.durability_events(), seed: 3, policy: DropPolicy::DropAll };
        r.set_crash_plan(Some(plan)).unwrap();
        let img = r.crash_image().unwrap();
        let r2 = PersistentRegion::open_image(img, BackingKind::Memory).unwrap();
        assert_eq!(r2.read_u64(a).unwrap(), 7);
        assert_eq!(r2.read_u64(a + 8).unwrap(), 0);
    }

    #[test]
    fn open_at_different_base_reads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r");
        let mut r = PersistentRegion::create(&p, 1 << 20).unwrap();
        let mut offs = vec![];
        for i in 0..50u64 {
            let a = r.heap_alloc(24, 8).unwrap();
            r.write_u64(a, i * 3).unwrap();
            r.write_u64(a + 8, *offs.last().unwrap_or(&NIL)).unwrap();
            r.persist(a, 16).unwrap();
            offs.push(a);
        }
        r.set_root(*offs.last().unwrap()).unwrap();
        drop(r);
        // Copy to a new file and as an anonymous image: different bases.
        let p2 = dir.path().join("copy");
        std::fs::copy(&p, &p2).unwrap();
        let walk = |r: &PersistentRegion| {
            let mut out = vec![];
            let mut cur = r.root().unwrap();
            while cur != NIL {
                out.push(r.read_u64(cur).unwrap());
                cur = r.read_u64(cur + 8).unwrap();
            }
            out
        };
        let a = PersistentRegion::open(&p2).unwrap();
        let b = PersistentRegion::open_image(std::fs::read(&p).unwrap(), BackingKind::Memory).unwrap();
        assert_eq!(walk(&a), walk(&b));
        assert_eq!(walk(&a).len(), 50);
    }
}
