//! Undo log: pre-image journal for crash-atomic multi-word updates.
//!
//! Log layout at `offset`:
//!
//! ```text
//! +0   state   u64   IDLE=0 ACTIVE=1 COMMITTED=2
//! +8   count   u64   number of valid entries
//! +16  capacity u64
//! +64  entries: { offset u64, length u64, old_bytes [u8; 64] }
//! ```
//!
//! An entry is persisted before `count` is bumped, and `count` is bumped
//! before the covered range is modified. Commit persists every covered
//! range, then stores IDLE with a single atomic word store.

use std::collections::HashSet;

use super::{raw_persist, raw_write, Backing, PersistentRegion, PmemError, Result};

pub const MAX_ENTRY_BYTES: u64 = 64;
const ENTRY_SIZE: u64 = 16 + MAX_ENTRY_BYTES;
const ENTRIES: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxState {
    Idle = 0,
    Active = 1,
    Committed = 2,
}

pub(super) fn log_bytes(capacity: u64) -> u64 {
    ENTRIES + capacity * ENTRY_SIZE
}

pub(super) struct UndoLog {
    offset: u64,
    capacity: u64,
    state: TxState,
    count: u64,
    logged_lines: HashSet<u64>,
    touched: Vec<(u64, u64)>,
}

fn word(backing: &Backing, off: u64) -> u64 {
    u64::from_le_bytes(backing.bytes()[off as usize..off as usize + 8].try_into().unwrap())
}

fn store(backing: &mut Backing, off: u64, v: u64) -> Result<()> {
    raw_write(backing, off, &v.to_le_bytes());
    raw_persist(backing, off, 8)
}

impl UndoLog {
    pub(super) fn new(offset: u64, capacity: u64) -> Self {
        UndoLog {
            offset,
            capacity,
            state: TxState::Idle,
            count: 0,
            logged_lines: HashSet::new(),
            touched: Vec::new(),
        }
    }

    pub(super) fn capacity(&self) -> u64 {
        self.capacity
    }

    pub(super) fn format(&mut self, backing: &mut Backing) -> Result<()> {
        raw_write(backing, self.offset, &0u64.to_le_bytes());
        raw_write(backing, self.offset + 8, &0u64.to_le_bytes());
        raw_write(backing, self.offset + 16, &self.capacity.to_le_bytes());
        raw_persist(backing, self.offset, 24)
    }

    pub(super) fn load(backing: &Backing, offset: u64, region_capacity: u64) -> Result<Self> {
        let capacity = word(backing, offset + 16);
        if capacity == 0 || offset + log_bytes(capacity) > region_capacity {
            return Err(PmemError::Format(format!("undo log capacity {capacity}")));
        }
        let count = word(backing, offset + 8);
        if count > capacity {
            return Err(PmemError::Format(format!("undo log count {count} > {capacity}")));
        }
        let state = match word(backing, offset) {
            0 => TxState::Idle,
            1 => TxState::Active,
            2 => TxState::Committed,
            s => return Err(PmemError::Format(format!("undo log state {s}"))),
        };
        Ok(UndoLog { state, count, ..UndoLog::new(offset, capacity) })
    }

    /// Rolls back an interrupted transaction. Pre-images are restored in
    /// reverse order; IDLE and COMMITTED logs restore nothing.
    pub(super) fn recover(&mut self, backing: &mut Backing) -> Result<()> {
        if self.state == TxState::Active {
            let len = backing.bytes().len() as u64;
            for i in (0..self.count).rev() {
                let e = self.offset + ENTRIES + i * ENTRY_SIZE;
                let off = word(backing, e);
                let n = word(backing, e + 8);
                if n == 0 || n > MAX_ENTRY_BYTES || off.checked_add(n).is_none_or(|end| end > len) {
                    return Err(PmemError::Format(format!("undo entry {i} covers {off:#x}+{n}")));
                }
                let old = backing.bytes()[(e + 16) as usize..(e + 16 + n) as usize].to_vec();
                raw_write(backing, off, &old);
                raw_persist(backing, off, n)?;
            }
        }
        if self.state != TxState::Idle || self.count != 0 {
            store(backing, self.offset + 8, 0)?;
            store(backing, self.offset, TxState::Idle as u64)?;
        }
        self.state = TxState::Idle;
        self.count = 0;
        self.logged_lines.clear();
        self.touched.clear();
        Ok(())
    }
}

impl PersistentRegion {
    pub fn tx_active(&self) -> bool {
        self.log.state == TxState::Active
    }

    pub fn tx_begin(&mut self) -> Result<()> {
        if self.log.state == TxState::Active {
            return Err(PmemError::State("transaction already active"));
        }
        let off = self.log.offset;
        store(&mut self.backing, off + 8, 0)?;
        store(&mut self.backing, off, TxState::Active as u64)?;
        self.log.state = TxState::Active;
        self.log.count = 0;
        Ok(())
    }

    /// Records the pre-image of `[offset, offset+length)`; `length` ≤ 64.
    pub fn tx_log(&mut self, offset: u64, length: u64) -> Result<()> {
        if self.log.state != TxState::Active {
            return Err(PmemError::State("no active transaction"));
        }
        if length == 0 || length > MAX_ENTRY_BYTES {
            return Err(PmemError::InvalidArgument(format!("log entry of {length} bytes")));
        }
        self.check(offset, length)?;
        if self.log.count == self.log.capacity {
            return Err(PmemError::LogFull(self.log.capacity));
        }
        let e = self.log.offset + ENTRIES + self.log.count * ENTRY_SIZE;
        let old = self.read(offset, length)?.to_vec();
        raw_write(&mut self.backing, e, &offset.to_le_bytes());
        raw_write(&mut self.backing, e + 8, &length.to_le_bytes());
        raw_write(&mut self.backing, e + 16, &old);
        raw_persist(&mut self.backing, e, 16 + length)?;
        self.log.count += 1;
        let count = self.log.count;
        store(&mut self.backing, self.log.offset + 8, count)?;
        self.log.touched.push((offset, length));
        Ok(())
    }

    /// Logs every cache line overlapping the range (once per transaction),
    /// then writes.
    pub fn tx_write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        let len = data.len() as u64;
        self.check(offset, len)?;
        if len == 0 {
            return Ok(());
        }
        let first = offset / 64;
        let last = (offset + len - 1) / 64;
        for line in first..=last {
            if self.log.logged_lines.contains(&line) {
                continue;
            }
            let start = line * 64;
            let n = (start + 64).min(self.capacity) - start;
            self.tx_log(start, n)?;
            self.log.logged_lines.insert(line);
        }
        raw_write(&mut self.backing, offset, data);
        Ok(())
    }

    pub fn tx_write_u64(&mut self, offset: u64, value: u64) -> Result<()> {
        self.tx_write(offset, &value.to_le_bytes())
    }

    pub fn tx_commit(&mut self) -> Result<()> {
        if self.log.state != TxState::Active {
            return Err(PmemError::State("no active transaction"));
        }
        let touched = std::mem::take(&mut self.log.touched);
        for (off, len) in touched {
            raw_persist(&mut self.backing, off, len)?;
        }
        let off = self.log.offset;
        store(&mut self.backing, off, TxState::Idle as u64)?;
        self.log.state = TxState::Idle;
        self.log.count = 0;
        self.log.logged_lines.clear();
        self.heap_commit_pending();
        Ok(())
    }

    /// Rolls the active transaction back in place.
    pub fn tx_abort(&mut self) -> Result<()> {
        if self.log.state != TxState::Active {
            return Err(PmemError::State("no active transaction"));
        }
        self.log.recover(&mut self.backing)?;
        self.rebuild_heap()
    }

    /// Runs `f` inside a transaction, aborting on error.
    pub fn transaction<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.tx_begin()?;
        match f(self) {
            Ok(v) => {
                self.tx_commit()?;
                Ok(v)
            }
            Err(e) => {
                self.tx_abort()?;
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::pmem::*;

    fn emu() -> PersistentRegion {
        PersistentRegion::create_in_memory(1 << 20, 64, BackingKind::Emulated).unwrap()
    }

    #[test]
    fn committed_transaction_survives() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r");
        let mut r = PersistentRegion::create(&p, 1 << 20).unwrap();
        let x = r.heap_alloc(8, 8).unwrap();
        r.tx_begin().unwrap();
        r.tx_log(x, 8).unwrap();
        r.write_u64(x, 42).unwrap();
        r.tx_commit().unwrap();
        drop(r);
        let r = PersistentRegion::open(&p).unwrap();
        assert_eq!(r.read_u64(x).unwrap(), 42);
    }

    #[test]
    fn crash_before_commit_restores_old_value() {
        let mut r = emu();
        let x = r.heap_alloc(8, 8).unwrap();
        r.write_u64(x, 1).unwrap();
        r.persist(x, 8).unwrap();
        r.tx_begin().unwrap();
        r.tx_log(x, 8).unwrap();
        r.write_u64(x, 2).unwrap();
        r.persist(x, 8).unwrap();
        // crash now with everything written back: the new value reached
        // media but the log says roll back
        r.set_crash_plan(Some(CrashPlan {
            at_event: r.durability_events(),
            seed: 0,
            policy: DropPolicy::KeepAll,
        }))
        .unwrap();
        let img = r.crash_image().unwrap();
        let r2 = PersistentRegion::open_image(img, BackingKind::Memory).unwrap();
        assert_eq!(r2.read_u64(x).unwrap(), 1);
    }

    #[test]
    fn tx_log_outside_transaction() {
        let mut r = emu();
        assert!(matches!(r.tx_log(8192, 8), Err(PmemError::State(_))));
        assert!(matches!(r.tx_commit(), Err(PmemError::State(_))));
        r.tx_begin().unwrap();
        assert!(matches!(r.tx_begin(), Err(PmemError::State(_))));
    }

    #[test]
    fn log_full() {
        let mut r = PersistentRegion::create_in_memory(1 << 20, 4, BackingKind::Memory).unwrap();
        let x = r.heap_alloc(1024, 64).unwrap();
        r.tx_begin().unwrap();
        for i in 0..4 {
            r.tx_log(x + i * 64, 64).unwrap();
        }
        assert!(matches!(r.tx_log(x + 512, 8), Err(PmemError::LogFull(4))));
        r.tx_abort().unwrap();
        assert!(!r.tx_active());
    }

    #[test]
    fn oversized_entry_rejected() {
        let mut r = emu();
        r.tx_begin().unwrap();
        assert!(matches!(r.tx_log(8192, 65), Err(PmemError::InvalidArgument(_))));
    }

    #[test]
    fn abort_restores_in_place() {
        let mut r = emu();
        let x = r.heap_alloc(256, 64).unwrap();
        r.write(x, &[5; 256]).unwrap();
        r.persist(x, 256).unwrap();
        let res: Result<()> = r.transaction(|r| {
            r.tx_write(x + 10, &[6; 200])?;
            Err(PmemError::InvalidArgument("boom".into()))
        });
        assert!(res.is_err());
        assert_eq!(r.read(x, 256).unwrap(), &[5; 256][..]);
    }
}
