use std::collections::BTreeSet;

use ados_core::pmem::{BackingKind, CrashPlan, DropPolicy, PersistentRegion, PmemError, SyncMode};
use ados_core::store::{KeyPattern, Pool, Shard, StoreError};

const MIB: u64 = 1 << 20;

#[test]
fn region_files_refuse_misuse() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r");
    let r = PersistentRegion::create(&path, 64 * MIB).unwrap();
    let free = r.heap_stats();
    assert!(free.free_bytes > 63 * MIB && free.free_bytes < 64 * MIB, "{free:?}");
    drop(r);
    assert!(matches!(PersistentRegion::create(&path, 64 * MIB), Err(PmemError::AlreadyExists(_))));
    assert!(matches!(PersistentRegion::create(dir.path().join("tiny"), 1024), Err(PmemError::Capacity { .. })));
    let zeros = dir.path().join("zeros");
    std::fs::write(&zeros, vec![0u8; MIB as usize]).unwrap();
    assert!(matches!(PersistentRegion::open(&zeros), Err(PmemError::Format(_))));
    let short = dir.path().join("short");
    std::fs::write(&short, &std::fs::read(&path).unwrap()[..4096]).unwrap();
    assert!(matches!(PersistentRegion::open(&short), Err(PmemError::Format(_))));
}

#[test]
fn committed_transactions_survive_reopen_and_open_ones_roll_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r");
    let mut r = PersistentRegion::create(&path, 4 * MIB).unwrap();
    let x = r.heap_alloc(64, 64).unwrap();
    assert_eq!(x % 64, 0);
    assert!(matches!(r.tx_log(x, 8), Err(PmemError::State(_))));
    r.tx_begin().unwrap();
    r.tx_log(x, 8).unwrap();
    r.write_u64(x, 7).unwrap();
    r.tx_commit().unwrap();
    drop(r);
    let mut r = PersistentRegion::open(&path).unwrap();
    assert_eq!(r.read_u64(x).unwrap(), 7);

    // Crash with the new value persisted but the transaction still open.
    let mut e = PersistentRegion::open_image(r.image(), BackingKind::Emulated).unwrap();
    e.tx_begin().unwrap();
    e.tx_write_u64(x, 99).unwrap();
    e.persist(x, 8).unwrap();
    let at = e.durability_events();
    e.set_crash_plan(Some(CrashPlan { at_event: at, seed: 1, policy: DropPolicy::KeepAll })).unwrap();
    let back = PersistentRegion::open_image(e.crash_image().unwrap(), BackingKind::Memory).unwrap();
    assert_eq!(back.read_u64(x).unwrap(), 7);

    assert!(matches!(r.atomic_store_64(x + 3, 1), Err(PmemError::Alignment(_))));
    r.atomic_store_64(x, 11).unwrap();
    assert_eq!(r.read_u64(x).unwrap(), 11);
    assert!(matches!(r.persist(r.capacity() - 4, 64), Err(PmemError::Bounds { .. })));
}

#[test]
fn heap_exhaustion_and_double_free_are_detected() {
    let mut r = PersistentRegion::create_in_memory(MIB, 64, BackingKind::Memory).unwrap();
    let mut taken = Vec::new();
    let err = loop {
        match r.heap_alloc(4096, 64) {
            Ok(o) => taken.push(o),
            Err(e) => break e,
        }
    };
    assert!(matches!(err, PmemError::OutOfMemory(_)));
    assert!(taken.len() > 100);
    let image = r.image();
    let back = PersistentRegion::open_image(image, BackingKind::Memory).unwrap();
    assert_eq!(back.heap_stats(), r.heap_stats());
    r.heap_free(taken[0]).unwrap();
    assert!(matches!(r.heap_free(taken[0]), Err(PmemError::HeapCorruption(_))));
}

#[test]
fn pools_persist_across_shard_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let digest = {
        let mut shard = Shard::with_dir(0, dir.path(), SyncMode::Msync).unwrap();
        let h = shard.create_pool("p", 64 * MIB).unwrap();
        assert!(matches!(shard.create_pool("p", MIB), Err(StoreError::NameCollision(_))));
        let pool = shard.pool(h).unwrap();
        let mut pool = pool.lock();
        pool.put(b"k", b"abc").unwrap();
        pool.put(b"other", &[9; 5000]).unwrap();
        assert_eq!(pool.get(b"k").unwrap(), b"abc");
        let d = pool.digest().unwrap();
        drop(pool);
        shard.close_pool(h).unwrap();
        d
    };
    let mut shard = Shard::with_dir(0, dir.path(), SyncMode::Msync).unwrap();
    assert!(matches!(shard.open_pool("missing"), Err(StoreError::PoolNotFound(_))));
    let h = shard.open_pool("p").unwrap();
    let pool = shard.pool(h).unwrap();
    assert_eq!(pool.lock().digest().unwrap(), digest);
    assert_eq!(pool.lock().get(b"other").unwrap(), vec![9; 5000]);
    drop(pool);
    assert!(matches!(shard.delete_pool("p"), Err(StoreError::Busy(_))));
    shard.close_pool(h).unwrap();
    shard.delete_pool("p").unwrap();
    assert!(matches!(shard.open_pool("p"), Err(StoreError::PoolNotFound(_))));
}

#[test]
fn resize_keeps_the_prefix_and_zeroes_the_tail() {
    let mut pool = Pool::create_in_memory("p", 8 * MIB, BackingKind::Memory).unwrap();
    pool.put(b"k", b"abc").unwrap();
    pool.resize(b"k", 6).unwrap();
    assert_eq!(pool.get(b"k").unwrap(), b"abc\0\0\0");
    pool.resize(b"k", 2).unwrap();
    assert_eq!(pool.get(b"k").unwrap(), b"ab");
    pool.erase(b"k").unwrap();
    assert!(matches!(pool.get(b"k"), Err(StoreError::NotFound)));
    assert!(matches!(pool.resize(b"k", 4), Err(StoreError::NotFound)));
}

#[test]
fn enumeration_sees_every_pair_once() {
    let mut pool = Pool::create_in_memory("p", 8 * MIB, BackingKind::Memory).unwrap();
    let keys: BTreeSet<Vec<u8>> = (0..300).map(|i| format!("key{i:03}").into_bytes()).collect();
    for k in &keys {
        pool.put(k, k).unwrap();
    }
    let refs: BTreeSet<Vec<u8>> = pool.ref_vector().unwrap().into_iter().map(|e| e.key).collect();
    assert_eq!(refs, keys);
    let mut seen = BTreeSet::new();
    let mut cursor = Some(pool.start_cursor());
    while let Some(c) = cursor {
        let (batch, next) = pool.iterate(c, 7).unwrap();
        for e in batch {
            assert!(seen.insert(e.key));
        }
        cursor = next;
    }
    assert_eq!(seen, keys);
    assert_eq!(pool.info().unwrap().pairs, 300);
    assert_eq!(pool.find_key(&KeyPattern::Exact(b"key123".to_vec())).unwrap(), Some(b"key123".to_vec()));
    assert!(pool.find_key(&KeyPattern::Prefix(b"key2".to_vec())).unwrap().unwrap().starts_with(b"key2"));
    assert_eq!(pool.find_key(&KeyPattern::Prefix(b"zz".to_vec())).unwrap(), None);
}

#[test]
fn reopened_image_after_clean_close_is_identical() {
    let mut pool = Pool::create_in_memory("p", 8 * MIB, BackingKind::Memory).unwrap();
    for i in 0..50u32 {
        pool.put(&i.to_le_bytes(), &vec![i as u8; i as usize + 1]).unwrap();
    }
    let digest = pool.digest().unwrap();
    let region = PersistentRegion::open_image(pool.into_region().image(), BackingKind::Memory).unwrap();
    let back = Pool::from_region("p", region).unwrap();
    assert_eq!(back.digest().unwrap(), digest);
    back.check().unwrap();
}
