//! Real process aborts at the earliest persist points, which fall inside
//! pool creation and the first CDP update.

use std::path::Path;

use ados_bench::crash::process_crash;
use ados_core::pmem::SyncMode;
use ados_core::store::{Shard, StoreError};

#[test]
fn crash_during_pool_creation_leaves_no_pool_or_a_valid_one() {
    let server = Path::new(env!("CARGO_BIN_EXE_server"));
    let mut found = 0;
    let mut missing = 0;
    for point in 1..=40 {
        let dir = tempfile::tempdir().unwrap();
        let row = process_crash(server, dir.path(), point, 3, point).unwrap();
        assert!(row.ok, "point {point}: {}", row.detail);
        assert!(row.phase == "process", "point {point} did not crash");
        let mut shard = Shard::with_dir(0, dir.path().join("pools"), SyncMode::Msync).unwrap();
        match shard.open_pool("crash") {
            Ok(h) => {
                shard.pool(h).unwrap().lock().check().unwrap();
                found += 1;
            }
            Err(StoreError::PoolNotFound(_)) => missing += 1,
            Err(e) => panic!("point {point}: {e}"),
        }
    }
    assert!(missing > 0, "no crash landed inside pool creation");
    assert!(found > 0, "no crash landed after pool creation");
}
