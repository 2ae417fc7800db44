use ados_core::cdp::local::LocalCdp;
use ados_core::cdp::{records_for_bytes, CdpError, MapEntry, QueryRange, Retention, VolumeConfig, MIB};
use ados_core::pmem::BackingKind;
use ados_core::store::Pool;

fn cdp(pool_mib: u64, config: VolumeConfig) -> LocalCdp {
    let pool = Pool::create_in_memory("cdp", pool_mib * MIB, BackingKind::Memory).unwrap();
    let mut c = LocalCdp::new(pool, 8 * MIB, config).unwrap();
    c.set_maintenance(false);
    c
}

fn small(capacity: u64, count: u64) -> LocalCdp {
    cdp(32, VolumeConfig { quantum_capacity: capacity, retention: Retention { count, age_ns: 0 } })
}

fn e(v: u64, len: u64, m: u64) -> MapEntry {
    MapEntry { virtual_offset: v, length: len, managed_offset: m }
}

#[test]
fn single_record_replays() {
    let mut c = small(16, 0);
    c.update(b"V", 0, 10, 0, 1).unwrap();
    assert_eq!(c.query(b"V", 1, QueryRange::Full).unwrap(), vec![e(0, 10, 0)]);
}

#[test]
fn overwrite_splits_with_linear_offsets() {
    let mut c = small(16, 0);
    c.update(b"V", 0, 10, 0, 1).unwrap();
    c.update(b"V", 5, 3, 100, 2).unwrap();
    assert_eq!(c.query(b"V", 2, QueryRange::Full).unwrap(), vec![e(0, 5, 0), e(5, 3, 100), e(8, 2, 8)]);
}

#[test]
fn update_past_a_four_mib_quantum_seals_it() {
    let capacity = records_for_bytes(4 * MIB);
    assert_eq!(capacity, 65_536);
    let mut c = cdp(64, VolumeConfig { quantum_capacity: capacity, retention: Retention::default() });
    for i in 0..capacity {
        c.update(b"V", i % 1000, 1, i, i + 1).unwrap();
    }
    let before = c.stats(b"V").unwrap();
    assert_eq!(before.records, capacity);
    c.update(b"V", 0, 1, 0, capacity + 1).unwrap();
    let after = c.stats(b"V").unwrap();
    assert_eq!(after.quanta, 2);
    assert_eq!(after.sealed, 1);
    assert_eq!(after.open_count, 1);
}

#[test]
fn query_before_any_record_is_empty() {
    let mut c = small(16, 0);
    c.update(b"V", 0, 10, 0, 5).unwrap();
    assert!(c.query(b"V", 4, QueryRange::Full).unwrap().is_empty());
}

#[test]
fn query_between_two_records_sees_only_the_first() {
    let mut c = small(16, 0);
    c.update(b"V", 0, 10, 0, 10).unwrap();
    c.update(b"V", 0, 10, 50, 20).unwrap();
    assert_eq!(c.query(b"V", 15, QueryRange::Full).unwrap(), vec![e(0, 10, 0)]);
    assert_eq!(c.query(b"V", 20, QueryRange::Full).unwrap(), vec![e(0, 10, 50)]);
}

#[test]
fn sub_range_query_clips_partial_overlaps() {
    let mut c = small(16, 0);
    c.update(b"V", 0, 100, 0, 1).unwrap();
    c.update(b"V", 100, 100, 500, 2).unwrap();
    let got = c.query(b"V", 2, QueryRange::Blocks { virtual_offset: 90, length: 20 }).unwrap();
    assert_eq!(got, vec![e(90, 10, 90), e(100, 10, 500)]);
}

#[test]
fn unknown_volume_is_reported() {
    let mut c = small(16, 0);
    assert!(matches!(c.query(b"nope", 1, QueryRange::Full), Err(CdpError::VolumeNotFound)));
}

#[test]
fn out_of_order_timestamp_is_rejected() {
    let mut c = small(16, 0);
    c.update(b"V", 0, 1, 0, 10).unwrap();
    assert!(matches!(c.update(b"V", 0, 1, 0, 9), Err(CdpError::OrderingViolation { last: 10, got: 9 })));
}

fn fill_sealed(c: &mut LocalCdp, capacity: u64, sealed: u64) {
    for ts in 1..=capacity * sealed + 1 {
        c.update(b"V", ts % 64, 1, ts, ts).unwrap();
    }
}

#[test]
fn twelve_sealed_quanta_with_retention_ten_trim_two() {
    let mut c = small(4, 10);
    fill_sealed(&mut c, 4, 12);
    assert_eq!(c.stats(b"V").unwrap().quanta, 13);
    c.summarize(b"V").unwrap();
    assert_eq!(c.trim(b"V", u64::MAX).unwrap(), 2);
    let st = c.stats(b"V").unwrap();
    assert_eq!(st.quanta, 11);
    assert_eq!(st.open_count, 1);
}

#[test]
fn five_quanta_with_retention_ten_trim_nothing() {
    let mut c = small(4, 10);
    fill_sealed(&mut c, 4, 4);
    assert_eq!(c.stats(b"V").unwrap().quanta, 5);
    c.summarize(b"V").unwrap();
    assert_eq!(c.trim(b"V", u64::MAX).unwrap(), 0);
    assert_eq!(c.stats(b"V").unwrap().quanta, 5);
}

#[test]
fn trimmed_history_is_refused_and_retained_history_unchanged() {
    let mut c = small(4, 2);
    fill_sealed(&mut c, 4, 6);
    let recent = c.query(b"V", 25, QueryRange::Full).unwrap();
    c.summarize(b"V").unwrap();
    assert!(c.trim(b"V", u64::MAX).unwrap() > 0);
    assert!(matches!(c.query(b"V", 1, QueryRange::Full), Err(CdpError::HistoryTrimmed { .. })));
    assert_eq!(c.query(b"V", 25, QueryRange::Full).unwrap(), recent);
}

#[test]
fn disjoint_writes_summarize_to_sorted_entries() {
    let k = 8;
    let mut c = small(k, 0);
    // Written out of block order; one extra update seals the quantum.
    let order = [5u64, 2, 7, 0, 3, 6, 1, 4];
    for (i, &b) in order.iter().enumerate() {
        c.update(b"V", b * 10, 5, 1000 + b * 7, i as u64 + 1).unwrap();
    }
    c.update(b"V", 10_000, 1, 0, 100).unwrap();
    let at = k;
    let lazy = c.query(b"V", at, QueryRange::Full).unwrap();
    c.summarize(b"V").unwrap();
    assert_eq!(c.stats(b"V").unwrap().summarized, 1);
    let summarized = c.query(b"V", at, QueryRange::Full).unwrap();
    let want: Vec<MapEntry> = (0..k).map(|b| e(b * 10, 5, 1000 + b * 7)).collect();
    assert_eq!(lazy, want);
    assert_eq!(summarized, want);
}
