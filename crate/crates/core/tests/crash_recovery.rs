//! Crash injection through the public API: a workload runs on an
//! emulated region that freezes its media image at a chosen durability
//! event; the image is reopened and compared with a shadow model.

use std::collections::BTreeMap;

use ados_core::cdp::local::LocalCdp;
use ados_core::cdp::{QueryRange, Retention, VolumeConfig, MIB};
use ados_core::pmem::{BackingKind, CrashPlan, DropPolicy, PersistentRegion};
use ados_core::store::Pool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
enum Op {
    Put(Vec<u8>, Vec<u8>),
    Erase(Vec<u8>),
    Resize(Vec<u8>, u64),
}

type Model = BTreeMap<Vec<u8>, Vec<u8>>;

fn ops(seed: u64, n: usize) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live: Vec<Vec<u8>> = Vec::new();
    (0..n)
        .map(|_| {
            let key = format!("key-{}", rng.gen_range(0..40)).into_bytes();
            let roll = rng.gen_range(0..10);
            let op = if roll < 2 && !live.is_empty() {
                Op::Erase(live[rng.gen_range(0..live.len())].clone())
            } else if roll < 3 && !live.is_empty() {
                Op::Resize(live[rng.gen_range(0..live.len())].clone(), rng.gen_range(1..600))
            } else {
                let len = rng.gen_range(1..500);
                Op::Put(key, (0..len).map(|_| rng.gen()).collect())
            };
            match &op {
                Op::Put(k, _) if !live.contains(k) => live.push(k.clone()),
                Op::Erase(k) => live.retain(|x| x != k),
                _ => {}
            }
            op
        })
        .collect()
}

fn apply_model(m: &mut Model, op: &Op) {
    match op {
        Op::Put(k, v) => {
            m.insert(k.clone(), v.clone());
        }
        Op::Erase(k) => {
            m.remove(k);
        }
        Op::Resize(k, n) => {
            let v = m.get_mut(k).unwrap();
            v.resize(*n as usize, 0);
        }
    }
}

/// Runs every op and returns the event count before and after each.
fn run(pool: &mut Pool, ops: &[Op]) -> Vec<(u64, u64)> {
    ops.iter()
        .map(|op| {
            let begin = pool.region().durability_events();
            match op {
                Op::Put(k, v) => pool.put(k, v).unwrap(),
                Op::Erase(k) => pool.erase(k).unwrap(),
                Op::Resize(k, n) => {
                    pool.resize(k, *n).unwrap();
                }
            }
            (begin, pool.region().durability_events())
        })
        .collect()
}

fn contents(pool: &Pool) -> Model {
    pool.ref_vector().unwrap().into_iter().map(|e| (e.key.clone(), pool.read_value(e.value).unwrap())).collect()
}

#[test]
fn pool_operations_are_all_or_nothing_at_every_crash_point() {
    let workload = ops(3, 250);
    let mut dry = Pool::create_in_memory("p", 4 * MIB, BackingKind::Emulated).unwrap();
    let base = dry.region().durability_events();
    let spans = run(&mut dry, &workload);
    let end = dry.region().durability_events();
    let policies = [DropPolicy::Random, DropPolicy::DropAll, DropPolicy::KeepAll];
    let step = ((end - base) / 300).max(1);
    let mut points = 0;
    for (i, at) in (base..=end).step_by(step as usize).enumerate() {
        let mut pool = Pool::create_in_memory("p", 4 * MIB, BackingKind::Emulated).unwrap();
        let plan = CrashPlan { at_event: at, seed: at, policy: policies[i % 3] };
        pool.region_mut().set_crash_plan(Some(plan)).unwrap();
        run(&mut pool, &workload);
        let image = pool.region().crash_image().unwrap();
        let region = PersistentRegion::open_image(image, BackingKind::Memory).unwrap();
        let recovered = Pool::from_region("p", region).unwrap();
        recovered.check().unwrap_or_else(|e| panic!("point {at}: {e}"));
        let got = contents(&recovered);

        let mut before = Model::new();
        let mut inflight = None;
        for (op, &(b, e)) in workload.iter().zip(&spans) {
            if e <= at {
                apply_model(&mut before, op);
            } else {
                if b <= at {
                    inflight = Some(op);
                }
                break;
            }
        }
        let mut after = before.clone();
        if let Some(op) = inflight {
            apply_model(&mut after, op);
        }
        assert!(got == before || got == after, "point {at} ({:?}): recovered state matches neither side of {inflight:?}", policies[i % 3]);
        points += 1;
    }
    assert!(points >= 200, "{points}");
}

#[test]
fn crash_before_the_magic_leaves_no_pool() {
    // A zeroed image is what a crash before the first persist leaves.
    let blank = vec![0u8; (4 * MIB) as usize];
    assert!(PersistentRegion::open_image(blank, BackingKind::Memory).is_err());
}

fn cdp_config() -> VolumeConfig {
    VolumeConfig { quantum_capacity: 16, retention: Retention { count: 2, age_ns: 0 } }
}

fn fresh_cdp() -> LocalCdp {
    let pool = Pool::create_in_memory("c", 8 * MIB, BackingKind::Emulated).unwrap();
    let mut c = LocalCdp::new(pool, MIB, cdp_config()).unwrap();
    c.set_maintenance(false);
    c
}

fn fill(c: &mut LocalCdp, n: u64) {
    for ts in 1..=n {
        c.update(b"v", (ts * 37) % 200, 1 + ts % 9, 1_000 * ts, ts).unwrap();
    }
}

fn reopen(c: &LocalCdp) -> LocalCdp {
    let image = c.pool().region().crash_image().unwrap();
    let region = PersistentRegion::open_image(image, BackingKind::Memory).unwrap();
    let mut c = LocalCdp::new(Pool::from_region("c", region).unwrap(), MIB, cdp_config()).unwrap();
    c.set_maintenance(false);
    c
}

#[test]
fn summarization_interrupted_anywhere_reruns_to_the_same_summary() {
    let mut reference = fresh_cdp();
    fill(&mut reference, 40);
    reference.summarize(b"v").unwrap();
    let expected = reference.digest(b"v").unwrap();

    let mut dry = fresh_cdp();
    fill(&mut dry, 40);
    let begin = dry.pool().region().durability_events();
    dry.summarize(b"v").unwrap();
    let end = dry.pool().region().durability_events();
    assert!(end > begin);

    for at in begin..=end {
        for policy in [DropPolicy::DropAll, DropPolicy::KeepAll, DropPolicy::Random] {
            let mut c = fresh_cdp();
            fill(&mut c, 40);
            c.pool_mut().region_mut().set_crash_plan(Some(CrashPlan { at_event: at, seed: at, policy })).unwrap();
            c.summarize(b"v").unwrap();
            let mut r = reopen(&c);
            r.check().unwrap_or_else(|e| panic!("point {at}: {e}"));
            let st = r.stats(b"v").unwrap();
            assert_eq!(st.sealed + st.summarized, 2, "point {at}: {st:?}");
            r.summarize(b"v").unwrap();
            assert_eq!(r.digest(b"v").unwrap(), expected, "point {at} {policy:?}");
        }
    }
}

#[test]
fn trim_interrupted_anywhere_leaves_the_tail_trimmed_or_intact() {
    let prepare = || {
        let mut c = fresh_cdp();
        fill(&mut c, 70);
        c.summarize(b"v").unwrap();
        c
    };
    let mut dry = prepare();
    let before = dry.stats(b"v").unwrap();
    let begin = dry.pool().region().durability_events();
    let removed = dry.trim(b"v", 70).unwrap();
    let end = dry.pool().region().durability_events();
    assert!(removed > 0);
    let full = dry.query(b"v", 70, QueryRange::Full).unwrap();

    for at in begin..=end {
        let mut c = prepare();
        c.pool_mut().region_mut().set_crash_plan(Some(CrashPlan { at_event: at, seed: at, policy: DropPolicy::Random })).unwrap();
        c.trim(b"v", 70).unwrap();
        let mut r = reopen(&c);
        r.check().unwrap_or_else(|e| panic!("point {at}: {e}"));
        let st = r.stats(b"v").unwrap();
        assert!(st.quanta <= before.quanta && st.quanta >= before.quanta - removed, "point {at}: {st:?}");
        assert_eq!(r.query(b"v", 70, QueryRange::Full).unwrap(), full, "point {at}");
        r.trim(b"v", 70).unwrap();
        assert_eq!(r.stats(b"v").unwrap().quanta, before.quanta - removed);
    }
}
