//! Experiment drivers. Servers run in-process on loopback TCP; clients
//! are threads with one connection each.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ados_core::ado::PluginRegistry;
use ados_core::cdp::local::LocalCdp;
use ados_core::cdp::plainkv::PlainKvVolume;
use ados_core::cdp::plugin::CdpRequest;
use ados_core::cdp::{QueryRange, Retention, VolumeConfig, MIB};
use ados_core::pmem::BackingKind;
use ados_core::store::Pool;
use ados_proto::cdp_client::{invocation, CdpClient};
use ados_proto::message::Request;
use ados_proto::{Client, Replica, ReplicaSet, ShardConfig, ShardHandle};
use rand::{Rng, SeedableRng};

use crate::histogram::LogHistogram;
use crate::report::{FootprintRow, LatencySummary, QuerySample, Report, RunResult, Sampler};
use crate::spec::{Mode, WorkloadSpec};
use crate::workload::{volume_tag, Generator, Update};
use crate::BenchError;

const POOL: &str = "bench";
/// Largest pool created by the harness. Memory-backed pools are zero
/// pages until touched, so generous sizes cost address space only.
const MAX_POOL: u64 = 2048 * MIB;

pub fn cdp_options(spec: &WorkloadSpec, capacity: u64) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert("chunk_mib".into(), (spec.chunk_mib as i64).into());
    t.insert("quantum_records".into(), (capacity as i64).into());
    t.insert("retention_count".into(), (spec.retention as i64).into());
    t
}

pub fn volume_config(spec: &WorkloadSpec, capacity: u64) -> VolumeConfig {
    VolumeConfig { quantum_capacity: capacity, retention: Retention { count: spec.retention, age_ns: 0 } }
}

/// Pool size for `volumes` volumes receiving `updates` updates in total.
pub fn pool_size(spec: &WorkloadSpec, mode: Mode, capacity: u64, volumes: u64, updates: u64) -> u64 {
    let per_volume = updates.div_ceil(volumes.max(1));
    let live_quanta = (per_volume / capacity + 2).min(spec.retention + 2);
    let summary = per_volume.min(spec.blocks_per_volume) * 24;
    let est = match mode {
        Mode::Ado => volumes * live_quanta * (capacity * 64 + summary) + volumes * spec.chunk_mib * MIB,
        Mode::PlainKv => volumes * live_quanta * (capacity.min(per_volume) * 256 + summary),
    };
    (est * 2 + 64 * MIB).min(MAX_POOL)
}

pub fn start_shards(n: usize, spec: &WorkloadSpec, capacity: u64, secondaries: usize) -> Result<Vec<ShardHandle>, BenchError> {
    let registry = Arc::new(PluginRegistry::builtin());
    (0..n)
        .map(|i| {
            let mut c = ShardConfig::in_memory(i as u16).with_plugin("cdp", cdp_options(spec, capacity));
            c.endpoint = Some("127.0.0.1:0".into());
            c.secondaries = secondaries;
            Ok(ShardHandle::start(&c, registry.clone())?)
        })
        .collect()
}

pub fn connect(h: &ShardHandle) -> Result<Client, BenchError> {
    let addr = h.addr().ok_or_else(|| BenchError::Other("shard has no endpoint".into()))?;
    let mut c = Client::connect(addr)?;
    c.set_timeout(Some(Duration::from_secs(120)));
    Ok(c)
}

fn update_request(u: &Update) -> (Vec<u8>, u16, u64) {
    invocation(&CdpRequest::Update {
        virtual_offset: u.virtual_offset,
        length: u.length,
        managed_offset: u.managed_offset,
        timestamp: u.timestamp,
    })
}

/// Issues `n` updates to one volume with up to `window` invocations in
/// flight. Returns the updates in issue order.
pub fn preload(client: &mut Client, pool: u64, tag: &str, gen: &mut Generator, n: u64, window: usize) -> Result<Vec<Update>, BenchError> {
    let mut inflight = VecDeque::new();
    let mut issued = Vec::with_capacity(n as usize);
    let recv_one = |client: &mut Client, inflight: &mut VecDeque<u64>| -> Result<(), BenchError> {
        let want = inflight.pop_front().expect("something in flight");
        let (id, resp) = client.recv()?;
        if id != want {
            return Err(BenchError::Other(format!("response {id} while waiting for {want}")));
        }
        resp.map_err(|e| BenchError::Other(format!("preload update failed: {e:?}")))?;
        Ok(())
    };
    for _ in 0..n {
        let u = gen.next_update();
        let (request, flags, value_size) = update_request(&u);
        let id = client.send(&Request::InvokeAdo { pool, key: tag.as_bytes().to_vec(), request, value_size }, flags)?;
        inflight.push_back(id);
        issued.push(u);
        if inflight.len() >= window {
            recv_one(client, &mut inflight)?;
        }
    }
    while !inflight.is_empty() {
        recv_one(client, &mut inflight)?;
    }
    Ok(issued)
}

struct ThreadResult {
    hist: LogHistogram,
    updates: u64,
    round_trips: u64,
    extra_puts: u64,
    erases: u64,
}

enum Writer {
    Ado { client: Client, pool: u64 },
    Replicated(ReplicaSet),
    PlainKv { client: Client, pool: u64, volumes: Vec<PlainKvVolume> },
}

impl Writer {
    fn round_trips(&mut self) -> u64 {
        match self {
            Writer::Ado { client, .. } | Writer::PlainKv { client, .. } => client.stats().round_trips,
            Writer::Replicated(set) => set.replicas_mut()[0].client.stats().round_trips,
        }
    }

    fn update(&mut self, thread: usize, u: &Update) -> Result<(), BenchError> {
        let tag = volume_tag(thread, u.volume);
        match self {
            Writer::Ado { client, pool } => {
                let mut cdp = CdpClient { client, pool: *pool };
                cdp.update(tag.as_bytes(), u.virtual_offset, u.length, u.managed_offset, u.timestamp)?;
            }
            Writer::Replicated(set) => {
                let (request, flags, size) = update_request(u);
                for r in set.invoke(tag.as_bytes(), &request, flags, size)? {
                    r.map_err(|e| BenchError::Other(format!("replicated update failed: {e:?}")))?;
                }
            }
            Writer::PlainKv { client, pool, volumes } => {
                let mut kv = ados_proto::RemotePool { client, pool: *pool };
                volumes[u.volume].update(&mut kv, u.virtual_offset, u.length, u.managed_offset, u.timestamp)?;
            }
        }
        Ok(())
    }

    fn plain_counters(&self) -> (u64, u64) {
        match self {
            Writer::PlainKv { volumes, .. } => volumes.iter().fold((0, 0), |(p, e), v| {
                let c = v.counters();
                (p + c.summary_puts + c.meta_puts, e + c.erases)
            }),
            _ => (0, 0),
        }
    }
}

fn open_writer(spec: &WorkloadSpec, mode: Mode, thread: usize, replicas: &[&ShardHandle], capacity: u64) -> Result<Writer, BenchError> {
    match mode {
        Mode::Ado if replicas.len() == 1 => {
            let mut client = connect(replicas[0])?;
            let pool = client.open_pool(POOL)?;
            Ok(Writer::Ado { client, pool })
        }
        Mode::Ado => {
            let set = replicas
                .iter()
                .map(|h| {
                    let mut client = connect(h)?;
                    let pool = client.open_pool(POOL)?;
                    Ok(Replica { client, pool })
                })
                .collect::<Result<Vec<_>, BenchError>>()?;
            Ok(Writer::Replicated(ReplicaSet::new(set)))
        }
        Mode::PlainKv => {
            if replicas.len() != 1 {
                return Err(BenchError::Other("plain_kv runs are unreplicated".into()));
            }
            let mut client = connect(replicas[0])?;
            let pool = client.open_pool(POOL)?;
            let mut volumes = Vec::new();
            for v in 0..spec.volumes {
                let mut kv = ados_proto::RemotePool { client: &mut client, pool };
                volumes.push(PlainKvVolume::open_or_create(&mut kv, &volume_tag(thread, v), volume_config(spec, capacity))?);
            }
            Ok(Writer::PlainKv { client, pool, volumes })
        }
    }
}

/// One write-throughput measurement: `groups` replica groups of
/// `replication` shards each, `spec.threads` writers per group.
pub fn write_run(spec: &WorkloadSpec, mode: Mode, groups: usize, replication: usize) -> Result<(RunResult, LogHistogram, Sampler), BenchError> {
    let capacity = spec.capacity(spec.quantum_mib[0]);
    let secondaries = if replication > 1 { 0 } else { 1 };
    let shards = start_shards(groups * replication, spec, capacity, secondaries)?;
    let volumes_per_shard = (spec.threads * spec.volumes) as u64;
    let size = pool_size(spec, mode, capacity, volumes_per_shard, spec.updates * spec.threads as u64);
    for h in &shards {
        let mut c = connect(h)?;
        let p = c.create_pool(POOL, size)?;
        c.close_pool(p)?;
    }
    let threads = groups * spec.threads;
    let sampler = Sampler::new(spec.sample_every);
    let deadline = spec.duration_s.map(Duration::from_secs_f64);
    let started = Instant::now();
    let results: Vec<Result<ThreadResult, BenchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let group = t % groups;
                let replicas: Vec<&ShardHandle> = shards[group * replication..(group + 1) * replication].iter().collect();
                let sampler = &sampler;
                s.spawn(move || -> Result<ThreadResult, BenchError> {
                    let mut w = open_writer(spec, mode, t, &replicas, capacity)?;
                    let mut gen = Generator::new(spec, t as u64);
                    let mut hist = LogHistogram::new();
                    let rt0 = w.round_trips();
                    let begin = Instant::now();
                    let mut n = 0;
                    loop {
                        let done = match deadline {
                            Some(d) => begin.elapsed() >= d,
                            None => n >= spec.updates,
                        };
                        if done {
                            break;
                        }
                        let u = gen.next_update();
                        let t0 = Instant::now();
                        w.update(t, &u)?;
                        hist.record(t0.elapsed());
                        sampler.tick();
                        n += 1;
                    }
                    let round_trips = w.round_trips() - rt0;
                    let (extra_puts, erases) = w.plain_counters();
                    Ok(ThreadResult { hist, updates: n, round_trips, extra_puts, erases })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(BenchError::Other("writer panicked".into())))).collect()
    });
    let seconds = started.elapsed().as_secs_f64();
    for h in shards {
        h.shutdown();
    }
    let mut hist = LogHistogram::new();
    let mut r = RunResult {
        label: format!("{}-s{groups}-r{replication}", mode.label()),
        mode: mode.label().into(),
        shards: groups,
        replication,
        threads,
        seconds,
        ..Default::default()
    };
    for res in results {
        let t = res?;
        hist.merge(&t.hist);
        r.updates += t.updates;
        r.round_trips += t.round_trips;
        r.extra_puts += t.extra_puts;
        r.erases += t.erases;
    }
    r.updates_per_s = r.updates as f64 / seconds.max(1e-9);
    r.mean_us = hist.mean_us();
    r.p50_us = hist.quantile_us(0.5);
    r.p99_us = hist.quantile_us(0.99);
    r.max_us = hist.max_us();
    Ok((r, hist, sampler))
}

/// Throughput against shard count, with and without replication.
pub fn run_write_scaling(spec: &WorkloadSpec) -> Result<Report, BenchError> {
    let mut report = Report::new("write-scaling", spec);
    for &mode in &spec.modes {
        for &rep in &spec.replication {
            if mode == Mode::PlainKv && rep > 1 {
                log::warn!("skipping replicated plain_kv run");
                continue;
            }
            for &n in &spec.shards {
                let (r, hist, sampler) = write_run(spec, mode, n, rep)?;
                log::info!("{}: {:.0} updates/s, p99 {:.1} us", r.label, r.updates_per_s, r.p99_us);
                report.throughput.extend(sampler.samples(&r.label));
                report.latency.push(LatencySummary::new(&r.label, &hist));
                report.runs.push(r);
            }
        }
    }
    scaling_checks(&mut report);
    Ok(report)
}

/// Directional checks over the runs of a write-scaling report.
pub fn scaling_checks(report: &mut Report) {
    let runs = report.runs.clone();
    let find = |mode: &str, s: usize, r: usize| runs.iter().find(|x| x.mode == mode && x.shards == s && x.replication == r);
    let mut shards: Vec<usize> = runs.iter().map(|r| r.shards).collect();
    shards.sort();
    shards.dedup();
    for mode in ["ado", "plain_kv"] {
        for rep in runs.iter().filter(|r| r.mode == mode).map(|r| r.replication).collect::<std::collections::BTreeSet<_>>() {
            let series: Vec<&RunResult> = shards.iter().filter_map(|&s| find(mode, s, rep)).collect();
            if series.len() < 2 {
                continue;
            }
            let ok = series.windows(2).all(|w| w[1].updates_per_s >= 0.9 * w[0].updates_per_s);
            let detail = series.iter().map(|r| format!("{}:{:.0}", r.shards, r.updates_per_s)).collect::<Vec<_>>().join(" ");
            report.check(&format!("{mode} r{rep} throughput monotone in shards (10% noise)"), ok, detail);
        }
        for &s in &shards {
            if let Some(base) = find(mode, s, 1) {
                for r in runs.iter().filter(|r| r.mode == mode && r.shards == s && r.replication > 1) {
                    report.check(
                        &format!("{mode} s{s} replicated r{} <= unreplicated", r.replication),
                        r.updates_per_s <= base.updates_per_s,
                        format!("{:.0} vs {:.0}", r.updates_per_s, base.updates_per_s),
                    );
                }
            }
        }
    }
    for r in &runs {
        if r.mode == "ado" {
            report.check(
                &format!("{} one round trip per update", r.label),
                r.round_trips == r.updates,
                format!("{} round trips for {} updates", r.round_trips, r.updates),
            );
        } else {
            report.check(
                &format!("{} at least one round trip per update plus maintenance traffic", r.label),
                r.round_trips > r.updates && r.extra_puts > 0,
                format!("{} round trips, {} extra puts, {} erases for {} updates", r.round_trips, r.extra_puts, r.erases, r.updates),
            );
        }
    }
}

fn random_window(rng: &mut impl Rng, blocks: u64, width: u64) -> QueryRange {
    let width = width.min(blocks);
    QueryRange::Blocks { virtual_offset: rng.gen_range(0..=blocks - width), length: width }
}

/// Query latency per quantum size. Each volume is filled to one record
/// short of two quanta, so the first quantum is summarized and the open
/// one is almost full.
pub fn run_query_latency(spec: &WorkloadSpec) -> Result<Report, BenchError> {
    let mut report = Report::new("query-latency", spec);
    let mut worst = Vec::new();
    for &mib in &spec.quantum_mib {
        let cap = spec.capacity(mib);
        let shards = start_shards(1, spec, cap, 1)?;
        let mut c = connect(&shards[0])?;
        let pool = c.create_pool(POOL, pool_size(spec, Mode::Ado, cap, 2, 2 * cap))?;
        let mut gen = Generator::with_shape(spec.seed, mib, 1, spec.blocks_per_volume, (spec.span_min, spec.span_max), spec.synthetic_clock);
        let loaded = preload(&mut c, pool, "q", &mut gen, 2 * cap - 1, spec.pipeline)?;
        if !shards[0].wait_idle(Duration::from_secs(600)) {
            return Err(BenchError::Other("summarization did not finish".into()));
        }
        let boundary = loaded[cap as usize - 1].timestamp;
        let (first, last) = (loaded[0].timestamp, loaded.last().unwrap().timestamp);
        let mut cdp = CdpClient { client: &mut c, pool };
        cdp.configure(b"empty", volume_config(spec, cap))?;
        let start = Instant::now();
        let mut max_ms: f64 = 0.0;
        let mut per_kind: Vec<(String, Vec<f64>)> = Vec::new();
        for kind in ["end", "boundary", "random", "empty"] {
            let mut lat = Vec::new();
            for _ in 0..spec.queries {
                let range = random_window(gen.rng(), spec.blocks_per_volume, spec.query_blocks);
                let (tag, t): (&[u8], u64) = match kind {
                    "end" => (b"q", last),
                    "boundary" => (b"q", boundary),
                    "random" => (b"q", gen.rng().gen_range(first..=last)),
                    _ => (b"empty", last),
                };
                let t0 = Instant::now();
                let m = cdp.query(tag, t, range)?;
                let ms = t0.elapsed().as_secs_f64() * 1e3;
                if kind == "empty" && !m.is_empty() {
                    return Err(BenchError::Other("empty volume returned a mapping".into()));
                }
                if kind != "empty" {
                    max_ms = max_ms.max(ms);
                }
                lat.push(ms);
                report.queries.push(QuerySample {
                    label: format!("q{mib}"),
                    quantum_mib: mib,
                    kind: kind.into(),
                    t,
                    entries: m.len() as u64,
                    ms,
                    completed_at_s: start.elapsed().as_secs_f64(),
                });
            }
            per_kind.push((kind.into(), lat));
        }
        let median = |k: &str| {
            let mut v = per_kind.iter().find(|p| p.0 == k).map(|p| p.1.clone()).unwrap_or_default();
            v.sort_by(|a, b| a.total_cmp(b));
            v.get(v.len() / 2).copied().unwrap_or(0.0)
        };
        if spec.queries > 0 {
            report.check(
                &format!("q{mib} boundary probe faster than quantum-end probe"),
                median("boundary") < median("end"),
                format!("median {:.3} ms vs {:.3} ms", median("boundary"), median("end")),
            );
            report.check(&format!("q{mib} empty volume sub-millisecond"), median("empty") < 1.0, format!("median {:.3} ms", median("empty")));
        }
        // Worst case is the slowest probe class by median; a single sample
        // maximum mostly measures scheduler preemption.
        let worst_ms = ["end", "boundary", "random"].iter().map(|k| median(k)).fold(0.0, f64::max);
        log::info!("{mib} MiB quanta: worst probe class median {worst_ms:.2} ms, slowest sample {max_ms:.2} ms");
        worst.push((mib, worst_ms, max_ms));
        drop(c);
        for h in shards {
            h.shutdown();
        }
    }
    if worst.len() > 1 {
        let mut sorted = worst.clone();
        sorted.sort_by_key(|w| w.0);
        let ok = sorted.windows(2).all(|w| w[1].1 > w[0].1);
        let detail = sorted
            .iter()
            .map(|(m, ms, max)| format!("{m}MiB:{ms:.2}ms (slowest sample {max:.2}ms)"))
            .collect::<Vec<_>>()
            .join(" ");
        report.check("worst-case query latency increases with quantum size", ok, detail);
    }
    Ok(report)
}

/// One writer and one periodic querier on the same shard.
pub fn run_query_under_load(spec: &WorkloadSpec) -> Result<Report, BenchError> {
    let mut report = Report::new("query-load", spec);
    let cap = spec.capacity(spec.quantum_mib[0]);
    let shards = start_shards(1, spec, cap, 1)?;
    {
        let mut c = connect(&shards[0])?;
        c.create_pool(POOL, pool_size(spec, Mode::Ado, cap, 1, spec.updates))?;
    }
    let sampler = Sampler::new(spec.sample_every);
    let last_ts = AtomicU64::new(0);
    let done = AtomicBool::new(false);
    let (writer, queries) = std::thread::scope(|s| {
        let w = s.spawn(|| -> Result<LogHistogram, BenchError> {
            let _stop = Finish(&done);
            let mut c = connect(&shards[0])?;
            let pool = c.open_pool(POOL)?;
            let mut cdp = CdpClient { client: &mut c, pool };
            let mut gen = Generator::with_shape(spec.seed, 0, 1, spec.blocks_per_volume, (spec.span_min, spec.span_max), spec.synthetic_clock);
            let mut hist = LogHistogram::new();
            let begin = Instant::now();
            let mut n = 0;
            while match spec.duration_s {
                Some(d) => begin.elapsed().as_secs_f64() < d,
                None => n < spec.updates,
            } {
                let u = gen.next_update();
                let t0 = Instant::now();
                cdp.update(b"w", u.virtual_offset, u.length, u.managed_offset, u.timestamp)?;
                hist.record(t0.elapsed());
                last_ts.store(u.timestamp, Ordering::Release);
                sampler.tick();
                n += 1;
            }
            Ok(hist)
        });
        let q = s.spawn(|| -> Result<Vec<QuerySample>, BenchError> {
            let mut c = connect(&shards[0])?;
            let pool = c.open_pool(POOL)?;
            let mut cdp = CdpClient { client: &mut c, pool };
            let mut rng = rand::rngs::StdRng::seed_from_u64(spec.seed ^ 0x9e37);
            let mut out = Vec::new();
            while !done.load(Ordering::Acquire) {
                std::thread::sleep(Duration::from_millis(spec.query_interval_ms));
                let t = last_ts.load(Ordering::Acquire);
                if t == 0 {
                    continue;
                }
                let range = random_window(&mut rng, spec.blocks_per_volume, spec.query_blocks);
                let t0 = Instant::now();
                let m = cdp.query(b"w", t, range)?;
                out.push(QuerySample {
                    label: "load".into(),
                    quantum_mib: spec.quantum_mib[0],
                    kind: "load".into(),
                    t,
                    entries: m.len() as u64,
                    ms: t0.elapsed().as_secs_f64() * 1e3,
                    completed_at_s: sampler.start().elapsed().as_secs_f64(),
                });
            }
            Ok(out)
        });
        (w.join().unwrap_or_else(|_| Err(BenchError::Other("writer panicked".into()))), q.join().unwrap_or_else(|_| Err(BenchError::Other("querier panicked".into()))))
    });
    for h in shards {
        h.shutdown();
    }
    let hist = writer?;
    report.queries = queries?;
    report.throughput = sampler.samples("load");
    report.latency.push(LatencySummary::new("load", &hist));
    report.runs.push(RunResult {
        label: "load".into(),
        mode: "ado".into(),
        shards: 1,
        replication: 1,
        threads: 1,
        updates: hist.count(),
        seconds: sampler.start().elapsed().as_secs_f64(),
        updates_per_s: hist.count() as f64 / sampler.start().elapsed().as_secs_f64().max(1e-9),
        mean_us: hist.mean_us(),
        p50_us: hist.quantile_us(0.5),
        p99_us: hist.quantile_us(0.99),
        max_us: hist.max_us(),
        round_trips: hist.count(),
        ..Default::default()
    });
    report.check("queries completed under load", !report.queries.is_empty() || spec.updates < 1000, format!("{} queries", report.queries.len()));
    Ok(report)
}

struct Finish<'a>(&'a AtomicBool);

impl Drop for Finish<'_> {
    fn drop(&mut self) {
        self.0.store(true, Ordering::Release);
    }
}

/// Persistent and volatile bytes of both deployments after the same
/// single-threaded workload, with 16 MiB quanta.
pub fn footprint(spec: &WorkloadSpec) -> Result<Vec<FootprintRow>, BenchError> {
    let cap = spec.capacity(16);
    let config = volume_config(spec, cap);
    let volumes = spec.volumes as u64;
    let mut rows = Vec::new();
    for mode in [Mode::Ado, Mode::PlainKv] {
        let size = pool_size(spec, mode, cap, volumes, spec.updates);
        let pool = Pool::create_in_memory("footprint", size, BackingKind::Memory)?;
        let mut gen = Generator::new(spec, 0);
        let row = match mode {
            Mode::Ado => {
                let mut cdp = LocalCdp::new(pool, spec.chunk_mib * MIB, config)?;
                for _ in 0..spec.updates {
                    let u = gen.next_update();
                    cdp.update(volume_tag(0, u.volume).as_bytes(), u.virtual_offset, u.length, u.managed_offset, u.timestamp)?;
                }
                let info = cdp.pool().info()?;
                FootprintRow {
                    mode: mode.label().into(),
                    updates: spec.updates,
                    client_volatile_bytes: 0,
                    server_volatile_bytes: cdp.engine().volatile_bytes(),
                    server_persistent_bytes: info.used_bytes,
                    pairs: info.pairs,
                }
            }
            Mode::PlainKv => {
                let mut pool = pool;
                let mut vols = (0..spec.volumes)
                    .map(|v| PlainKvVolume::open_or_create(&mut pool, &volume_tag(0, v), config))
                    .collect::<Result<Vec<_>, _>>()?;
                for _ in 0..spec.updates {
                    let u = gen.next_update();
                    vols[u.volume].update(&mut pool, u.virtual_offset, u.length, u.managed_offset, u.timestamp)?;
                }
                let info = pool.info()?;
                FootprintRow {
                    mode: mode.label().into(),
                    updates: spec.updates,
                    client_volatile_bytes: vols.iter().map(|v| v.volatile_bytes()).sum(),
                    server_volatile_bytes: 0,
                    server_persistent_bytes: info.used_bytes,
                    pairs: info.pairs,
                }
            }
        };
        log::info!("{}: {} persistent bytes, {} pairs", row.mode, row.server_persistent_bytes, row.pairs);
        rows.push(row);
    }
    Ok(rows)
}

pub fn run_footprint(spec: &WorkloadSpec) -> Result<Report, BenchError> {
    let mut report = Report::new("footprint", spec);
    report.footprint = footprint(spec)?;
    let (ado, plain) = (&report.footprint[0], &report.footprint[1]);
    let detail = format!("{} vs {} bytes", plain.server_persistent_bytes, ado.server_persistent_bytes);
    let ok = plain.server_persistent_bytes > ado.server_persistent_bytes;
    report.check("plain_kv persistent bytes exceed ado", ok, detail);
    Ok(report)
}
