//! Crash-injection campaign. A deterministic mixed workload runs against
//! an emulated pool that freezes its media image at a chosen durability
//! event; the image is then reopened and swept for invariant violations
//! and compared with the replay oracle over the surviving updates.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use ados_core::cdp::local::LocalCdp;
use ados_core::cdp::{CdpError, QueryRange, Retention, VolumeConfig, MIB};
use ados_core::pmem::{BackingKind, CrashPlan, DropPolicy, PersistentRegion};
use ados_core::store::{Pool, StoreError};
use ados_proto::cdp_client::{CdpClient, CdpClientError};
use ados_proto::Client;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::Oracle;
use crate::report::{CrashRow, Report};
use crate::spec::WorkloadSpec;
use crate::workload::{Generator, Update};
use crate::BenchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Update,
    Seal,
    Summarize,
    Trim,
    KvPut,
    Idle,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Update => "update",
            Phase::Seal => "seal",
            Phase::Summarize => "summarize",
            Phase::Trim => "trim",
            Phase::KvPut => "kv_put",
            Phase::Idle => "idle",
        }
    }
}

#[derive(Clone, Debug)]
enum Step {
    Update(Update),
    KvPut { key: Vec<u8>, value: Vec<u8> },
}

/// Shape of the campaign workload. Quanta are tiny so seals, summaries
/// and trims happen often.
#[derive(Clone, Debug)]
pub struct CrashWorkload {
    pub seed: u64,
    pub steps: usize,
    pub volumes: usize,
    pub blocks: u64,
    pub capacity: u64,
    pub retention: u64,
    pub pool_bytes: u64,
}

impl Default for CrashWorkload {
    fn default() -> Self {
        CrashWorkload { seed: 7, steps: 400, volumes: 2, blocks: 512, capacity: 8, retention: 3, pool_bytes: 8 * MIB }
    }
}

impl CrashWorkload {
    fn config(&self) -> VolumeConfig {
        VolumeConfig { quantum_capacity: self.capacity, retention: Retention { count: self.retention, age_ns: 0 } }
    }

    fn steps(&self) -> Vec<Step> {
        let mut gen = Generator::with_shape(self.seed, 0, self.volumes, self.blocks, (1, 40), true);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        (0..self.steps)
            .map(|_| {
                if rng.gen_ratio(1, 8) {
                    let key = format!("kv{}", rng.gen_range(0..5)).into_bytes();
                    let len = rng.gen_range(1..200);
                    Step::KvPut { key, value: (0..len).map(|_| rng.gen()).collect() }
                } else {
                    Step::Update(gen.next_update())
                }
            })
            .collect()
    }
}

fn tag(volume: usize) -> Vec<u8> {
    format!("vol{volume}").into_bytes()
}

/// Durability-event span of each step: (first event, event count after).
#[derive(Clone, Debug, Default)]
struct Trace {
    spans: Vec<(u64, u64, Phase)>,
    /// Per step, the event count before and after it.
    steps: Vec<(u64, u64)>,
}

fn events(cdp: &LocalCdp) -> u64 {
    cdp.pool().region().durability_events()
}

fn run_steps(cdp: &mut LocalCdp, steps: &[Step]) -> Result<Trace, BenchError> {
    let mut tr = Trace::default();
    for s in steps {
        let begin = events(cdp);
        match s {
            Step::Update(u) => {
                let t = tag(u.volume);
                let out = cdp.update(&t, u.virtual_offset, u.length, u.managed_offset, u.timestamp)?;
                let mid = events(cdp);
                tr.spans.push((begin, mid, if out.sealed.is_some() { Phase::Seal } else { Phase::Update }));
                if out.sealed.is_some() {
                    cdp.summarize(&t)?;
                    let after_sum = events(cdp);
                    tr.spans.push((mid, after_sum, Phase::Summarize));
                    cdp.trim(&t, u.timestamp)?;
                    tr.spans.push((after_sum, events(cdp), Phase::Trim));
                }
            }
            Step::KvPut { key, value } => {
                cdp.pool_mut().put(key, value)?;
                tr.spans.push((begin, events(cdp), Phase::KvPut));
            }
        }
        tr.steps.push((begin, events(cdp)));
    }
    Ok(tr)
}

fn fresh(w: &CrashWorkload) -> Result<LocalCdp, BenchError> {
    let pool = Pool::create_in_memory("crash", w.pool_bytes, BackingKind::Emulated)?;
    let mut cdp = LocalCdp::new(pool, MIB, w.config())?;
    cdp.set_maintenance(false);
    Ok(cdp)
}

/// A planned crash point and the phase it falls in.
#[derive(Clone, Copy, Debug)]
pub struct Point {
    pub event: u64,
    pub phase: Phase,
}

/// Picks at least `n` crash points spread over every phase, plus one
/// before the first workload persist and one after the workload ends.
pub fn plan_points(w: &CrashWorkload, n: usize) -> Result<Vec<Point>, BenchError> {
    let mut cdp = fresh(w)?;
    let base = events(&cdp);
    let tr = run_steps(&mut cdp, &w.steps())?;
    let end = events(&cdp);
    let mut by_phase: HashMap<Phase, Vec<u64>> = HashMap::new();
    for &(a, b, p) in &tr.spans {
        by_phase.entry(p).or_default().extend(a..b);
    }
    let mut phases: Vec<Phase> = by_phase.keys().copied().collect();
    phases.sort();
    let per = n.div_ceil(phases.len().max(1));
    let mut points = vec![Point { event: base, phase: Phase::Update }, Point { event: end, phase: Phase::Idle }];
    for p in phases {
        let evs = &by_phase[&p];
        let take = per.min(evs.len());
        for i in 0..take {
            points.push(Point { event: evs[i * evs.len() / take], phase: p });
        }
    }
    points.sort_by_key(|p| p.event);
    points.dedup_by_key(|p| p.event);
    Ok(points)
}

const POLICIES: [DropPolicy; 3] = [DropPolicy::Random, DropPolicy::DropAll, DropPolicy::KeepAll];

/// Crashes at `point`, recovers and checks. Violations are returned in
/// the row rather than as errors.
pub fn crash_once(w: &CrashWorkload, point: Point, policy: DropPolicy) -> Result<CrashRow, BenchError> {
    let steps = w.steps();
    let mut cdp = fresh(w)?;
    cdp.pool_mut()
        .region_mut()
        .set_crash_plan(Some(CrashPlan { at_event: point.event, seed: point.event ^ w.seed, policy }))?;
    let tr = run_steps(&mut cdp, &steps)?;
    let image = cdp.pool().region().crash_image()?;
    drop(cdp);
    let mut row = CrashRow {
        point: point.event,
        phase: point.phase.label().into(),
        policy: format!("{policy:?}"),
        recovered_updates: 0,
        acknowledged_updates: 0,
        probes: 0,
        ok: true,
        detail: String::new(),
    };
    if let Err(e) = verify(w, &steps, &tr, point.event, image, &mut row) {
        row.ok = false;
        row.detail = e;
    }
    Ok(row)
}

fn verify(w: &CrashWorkload, steps: &[Step], tr: &Trace, at: u64, image: Vec<u8>, row: &mut CrashRow) -> Result<(), String> {
    let region = PersistentRegion::open_image(image, BackingKind::Memory).map_err(|e| format!("region recovery: {e}"))?;
    let pool = Pool::from_region("crash", region).map_err(|e| format!("pool open: {e}"))?;
    let mut cdp = LocalCdp::new(pool, MIB, w.config()).map_err(|e| format!("cdp recovery: {e}"))?;
    cdp.set_maintenance(false);
    cdp.check().map_err(|e| format!("invariant sweep: {e}"))?;

    // Steps fully durable before the crash, and steps begun before it.
    let durable = |i: usize| tr.steps[i].1 <= at;
    let begun = |i: usize| tr.steps[i].0 <= at;

    let mut rng = ChaCha8Rng::seed_from_u64(at);
    let recovered = cdp.volumes();
    for v in 0..w.volumes {
        let vt = tag(v);
        let mine: Vec<(usize, Update)> = steps
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Step::Update(u) if u.volume == v => Some((i, *u)),
                _ => None,
            })
            .collect();
        let acked = mine.iter().filter(|(i, _)| durable(*i)).count();
        let started = mine.iter().filter(|(i, _)| begun(*i)).count();
        row.acknowledged_updates += acked as u64;
        if !recovered.contains(&vt) {
            if acked > 0 {
                return Err(format!("volume {v} lost with {acked} durable updates"));
            }
            continue;
        }
        let last = cdp.last_timestamp(&vt).map_err(|e| e.to_string())?;
        let k = mine.iter().take_while(|(_, u)| u.timestamp <= last).count();
        if k < acked || k > started {
            return Err(format!("volume {v}: {k} updates survived, {acked} durable, {started} begun"));
        }
        row.recovered_updates += k as u64;

        // Retained records are exactly the newest surviving updates.
        let records = cdp.records(&vt).map_err(|e| e.to_string())?;
        let first = k - records.len();
        for (j, r) in records.iter().enumerate() {
            let u = mine[first + j].1;
            if (r.virtual_offset, u64::from(r.length), r.managed_offset, r.timestamp)
                != (u.virtual_offset, u.length, u.managed_offset, u.timestamp)
            {
                return Err(format!("volume {v}: record {j} is {r:?}, expected {u:?}"));
            }
        }

        let mut oracle = Oracle::new(w.blocks);
        for (_, u) in &mine[..k] {
            oracle.push(u.timestamp, u.virtual_offset, u.length, u.managed_offset);
        }
        let mut probes = vec![(last, QueryRange::Full), (0, QueryRange::Full)];
        for _ in 0..12 {
            let t = rng.gen_range(0..=last + 1);
            let lo = rng.gen_range(0..w.blocks);
            let range = if rng.gen_bool(0.3) { QueryRange::Full } else { QueryRange::Blocks { virtual_offset: lo, length: rng.gen_range(1..=w.blocks - lo) } };
            probes.push((t, range));
        }
        let expected = oracle.answer_many(&probes);
        for ((t, range), want) in probes.iter().zip(expected) {
            row.probes += 1;
            match cdp.query(&vt, *t, *range) {
                Ok(got) if got == want => {}
                Ok(got) => return Err(format!("volume {v} query t={t} {range:?}: got {got:?}, oracle {want:?}")),
                Err(CdpError::HistoryTrimmed { horizon }) if *t < horizon => {
                    let at_h = cdp.query(&vt, horizon, *range).map_err(|e| format!("query at horizon {horizon}: {e}"))?;
                    if at_h != oracle.answer(horizon, *range) {
                        return Err(format!("volume {v} query at horizon {horizon} differs from oracle"));
                    }
                }
                Err(e) => return Err(format!("volume {v} query t={t}: {e}")),
            }
        }

        // The recovered volume keeps working.
        cdp.update(&vt, 0, 1, 1 << 40, last + 1).map_err(|e| format!("update after recovery: {e}"))?;
    }

    // Plain pairs: the newest durable put of each key survives, or a put
    // that was in flight at the crash.
    let mut expect: HashMap<Vec<u8>, Vec<Vec<u8>>> = HashMap::new();
    for (i, s) in steps.iter().enumerate() {
        if let Step::KvPut { key, value } = s {
            if durable(i) {
                expect.insert(key.clone(), vec![value.clone()]);
            } else if begun(i) {
                expect.entry(key.clone()).or_default().push(value.clone());
            }
        }
    }
    for (key, allowed) in expect {
        let durable_put = steps.iter().enumerate().any(|(i, s)| matches!(s, Step::KvPut { key: k, .. } if *k == key && durable(i)));
        match cdp.pool().get(&key) {
            Ok(v) if allowed.contains(&v) => {}
            Ok(_) => return Err(format!("pair {} holds a value never written", String::from_utf8_lossy(&key))),
            Err(StoreError::NotFound) if !durable_put => {}
            Err(e) => return Err(format!("pair {}: {e}", String::from_utf8_lossy(&key))),
        }
    }
    cdp.check().map_err(|e| format!("invariant sweep after new updates: {e}"))?;
    Ok(())
}

/// Runs the in-process campaign over at least `n` crash points.
pub fn campaign(w: &CrashWorkload, n: usize) -> Result<Vec<CrashRow>, BenchError> {
    let points = plan_points(w, n)?;
    points.iter().enumerate().map(|(i, &p)| crash_once(w, p, POLICIES[i % POLICIES.len()])).collect()
}

/// Crashes a real server process with `--crash-point` while a client
/// writes to it, then reopens the pool file and checks it.
pub fn process_crash(server: &Path, dir: &Path, crash_point: u64, updates: u64, seed: u64) -> Result<CrashRow, BenchError> {
    let blocks = 4096;
    let capacity = 16u64;
    let config = dir.join("server.toml");
    let mut opts = toml::Table::new();
    opts.insert("chunk_mib".into(), 1.into());
    opts.insert("quantum_records".into(), (capacity as i64).into());
    opts.insert("retention_count".into(), 3.into());
    let mut shard = toml::Table::new();
    shard.insert("id".into(), 0.into());
    shard.insert("endpoint".into(), "127.0.0.1:0".into());
    shard.insert("dir".into(), dir.join("pools").to_string_lossy().to_string().into());
    shard.insert("secondaries".into(), 0.into());
    let mut plugin = toml::Table::new();
    plugin.insert("id".into(), "cdp".into());
    plugin.insert("options".into(), opts.into());
    shard.insert("plugins".into(), toml::Value::Array(vec![plugin.into()]));
    let mut top = toml::Table::new();
    top.insert("version".into(), 1.into());
    top.insert("shard".into(), toml::Value::Array(vec![shard.into()]));
    std::fs::write(&config, toml::to_string(&top).map_err(|e| BenchError::Other(e.to_string()))?)?;

    let mut child = Command::new(server)
        .arg("--config")
        .arg(&config)
        .arg("--crash-point")
        .arg(crash_point.to_string())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().expect("piped")).read_line(&mut line)?;
    let addr = line.split_whitespace().last().ok_or_else(|| BenchError::Other("server printed no address".into()))?.to_string();

    let mut gen = Generator::with_shape(seed, 0, 1, blocks, (1, 64), true);
    let mut issued = Vec::new();
    let mut acked = 0usize;
    let mut crashed = false;
    if let Ok(mut client) = Client::connect(addr.as_str()) {
        client.set_timeout(Some(Duration::from_secs(30)));
        match client.create_pool("crash", 16 * MIB) {
            Ok(pool) => {
                let mut cdp = CdpClient { client: &mut client, pool };
                for _ in 0..updates {
                    let u = gen.next_update();
                    issued.push(u);
                    match cdp.update(b"vol", u.virtual_offset, u.length, u.managed_offset, u.timestamp) {
                        Ok(_) => acked += 1,
                        Err(CdpClientError::Client(e)) if e.is_transport() => {
                            crashed = true;
                            break;
                        }
                        Err(e) => return Err(BenchError::Other(format!("update failed without a crash: {e}"))),
                    }
                }
            }
            Err(e) if e.is_transport() => crashed = true,
            Err(e) => return Err(e.into()),
        }
    } else {
        crashed = true;
    }
    if !crashed {
        let _ = child.kill();
    }
    let _ = child.wait();

    let mut row = CrashRow {
        point: crash_point,
        phase: if crashed { "process".into() } else { "process-idle".into() },
        policy: "abort".into(),
        recovered_updates: 0,
        acknowledged_updates: acked as u64,
        probes: 0,
        ok: true,
        detail: String::new(),
    };
    let path = dir.join("pools").join("crash.pool");
    if !path.exists() {
        if acked > 0 {
            row.ok = false;
            row.detail = "pool file missing after acknowledged updates".into();
        }
        return Ok(row);
    }
    let result = (|| -> Result<(), String> {
        let pool = Pool::open_file(&path, "crash", Default::default()).map_err(|e| format!("pool open: {e}"))?;
        let mut cdp = LocalCdp::new(pool, MIB, VolumeConfig::default()).map_err(|e| format!("cdp recovery: {e}"))?;
        cdp.check().map_err(|e| format!("invariant sweep: {e}"))?;
        if !cdp.volumes().contains(&b"vol".to_vec()) {
            return if acked == 0 { Ok(()) } else { Err(format!("volume lost with {acked} acknowledged updates")) };
        }
        let last = cdp.last_timestamp(b"vol").map_err(|e| e.to_string())?;
        let k = issued.iter().take_while(|u| u.timestamp <= last).count();
        if k < acked || k > issued.len() {
            return Err(format!("{k} updates survived, {acked} acknowledged, {} sent", issued.len()));
        }
        row.recovered_updates = k as u64;
        let mut oracle = Oracle::new(blocks);
        for u in &issued[..k] {
            oracle.push(u.timestamp, u.virtual_offset, u.length, u.managed_offset);
        }
        for t in [last, last / 2, last.saturating_sub(3_000)] {
            row.probes += 1;
            match cdp.query(b"vol", t, QueryRange::Full) {
                Ok(got) if got == oracle.answer(t, QueryRange::Full) => {}
                Ok(_) => return Err(format!("query at {t} differs from oracle")),
                Err(CdpError::HistoryTrimmed { horizon }) if t < horizon => {}
                Err(e) => return Err(format!("query at {t}: {e}")),
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        row.ok = false;
        row.detail = e;
    }
    Ok(row)
}

/// Locates the `server` binary built alongside the running executable.
pub fn sibling_server() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?;
    [dir.join("server"), dir.parent()?.join("server")].into_iter().find(|p| p.is_file())
}

/// Emulated crash campaign over `spec.crash_points` points, followed by
/// `spec.process_crash_points` aborts of a real server process.
pub fn run_crash_campaign(spec: &WorkloadSpec, server: Option<&Path>) -> Result<Report, BenchError> {
    let mut report = Report::new("crash", spec);
    let w = CrashWorkload { seed: spec.seed, ..Default::default() };
    report.crash = campaign(&w, spec.crash_points)?;
    let emulated = report.crash.len();
    if let Some(bin) = server {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for i in 0..spec.process_crash_points {
            let dir = std::env::temp_dir().join(format!("ados-crash-{}-{i}", std::process::id()));
            let _ = std::fs::remove_dir_all(&dir);
            std::fs::create_dir_all(&dir)?;
            let point = rng.gen_range(20..1_500);
            let row = process_crash(bin, &dir, point, 400, spec.seed + i as u64);
            let _ = std::fs::remove_dir_all(&dir);
            report.crash.push(row?);
        }
    }
    let bad: Vec<CrashRow> = report.crash.iter().filter(|r| !r.ok).cloned().collect();
    report.check(
        "crash_points",
        emulated >= spec.crash_points,
        format!("{emulated} emulated points, {} process crashes", report.crash.len() - emulated),
    );
    let phases: std::collections::BTreeSet<String> = report.crash[..emulated].iter().map(|r| r.phase.clone()).collect();
    report.check("crash_phases", phases.len() >= 6, format!("{phases:?}"));
    report.check(
        "crash_recovery",
        bad.is_empty(),
        match bad.first() {
            Some(r) => format!("{} violations; first at point {} ({}): {}", bad.len(), r.point, r.phase, r.detail),
            None => format!("{} reopens clean", report.crash.len()),
        },
    );
    Ok(report)
}
