//! Verification suites: oracle equivalence, retention bound, ADO versus
//! Plain-KV differential, protocol fuzzing and replication.

use std::io::Write as _;
use std::net::{Shutdown, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ados_core::ado::{AdoError, LocalAdo, PluginRegistry, PluginSpec};
use ados_core::cdp::local::LocalCdp;
use ados_core::cdp::plainkv::PlainKvVolume;
use ados_core::cdp::plugin::{decode_mapping, decode_stats, from_status, CdpRequest};
use ados_core::cdp::{BlockMapping, CdpError, QueryRange, Retention, VolumeConfig, MIB};
use ados_core::pmem::BackingKind;
use ados_core::store::Pool;
use ados_proto::cdp_client::invocation;
use ados_proto::frame::{read_frame, Frame, Opcode, VERSION};
use ados_proto::message::{decode_response, encode_response};
use ados_proto::{ErrorCode, Payload, Replica, ReplicaSet, ReplicationError, Request, Response, ShardConfig, ShardHandle, WireError};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::Oracle;
use crate::BenchError;

/// Outcome of a suite: how many cases and individual checks ran and the
/// first few failures.
#[derive(Clone, Debug, Default)]
pub struct Tally {
    pub cases: u64,
    pub checks: u64,
    pub failures: u64,
    pub examples: Vec<String>,
    pub seconds: f64,
}

impl Tally {
    pub fn fail(&mut self, what: impl Into<String>) {
        self.failures += 1;
        if self.examples.len() < 5 {
            self.examples.push(what.into());
        }
    }

    pub fn expect(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.fail(what());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checks > 0
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} cases, {} checks, {} failures in {:.1} s", self.cases, self.checks, self.failures, self.seconds);
        if let Some(e) = self.examples.first() {
            s.push_str(&format!("; first: {e}"));
        }
        s
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// A random single-volume update history: spans, occasional repeated
/// timestamps and a mix of sequential and scattered managed offsets.
pub fn random_history(rng: &mut ChaCha8Rng, n: usize, blocks: u64, span: (u64, u64)) -> Vec<(u64, u64, u64, u64)> {
    let mut ts = 0u64;
    let mut cursor = rng.gen_range(0..1u64 << 32);
    (0..n)
        .map(|_| {
            if ts == 0 || !rng.gen_ratio(1, 10) {
                ts += rng.gen_range(1..2_000);
            }
            let len = rng.gen_range(span.0..=span.1.min(blocks));
            let v = rng.gen_range(0..=blocks - len);
            let m = if rng.gen_ratio(7, 10) {
                cursor += len;
                cursor - len
            } else {
                rng.gen_range(0..1u64 << 40)
            };
            (ts, v, len, m)
        })
        .collect()
}

fn random_probe(rng: &mut ChaCha8Rng, last: u64, blocks: u64, stamps: &[u64]) -> (u64, QueryRange) {
    let t = match rng.gen_range(0..4) {
        0 => *stamps.choose(rng).unwrap_or(&0),
        1 => last,
        _ => rng.gen_range(0..=last + 1_000),
    };
    let range = if rng.gen_ratio(3, 10) {
        QueryRange::Full
    } else {
        let lo = rng.gen_range(0..blocks);
        QueryRange::Blocks { virtual_offset: lo, length: rng.gen_range(1..=blocks - lo) }
    };
    (t, range)
}

/// Checks one engine answer against the oracle. A trimmed answer is
/// accepted only below its horizon, and the horizon itself must answer.
fn judge(
    tally: &mut Tally,
    oracle: &Oracle,
    t: u64,
    range: QueryRange,
    got: Result<BlockMapping, CdpError>,
    mut at: impl FnMut(u64) -> Result<BlockMapping, CdpError>,
    ctx: &str,
) {
    match got {
        Ok(m) => {
            let want = oracle.answer(t, range);
            tally.expect(m == want, || format!("{ctx}: t={t} {range:?} got {} entries, oracle {}", m.len(), want.len()));
        }
        Err(CdpError::HistoryTrimmed { horizon }) => {
            tally.expect(t < horizon, || format!("{ctx}: t={t} trimmed with horizon {horizon}"));
            match at(horizon) {
                Ok(m) => tally.expect(m == oracle.answer(horizon, range), || format!("{ctx}: horizon {horizon} differs")),
                Err(e) => tally.fail(format!("{ctx}: query at horizon {horizon}: {e}")),
            }
        }
        Err(e) => tally.fail(format!("{ctx}: t={t}: {e}")),
    }
}

/// Randomized workloads against the in-process engine, each probed with
/// `probes` random point-in-time queries compared with the oracle.
pub fn oracle_equivalence(seed: u64, workloads: u64, max_updates: usize, probes: usize) -> Result<Tally, BenchError> {
    const BLOCKS: u64 = 4096;
    let start = Instant::now();
    let mut tally = Tally::default();
    for w in 0..workloads {
        let mut rng = rng_for(seed, w);
        let n = rng.gen_range(1..=max_updates);
        let capacity = *[256u64, 1024, 65536].choose(&mut rng).unwrap();
        let count = *[0u64, 3, 10].choose(&mut rng).unwrap();
        let config = VolumeConfig { quantum_capacity: capacity, retention: Retention { count, age_ns: 0 } };
        let pool = Pool::create_in_memory("oracle", 96 * MIB, BackingKind::Memory)?;
        let mut cdp = LocalCdp::new(pool, 8 * MIB, config)?;
        let history = random_history(&mut rng, n, BLOCKS, (1, 100));
        let mut oracle = Oracle::new(BLOCKS);
        for &(ts, v, len, m) in &history {
            cdp.update(b"vol", v, len, m, ts)?;
            oracle.push(ts, v, len, m);
        }
        let stamps: Vec<u64> = history.iter().map(|h| h.0).collect();
        let last = *stamps.last().unwrap();
        let ctx = format!("workload {w} ({n} updates, capacity {capacity}, retention {count})");
        for _ in 0..probes {
            let (t, range) = random_probe(&mut rng, last, BLOCKS, &stamps);
            let got = cdp.query(b"vol", t, range);
            judge(&mut tally, &oracle, t, range, got, |h| cdp.query(b"vol", h, range), &ctx);
        }
        if w % 50 == 0 {
            if let Err(e) = cdp.check() {
                tally.fail(format!("{ctx}: invariant sweep: {e}"));
            }
        }
        tally.cases += 1;
    }
    tally.seconds = start.elapsed().as_secs_f64();
    Ok(tally)
}

fn ado_error(e: AdoError) -> CdpError {
    match e {
        AdoError::Plugin { status, message } => from_status(status, &message),
        AdoError::Store(s) => CdpError::Store(s),
        other => CdpError::Corrupt(other.to_string()),
    }
}

/// In-process ADO deployment of the CDP plugin over one pool.
pub struct AdoVolume {
    ado: LocalAdo,
}

impl AdoVolume {
    pub fn new(pool_bytes: u64, config: VolumeConfig) -> Result<AdoVolume, BenchError> {
        let pool = Arc::new(Mutex::new(Pool::create_in_memory("ado", pool_bytes, BackingKind::Memory)?));
        let mut spec = PluginSpec::new("cdp");
        spec.options.insert("chunk_mib".into(), 1.into());
        spec.options.insert("quantum_records".into(), (config.quantum_capacity as i64).into());
        spec.options.insert("retention_count".into(), (config.retention.count as i64).into());
        spec.options.insert("retention_age_ns".into(), (config.retention.age_ns as i64).into());
        Ok(AdoVolume { ado: LocalAdo::new(pool, &PluginRegistry::builtin(), &[spec])? })
    }

    fn call(&mut self, tag: &[u8], req: &CdpRequest) -> Result<Vec<Vec<u8>>, CdpError> {
        let (body, flags, size) = invocation(req);
        self.ado.invoke(tag, &body, flags, size).map_err(ado_error)
    }

    pub fn update(&mut self, tag: &[u8], v: u64, len: u64, m: u64, ts: u64) -> Result<(), CdpError> {
        self.call(tag, &CdpRequest::Update { virtual_offset: v, length: len, managed_offset: m, timestamp: ts }).map(drop)
    }

    pub fn query(&mut self, tag: &[u8], t: u64, range: QueryRange) -> Result<BlockMapping, CdpError> {
        let out = self.call(tag, &CdpRequest::Query { t, range })?;
        decode_mapping(out.first().map_or(&[][..], |b| b))
    }

    pub fn quanta(&mut self, tag: &[u8]) -> Result<u64, CdpError> {
        let out = self.call(tag, &CdpRequest::Stats)?;
        Ok(decode_stats(out.first().map_or(&[][..], |b| b))?.quanta)
    }

    pub fn pool(&self) -> &Arc<Mutex<Pool>> {
        self.ado.pool()
    }
}

/// Count-mode retention of 10: after every update each volume holds at
/// most 11 quanta on the direct engine, the plugin path and Plain-KV.
pub fn retention_bound(seed: u64, workloads: u64, updates: usize) -> Result<(Tally, u64), BenchError> {
    let start = Instant::now();
    let mut tally = Tally::default();
    let mut worst = 0;
    for w in 0..workloads {
        let mut rng = rng_for(seed, w);
        let capacity = *[1u64, 4, 16, 64].choose(&mut rng).unwrap();
        let config = VolumeConfig { quantum_capacity: capacity, retention: Retention { count: 10, age_ns: 0 } };
        let mut cdp = LocalCdp::new(Pool::create_in_memory("ret", 16 * MIB, BackingKind::Memory)?, MIB, config)?;
        let mut ado = AdoVolume::new(16 * MIB, config)?;
        let mut kv = Pool::create_in_memory("plain", 64 * MIB, BackingKind::Memory)?;
        let mut plain = PlainKvVolume::open_or_create(&mut kv, "a", config)?;
        let history = random_history(&mut rng, updates, 4096, (1, 100));
        for (i, &(ts, v, len, m)) in history.iter().enumerate() {
            let tag: &[u8] = if i % 3 == 0 { b"a" } else { b"b" };
            cdp.update(tag, v, len, m, ts)?;
            ado.update(tag, v, len, m, ts)?;
            plain.update(&mut kv, v, len, m, ts)?;
            let pq = plain.quanta() as u64;
            worst = worst.max(pq);
            tally.expect(pq <= 11, || format!("Plain-KV volume holds {pq} quanta after update {i}"));
            for t in [&b"a"[..], b"b"] {
                if let Ok(st) = cdp.stats(t) {
                    worst = worst.max(st.quanta);
                    tally.expect(st.quanta <= 11, || format!("engine volume {t:?} holds {} quanta after update {i}", st.quanta));
                }
            }
            let q = ado.quanta(tag)?;
            worst = worst.max(q);
            tally.expect(q <= 11, || format!("plugin volume holds {q} quanta after update {i}"));
        }
        tally.cases += 1;
    }
    tally.seconds = start.elapsed().as_secs_f64();
    Ok((tally, worst))
}

/// Identical update streams through the ADO plugin and the Plain-KV
/// client must give identical answers, and both must match the oracle.
pub fn ado_plainkv_differential(seed: u64, workloads: u64, max_updates: usize, probes: usize) -> Result<Tally, BenchError> {
    const BLOCKS: u64 = 4096;
    let start = Instant::now();
    let mut tally = Tally::default();
    for w in 0..workloads {
        let mut rng = rng_for(seed, w);
        let capacity = *[8u64, 64, 256].choose(&mut rng).unwrap();
        let count = *[0u64, 10].choose(&mut rng).unwrap();
        let config = VolumeConfig { quantum_capacity: capacity, retention: Retention { count, age_ns: 0 } };
        let mut ado = AdoVolume::new(64 * MIB, config)?;
        let mut kv = Pool::create_in_memory("plain", 256 * MIB, BackingKind::Memory)?;
        let mut plain = PlainKvVolume::open_or_create(&mut kv, "vol", config)?;
        let n = rng.gen_range(1..=max_updates);
        let history = random_history(&mut rng, n, BLOCKS, (1, 100));
        let mut oracle = Oracle::new(BLOCKS);
        let mut stamps = Vec::new();
        let ctx = format!("workload {w} (capacity {capacity}, retention {count})");
        let check_every = (n / 4).max(1);
        for (i, &(ts, v, len, m)) in history.iter().enumerate() {
            ado.update(b"vol", v, len, m, ts)?;
            plain.update(&mut kv, v, len, m, ts)?;
            oracle.push(ts, v, len, m);
            stamps.push(ts);
            if (i + 1) % check_every != 0 && i + 1 != n {
                continue;
            }
            for _ in 0..probes {
                let (t, range) = random_probe(&mut rng, ts, BLOCKS, &stamps);
                let a = ado.query(b"vol", t, range);
                let p = plain.query(t, range);
                let same = match (&a, &p) {
                    (Ok(x), Ok(y)) => x == y,
                    (Err(CdpError::HistoryTrimmed { horizon: x }), Err(CdpError::HistoryTrimmed { horizon: y })) => x == y,
                    _ => false,
                };
                tally.expect(same, || format!("{ctx}: t={t} {range:?}: ADO {a:?} vs Plain-KV {p:?}"));
                judge(&mut tally, &oracle, t, range, a, |h| ado.query(b"vol", h, range), &ctx);
            }
        }
        // A client restart rebuilds the same view from the pairs alone.
        let rebuilt = PlainKvVolume::rebuild(&mut kv, "vol")?;
        let last = *stamps.last().unwrap();
        tally.expect(rebuilt.query(last, QueryRange::Full).ok() == plain.query(last, QueryRange::Full).ok(), || {
            format!("{ctx}: rebuilt Plain-KV volume differs")
        });
        tally.cases += 1;
    }
    tally.seconds = start.elapsed().as_secs_f64();
    Ok(tally)
}

fn random_bytes(rng: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| rng.gen()).collect()
}

fn random_name(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..24);
    (0..n).map(|_| rng.gen_range(' '..='~')).collect()
}

pub fn random_request(rng: &mut ChaCha8Rng) -> Request {
    let pool = rng.gen();
    match rng.gen_range(0..10) {
        0 => Request::OpenPool { name: random_name(rng) },
        1 => Request::CreatePool { name: random_name(rng), size: rng.gen() },
        2 => Request::DeletePool { name: random_name(rng) },
        3 => Request::ClosePool { pool },
        4 => Request::Put { pool, key: random_bytes(rng, 64), value: random_bytes(rng, 512) },
        5 => Request::Get { pool, key: random_bytes(rng, 64) },
        6 => Request::Erase { pool, key: random_bytes(rng, 64) },
        7 => Request::Resize { pool, key: random_bytes(rng, 64), new_size: rng.gen() },
        8 => Request::InvokeAdo { pool, key: random_bytes(rng, 64), request: random_bytes(rng, 256), value_size: rng.gen() },
        _ => Request::InvokePutAdo { pool, key: random_bytes(rng, 64), value: random_bytes(rng, 256), request: random_bytes(rng, 256) },
    }
}

const CODES: [ErrorCode; 16] = [
    ErrorCode::Protocol,
    ErrorCode::NotFound,
    ErrorCode::PoolNotFound,
    ErrorCode::NameCollision,
    ErrorCode::Busy,
    ErrorCode::OutOfMemory,
    ErrorCode::LockedByAdo,
    ErrorCode::WrongShard,
    ErrorCode::InvalidHandle,
    ErrorCode::InvalidArgument,
    ErrorCode::UnknownCursor,
    ErrorCode::Plugin,
    ErrorCode::PluginPanicked,
    ErrorCode::PluginLoad,
    ErrorCode::Internal,
    ErrorCode::Shutdown,
];

pub fn random_response(rng: &mut ChaCha8Rng) -> Response {
    match rng.gen_range(0..5) {
        0 => Ok(Payload::Empty),
        1 => Ok(Payload::Handle(rng.gen())),
        2 => Ok(Payload::Value(random_bytes(rng, 512))),
        3 => Ok(Payload::Buffers((0..rng.gen_range(0..5)).map(|_| random_bytes(rng, 128)).collect())),
        _ => Err(WireError::new(*CODES.choose(rng).unwrap(), rng.gen(), random_name(rng))),
    }
}

/// Encodes `frames` random requests and responses, decodes them back and
/// compares; every frame is also mutated and the decoders must reject or
/// accept it without panicking.
pub fn protocol_fuzz(seed: u64, frames: u64) -> Tally {
    let start = Instant::now();
    let mut tally = Tally::default();
    let mut rng = rng_for(seed, 0);
    for i in 0..frames {
        let rid = rng.gen();
        let flags = rng.gen();
        let (frame, req, resp) = if i % 2 == 0 {
            let r = random_request(&mut rng);
            (Frame::new(r.opcode(), flags, rid, r.encode_body()), Some(r), None)
        } else {
            let r = random_response(&mut rng);
            (Frame::new(Opcode::Response, flags, rid, encode_response(&r)), None, Some(r))
        };
        let bytes = frame.encode();
        match Frame::decode(&bytes) {
            Ok(Some((f, used))) => {
                tally.expect(used == bytes.len() && f == frame, || format!("frame {i} changed in transit"));
                if let Some(r) = req {
                    tally.expect(Request::decode(f.opcode, &f.body).as_ref() == Ok(&r), || format!("request {i} did not round-trip"));
                }
                if let Some(r) = resp {
                    tally.expect(decode_response(&f.body).as_ref() == Ok(&r), || format!("response {i} did not round-trip"));
                }
            }
            other => tally.fail(format!("frame {i} failed to decode: {other:?}")),
        }
        // Every proper prefix is incomplete.
        let cut = rng.gen_range(0..bytes.len());
        tally.expect(matches!(Frame::decode(&bytes[..cut]), Ok(None) | Err(_)), || format!("prefix of frame {i} decoded"));
        let mut bad = bytes.clone();
        for _ in 0..rng.gen_range(1..4) {
            let at = rng.gen_range(0..bad.len());
            bad[at] = rng.gen();
        }
        let survived = catch_unwind(AssertUnwindSafe(|| {
            if let Ok(Some((f, _))) = Frame::decode(&bad) {
                if f.opcode == Opcode::Response {
                    let _ = decode_response(&f.body);
                } else {
                    let _ = Request::decode(f.opcode, &f.body);
                }
            }
            let _ = Request::decode(*Opcode::ALL.choose(&mut ChaCha8Rng::seed_from_u64(i)).unwrap(), &bad);
            let _ = decode_response(&bad);
        }));
        tally.expect(survived.is_ok(), || format!("mutated frame {i} panicked a decoder"));
        tally.cases += 1;
    }
    tally.seconds = start.elapsed().as_secs_f64();
    tally
}

fn header(len: u32, version: u8, opcode: u8, rid: u64) -> Vec<u8> {
    let mut b = len.to_le_bytes().to_vec();
    b.push(version);
    b.push(opcode);
    b.extend_from_slice(&0u16.to_le_bytes());
    b.extend_from_slice(&rid.to_le_bytes());
    b
}

fn malformed(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let valid = |rng: &mut ChaCha8Rng| {
        let r = random_request(rng);
        Frame::new(r.opcode(), 0, rng.gen(), r.encode_body()).encode()
    };
    match rng.gen_range(0..7) {
        0 => random_bytes(rng, 256),
        1 => header(12, rng.gen_range(2..=255), Opcode::Get as u8, rng.gen()),
        2 => header(12, VERSION, rng.gen_range(12..=255), rng.gen()),
        3 => header(12, VERSION, Opcode::Response as u8, rng.gen()),
        4 => {
            // Body shorter or longer than its fields.
            let mut f = valid(rng);
            let keep = rng.gen_range(16..=f.len());
            f.truncate(keep);
            let extra = random_bytes(rng, 8);
            f.extend_from_slice(&extra);
            let len = (f.len() - 4) as u32;
            f[..4].copy_from_slice(&len.to_le_bytes());
            f
        }
        5 => {
            let mut f = valid(rng);
            f[..4].copy_from_slice(&rng.gen_range(0..12u32).to_le_bytes());
            f
        }
        _ => {
            // A valid frame with random byte damage.
            let mut f = valid(rng);
            for _ in 0..rng.gen_range(1..4) {
                let at = rng.gen_range(4..f.len());
                f[at] = rng.gen();
            }
            f
        }
    }
}

/// Sends malformed frames to a live server, one connection each. Every
/// connection must end in response frames and a clean close, and the
/// server must keep serving afterwards.
pub fn malformed_frames(seed: u64, connections: u64) -> Result<Tally, BenchError> {
    let start = Instant::now();
    let mut tally = Tally::default();
    let mut c = ShardConfig::in_memory(0);
    c.endpoint = Some("127.0.0.1:0".into());
    let h = ShardHandle::start(&c, Arc::new(PluginRegistry::builtin()))?;
    let addr = h.addr().ok_or_else(|| BenchError::Other("no endpoint".into()))?;
    let mut rng = rng_for(seed, 1);
    for i in 0..connections {
        let bytes = malformed(&mut rng);
        let mut s = TcpStream::connect(addr)?;
        s.set_read_timeout(Some(Duration::from_secs(10)))?;
        // The server may close first; a failed write is a disconnect.
        let _ = s.write_all(&bytes);
        let _ = s.shutdown(Shutdown::Write);
        let mut received = Vec::new();
        let outcome = loop {
            match read_frame(&mut s) {
                Ok(Some(f)) => received.push(f),
                Ok(None) => break Ok(()),
                Err(e) => match e {
                    ados_proto::FrameError::Io(io)
                        if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
                    {
                        break Err(format!("connection {i}: server neither answered nor closed"));
                    }
                    _ => break Ok(()),
                },
            }
        };
        if let Err(e) = outcome {
            tally.fail(e);
        }
        for f in received {
            tally.expect(f.opcode == Opcode::Response && decode_response(&f.body).is_ok(), || {
                format!("connection {i}: malformed reply {f:?}")
            });
        }
        tally.cases += 1;
    }
    let mut client = ados_proto::Client::connect(addr)?;
    let alive = (|| {
        let p = client.create_pool("alive", 8 * MIB)?;
        client.put(p, b"k", b"v")?;
        client.get(p, b"k")
    })();
    tally.expect(matches!(&alive, Ok(v) if v == b"v"), || format!("server unusable after fuzzing: {alive:?}"));
    h.shutdown();
    tally.seconds = start.elapsed().as_secs_f64();
    Ok(tally)
}

fn replica_shard(id: u16) -> Result<ShardHandle, BenchError> {
    let mut opts = toml::Table::new();
    opts.insert("chunk_mib".into(), 1.into());
    opts.insert("quantum_records".into(), 16.into());
    opts.insert("retention_count".into(), 3.into());
    let mut c = ShardConfig::in_memory(id).with_plugin("cdp", opts);
    c.endpoint = Some("127.0.0.1:0".into());
    c.secondaries = 0;
    Ok(ShardHandle::start(&c, Arc::new(PluginRegistry::builtin()))?)
}

/// Three replicas fed by one writer: pool digests agree after every
/// acknowledged update, and stopping a replica stalls the next update.
pub fn replication(seed: u64, updates: u64) -> Result<Tally, BenchError> {
    let start = Instant::now();
    let mut tally = Tally::default();
    let mut shards = (0..3).map(replica_shard).collect::<Result<Vec<_>, _>>()?;
    let replicas = shards
        .iter()
        .map(|h| {
            let addr = h.addr().ok_or_else(|| BenchError::Other("no endpoint".into()))?;
            let mut client = ados_proto::Client::connect(addr)?;
            client.set_timeout(Some(Duration::from_secs(30)));
            let pool = client.create_pool("r", 64 * MIB)?;
            Ok(Replica { client, pool })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    let mut set = ReplicaSet::new(replicas);
    let mut rng = rng_for(seed, 2);
    let history = random_history(&mut rng, updates as usize, 4096, (1, 100));
    let digests = |shards: &[ShardHandle]| -> Vec<Option<[u8; 32]>> {
        shards.iter().map(|h| h.inspect(|rt| rt.pool_digest("r").ok()).flatten()).collect()
    };
    for (i, &(ts, v, len, m)) in history.iter().enumerate() {
        let tag: &[u8] = if i % 3 == 0 { b"a" } else { b"b" };
        let (body, flags, size) =
            invocation(&CdpRequest::Update { virtual_offset: v, length: len, managed_offset: m, timestamp: ts });
        let resps = set.invoke(tag, &body, flags, size)?;
        tally.expect(resps.iter().all(|r| r.is_ok()) && resps.windows(2).all(|w| w[0] == w[1]), || {
            format!("update {i}: replica responses differ: {resps:?}")
        });
        let d = digests(&shards);
        tally.expect(d[0].is_some() && d.windows(2).all(|w| w[0] == w[1]), || format!("digests diverged after update {i}"));
        tally.cases += 1;
    }
    let acked = set.acknowledged();
    shards.pop().expect("three shards").shutdown();
    let last = history.last().map_or(0, |h| h.0);
    let (body, flags, size) = invocation(&CdpRequest::Update { virtual_offset: 0, length: 1, managed_offset: 1, timestamp: last + 1 });
    let stalled = set.invoke(b"a", &body, flags, size);
    tally.expect(matches!(stalled, Err(ReplicationError::ReplicaUnavailable { .. })), || {
        format!("update after a replica stopped returned {stalled:?}")
    });
    let again = set.invoke(b"a", &body, flags, size);
    tally.expect(matches!(again, Err(ReplicationError::Stalled(_))), || format!("writer kept going: {again:?}"));
    tally.expect(set.acknowledged() == acked, || "acknowledged count moved after the stall".into());
    tally.seconds = start.elapsed().as_secs_f64();
    Ok(tally)
}
