//! The CDP engine as an ADO plugin, plus the request codec clients use to
//! talk to it. The target key is the volume tag and its value (created on
//! demand, [`VOLUME_ROOT_BYTES`] long) is the volume root.
//!
//! Requests start with a tag byte; all integers are little-endian:
//!
//! ```text
//! 1 UPDATE     virtual u64, length u64, managed u64, timestamp u64
//! 2 QUERY      t u64, kind u8 (0 full, 1 range), virtual u64, length u64
//! 3 TRIM       now u64
//! 4 CONFIGURE  quantum_capacity u64, retention_count u64, retention_age_ns u64
//! 5 STATS
//! 6 DIGEST
//! ```
//!
//! Responses: UPDATE returns the sequence (u64) and a sealed flag (u8);
//! QUERY returns count u64 then `{virtual, length, managed}` u64 triples;
//! TRIM returns the number of quanta removed (u64); CONFIGURE returns
//! nothing; STATS returns six u64 in [`VolumeStats`] field order; DIGEST
//! returns 32 bytes. Failures surface as plugin errors carrying the
//! `STATUS_*` codes below.

use std::sync::Arc;

use parking_lot::Mutex;

use super::engine::{is_volume_root, CdpEngine, VolumeStats, VOLUME_ROOT_BYTES};
use super::heap::{HEAP_KEY, HEAP_PAIR_BYTES};
use super::local::DEFAULT_CHUNK;
use super::{BlockMapping, CdpError, MapEntry, QueryRange, Retention, VolumeConfig, MIB};
use crate::ado::{self, AdoError, AdoPlugin, AdoServices, BackgroundJob, PluginOptions, WorkRequest};
use crate::pmem::PersistentRegion;
use crate::store::StoreError;

pub const PLUGIN_ID: &str = "cdp";

pub const STATUS_VOLUME_NOT_FOUND: i32 = -10;
pub const STATUS_HISTORY_TRIMMED: i32 = -11;
pub const STATUS_ORDERING: i32 = -12;
pub const STATUS_INVALID: i32 = -13;
pub const STATUS_CORRUPT: i32 = -14;
pub const STATUS_NO_MEMORY: i32 = -15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdpRequest {
    Update { virtual_offset: u64, length: u64, managed_offset: u64, timestamp: u64 },
    Query { t: u64, range: QueryRange },
    Trim { now: u64 },
    Configure(VolumeConfig),
    Stats,
    Digest,
}

fn put(out: &mut Vec<u8>, words: &[u64]) {
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn u8(&mut self) -> Result<u8, CdpError> {
        let (&b, rest) = self.0.split_first().ok_or_else(|| CdpError::Request("truncated".into()))?;
        self.0 = rest;
        Ok(b)
    }

    fn u64(&mut self) -> Result<u64, CdpError> {
        if self.0.len() < 8 {
            return Err(CdpError::Request("truncated".into()));
        }
        let (w, rest) = self.0.split_at(8);
        self.0 = rest;
        Ok(u64::from_le_bytes(w.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), CdpError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(CdpError::Request(format!("{} trailing bytes", self.0.len())))
        }
    }
}

impl CdpRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40);
        match *self {
            CdpRequest::Update { virtual_offset, length, managed_offset, timestamp } => {
                out.push(1);
                put(&mut out, &[virtual_offset, length, managed_offset, timestamp]);
            }
            CdpRequest::Query { t, range } => {
                out.push(2);
                put(&mut out, &[t]);
                match range {
                    QueryRange::Full => {
                        out.push(0);
                        put(&mut out, &[0, 0]);
                    }
                    QueryRange::Blocks { virtual_offset, length } => {
                        out.push(1);
                        put(&mut out, &[virtual_offset, length]);
                    }
                }
            }
            CdpRequest::Trim { now } => {
                out.push(3);
                put(&mut out, &[now]);
            }
            CdpRequest::Configure(c) => {
                out.push(4);
                put(&mut out, &[c.quantum_capacity, c.retention.count, c.retention.age_ns]);
            }
            CdpRequest::Stats => out.push(5),
            CdpRequest::Digest => out.push(6),
        }
        out
    }

    pub fn decode(b: &[u8]) -> Result<CdpRequest, CdpError> {
        let mut r = Reader(b);
        let req = match r.u8()? {
            1 => CdpRequest::Update {
                virtual_offset: r.u64()?,
                length: r.u64()?,
                managed_offset: r.u64()?,
                timestamp: r.u64()?,
            },
            2 => {
                let t = r.u64()?;
                let kind = r.u8()?;
                let (v, l) = (r.u64()?, r.u64()?);
                let range = match kind {
                    0 => QueryRange::Full,
                    1 => QueryRange::Blocks { virtual_offset: v, length: l },
                    k => return Err(CdpError::Request(format!("range kind {k}"))),
                };
                CdpRequest::Query { t, range }
            }
            3 => CdpRequest::Trim { now: r.u64()? },
            4 => CdpRequest::Configure(VolumeConfig {
                quantum_capacity: r.u64()?,
                retention: Retention { count: r.u64()?, age_ns: r.u64()? },
            }),
            5 => CdpRequest::Stats,
            6 => CdpRequest::Digest,
            t => return Err(CdpError::Request(format!("request tag {t}"))),
        };
        r.finish()?;
        Ok(req)
    }
}

pub fn encode_mapping(m: &[MapEntry]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 24 * m.len());
    put(&mut out, &[m.len() as u64]);
    for e in m {
        put(&mut out, &[e.virtual_offset, e.length, e.managed_offset]);
    }
    out
}

pub fn decode_mapping(b: &[u8]) -> Result<BlockMapping, CdpError> {
    let mut r = Reader(b);
    let n = r.u64()?;
    if n.checked_mul(24) != Some(b.len() as u64 - 8) {
        return Err(CdpError::Request(format!("mapping of {n} entries in {} bytes", b.len())));
    }
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        out.push(MapEntry { virtual_offset: r.u64()?, length: r.u64()?, managed_offset: r.u64()? });
    }
    Ok(out)
}

pub fn encode_stats(s: &VolumeStats) -> Vec<u8> {
    let mut out = Vec::with_capacity(48);
    put(&mut out, &[s.quanta, s.sealed, s.summarized, s.records, s.trimmed, s.open_count]);
    out
}

pub fn decode_stats(b: &[u8]) -> Result<VolumeStats, CdpError> {
    let mut r = Reader(b);
    let s = VolumeStats {
        quanta: r.u64()?,
        sealed: r.u64()?,
        summarized: r.u64()?,
        records: r.u64()?,
        trimmed: r.u64()?,
        open_count: r.u64()?,
    };
    r.finish()?;
    Ok(s)
}

/// Decodes an UPDATE response into (sequence, sealed).
pub fn decode_update(b: &[u8]) -> Result<(u64, bool), CdpError> {
    let mut r = Reader(b);
    let out = (r.u64()?, r.u8()? != 0);
    r.finish()?;
    Ok(out)
}

pub fn decode_u64(b: &[u8]) -> Result<u64, CdpError> {
    let mut r = Reader(b);
    let v = r.u64()?;
    r.finish()?;
    Ok(v)
}

/// Maps an engine error to a plugin status. HistoryTrimmed and
/// OrderingViolation carry their fields in the message as `name=value`.
pub fn to_ado(e: CdpError) -> AdoError {
    let status = match e {
        CdpError::Store(StoreError::OutOfMemory) | CdpError::NeedMemory(_) => STATUS_NO_MEMORY,
        CdpError::Store(s) => return AdoError::Store(s),
        CdpError::VolumeNotFound => STATUS_VOLUME_NOT_FOUND,
        CdpError::HistoryTrimmed { horizon } => {
            return AdoError::plugin(STATUS_HISTORY_TRIMMED, format!("horizon={horizon}"));
        }
        CdpError::OrderingViolation { last, got } => {
            return AdoError::plugin(STATUS_ORDERING, format!("last={last} got={got}"));
        }
        CdpError::InvalidArgument(_) | CdpError::Request(_) => STATUS_INVALID,
        CdpError::Corrupt(_) => STATUS_CORRUPT,
    };
    AdoError::plugin(status, e.to_string())
}

/// Inverse of [`to_ado`] for clients decoding a plugin failure.
pub fn from_status(status: i32, message: &str) -> CdpError {
    match status {
        STATUS_VOLUME_NOT_FOUND => CdpError::VolumeNotFound,
        STATUS_HISTORY_TRIMMED => CdpError::HistoryTrimmed {
            horizon: message.strip_prefix("horizon=").and_then(|h| h.parse().ok()).unwrap_or(0),
        },
        STATUS_ORDERING => {
            let field = |k: &str| {
                message.split(' ').find_map(|f| f.strip_prefix(k)).and_then(|v| v.parse().ok()).unwrap_or(0)
            };
            CdpError::OrderingViolation { last: field("last="), got: field("got=") }
        }
        STATUS_NO_MEMORY => CdpError::Store(StoreError::OutOfMemory),
        STATUS_INVALID => CdpError::InvalidArgument(message.to_string()),
        _ => CdpError::Corrupt(format!("status {status}: {message}")),
    }
}

fn from_ado(e: AdoError) -> CdpError {
    match e {
        AdoError::Store(s) => CdpError::Store(s),
        other => CdpError::Request(other.to_string()),
    }
}

/// Runs `op` under the engine and pool locks, growing the plugin heap by
/// callback whenever it reports [`CdpError::NeedMemory`].
fn with_memory<T>(
    engine: &Mutex<CdpEngine>,
    ctx: &mut dyn AdoServices,
    chunk: u64,
    mut op: impl FnMut(&mut CdpEngine, &mut PersistentRegion) -> Result<T, CdpError>,
) -> Result<T, CdpError> {
    loop {
        let res = {
            let mut e = engine.lock();
            let mut pool = ctx.memory();
            op(&mut e, pool.region_mut())
        };
        match res {
            Err(CdpError::NeedMemory(n)) => grow(engine, ctx, chunk, n)?,
            r => return r,
        }
    }
}

fn grow(engine: &Mutex<CdpEngine>, ctx: &mut dyn AdoServices, chunk: u64, need: u64) -> Result<(), CdpError> {
    let (pair, _) = ctx.create_key(HEAP_KEY, HEAP_PAIR_BYTES).map_err(from_ado)?;
    let size = chunk.max(need.next_multiple_of(MIB));
    let off = ctx.allocate_pool_memory(size, 64).map_err(from_ado)?;
    let mut e = engine.lock();
    let mut pool = ctx.memory();
    e.add_chunk(pool.region_mut(), pair.offset, off, size)
}

/// Summarizes every sealed quantum of a volume and applies retention.
/// Summaries are computed without holding either lock.
fn maintain(engine: &Mutex<CdpEngine>, ctx: &mut dyn AdoServices, chunk: u64, root: u64) -> Result<(), CdpError> {
    loop {
        let job = {
            let mut e = engine.lock();
            let pool = ctx.memory();
            e.prepare_summary(pool.region(), root)?
        };
        let Some(job) = job else { break };
        let mut computed = Some(job.compute());
        with_memory(engine, ctx, chunk, |e, r| match computed.take() {
            Some(c) => e.commit_summary(r, c),
            None => e.summarize_all(r, root).map(|_| ()),
        })?;
    }
    let mut e = engine.lock();
    let mut pool = ctx.memory();
    let now = e.last_timestamp(pool.region(), root)?;
    e.trim(pool.region_mut(), root, now)?;
    Ok(())
}

pub struct CdpPlugin {
    engine: Arc<Mutex<CdpEngine>>,
    chunk: u64,
    default_config: VolumeConfig,
    background: Vec<BackgroundJob>,
}

fn opt_u64(opts: &PluginOptions, key: &str, default: u64) -> ado::Result<u64> {
    match opts.get(key) {
        None => Ok(default),
        Some(toml::Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
        Some(v) => Err(AdoError::PluginLoad(format!("cdp option {key} = {v}"))),
    }
}

impl CdpPlugin {
    /// Options: `chunk_mib`, `quantum_records`, `retention_count`,
    /// `retention_age_ns`.
    pub fn from_options(opts: &PluginOptions) -> ado::Result<CdpPlugin> {
        let d = VolumeConfig::default();
        let config = VolumeConfig {
            quantum_capacity: opt_u64(opts, "quantum_records", d.quantum_capacity)?,
            retention: Retention {
                count: opt_u64(opts, "retention_count", d.retention.count)?,
                age_ns: opt_u64(opts, "retention_age_ns", d.retention.age_ns)?,
            },
        };
        if config.quantum_capacity == 0 {
            return Err(AdoError::PluginLoad("quantum_records must be positive".into()));
        }
        let chunk = opt_u64(opts, "chunk_mib", DEFAULT_CHUNK / MIB)?.max(1) * MIB;
        Ok(CdpPlugin { engine: Arc::new(Mutex::new(CdpEngine::new())), chunk, default_config: config, background: Vec::new() })
    }

    fn schedule(&mut self, root: u64) {
        let engine = self.engine.clone();
        let chunk = self.chunk;
        self.background.push(Box::new(move |ctx| {
            if let Err(e) = maintain(&engine, ctx, chunk, root) {
                log::warn!("cdp maintenance of volume {root:#x} failed: {e}");
            }
        }));
    }

    fn serve(&mut self, ctx: &mut dyn AdoServices, work: &WorkRequest) -> Result<Vec<u8>, CdpError> {
        let req = CdpRequest::decode(&work.request)?;
        let Some(value) = work.value else {
            return Err(CdpError::InvalidArgument("CDP work needs a volume key".into()));
        };
        if value.length != VOLUME_ROOT_BYTES {
            return Err(CdpError::InvalidArgument(format!("volume root of {} bytes", value.length)));
        }
        super::local::check_tag(&work.key)?;
        let root = value.offset;
        let initialized = is_volume_root(ctx.memory().region(), root);
        let engine = self.engine.clone();
        let chunk = self.chunk;
        if !initialized {
            let config = match req {
                CdpRequest::Configure(c) => c,
                CdpRequest::Update { .. } => self.default_config,
                _ => return Err(CdpError::VolumeNotFound),
            };
            with_memory(&engine, ctx, chunk, |e, r| e.init_volume(r, root, config))?;
            if let CdpRequest::Configure(_) = req {
                return Ok(Vec::new());
            }
        }
        match req {
            CdpRequest::Update { virtual_offset, length, managed_offset, timestamp } => {
                let mut out =
                    with_memory(&engine, ctx, chunk, |e, r| e.update(r, root, virtual_offset, length, managed_offset, timestamp))?;
                if out.sealed.is_none() {
                    out.sealed = with_memory(&engine, ctx, chunk, |e, r| e.seal_if_full(r, root))?;
                }
                if out.sealed.is_some() {
                    self.schedule(root);
                }
                let mut resp = Vec::with_capacity(9);
                put(&mut resp, &[out.sequence]);
                resp.push(out.sealed.is_some() as u8);
                Ok(resp)
            }
            CdpRequest::Query { t, range } => {
                let mut e = engine.lock();
                let pool = ctx.memory();
                Ok(encode_mapping(&e.query(pool.region(), root, t, range)?))
            }
            CdpRequest::Trim { now } => {
                with_memory(&engine, ctx, chunk, |e, r| e.summarize_all(r, root))?;
                let mut e = engine.lock();
                let mut pool = ctx.memory();
                Ok(e.trim(pool.region_mut(), root, now)?.to_le_bytes().to_vec())
            }
            CdpRequest::Configure(c) => {
                let mut e = engine.lock();
                let mut pool = ctx.memory();
                e.configure(pool.region_mut(), root, c)?;
                Ok(Vec::new())
            }
            CdpRequest::Stats => {
                let e = engine.lock();
                let pool = ctx.memory();
                Ok(encode_stats(&e.stats(pool.region(), root)?))
            }
            CdpRequest::Digest => {
                let e = engine.lock();
                let pool = ctx.memory();
                Ok(e.volume_digest(pool.region(), root)?.to_vec())
            }
        }
    }
}

impl AdoPlugin for CdpPlugin {
    fn id(&self) -> &str {
        PLUGIN_ID
    }

    /// Rebuilds the volatile heap from the chunk list and the reachable
    /// objects of every volume, then schedules maintenance for each volume
    /// so quanta sealed before a restart get summarized.
    fn attach(&mut self, ctx: &mut dyn AdoServices) -> ado::Result<()> {
        let heap = match ctx.open_key(HEAP_KEY) {
            Ok(v) => Some(v.offset),
            Err(AdoError::Store(StoreError::NotFound)) => None,
            Err(e) => return Err(e),
        };
        let refs = ctx.get_ref_vector()?;
        let roots: Vec<u64> = {
            let pool = ctx.memory();
            refs.iter()
                .filter(|e| e.value.length == VOLUME_ROOT_BYTES && is_volume_root(pool.region(), e.value.offset))
                .map(|e| e.value.offset)
                .collect()
        };
        let mut fresh = CdpEngine::new();
        {
            let mut pool = ctx.memory();
            fresh.recover(pool.region_mut(), heap, &roots).map_err(to_ado)?;
        }
        *self.engine.lock() = fresh;
        for root in roots {
            self.schedule(root);
        }
        Ok(())
    }

    fn do_work(&mut self, ctx: &mut dyn AdoServices, work: &WorkRequest, out: &mut Vec<Vec<u8>>) -> ado::Result<()> {
        let resp = self.serve(ctx, work).map_err(to_ado)?;
        out.push(resp);
        Ok(())
    }

    fn take_background(&mut self) -> Vec<BackgroundJob> {
        std::mem::take(&mut self.background)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ado::{flags, LocalAdo, PluginRegistry, PluginSpec};
    use crate::pmem::BackingKind;
    use crate::store::Pool;

    fn ado(cap: u64, retention: u64) -> LocalAdo {
        let pool = Arc::new(Mutex::new(Pool::create_in_memory("p", 64 * MIB, BackingKind::Memory).unwrap()));
        let mut spec = PluginSpec::new("cdp");
        spec.options.insert("quantum_records".into(), toml::Value::Integer(cap as i64));
        spec.options.insert("retention_count".into(), toml::Value::Integer(retention as i64));
        spec.options.insert("chunk_mib".into(), toml::Value::Integer(1));
        LocalAdo::new(pool, &PluginRegistry::builtin(), &[spec]).unwrap()
    }

    fn call(a: &mut LocalAdo, tag: &[u8], req: CdpRequest) -> ado::Result<Vec<u8>> {
        let f = if matches!(req, CdpRequest::Update { .. } | CdpRequest::Configure(_)) { flags::CREATE_IF_MISSING } else { 0 };
        Ok(a.invoke(tag, &req.encode(), f, VOLUME_ROOT_BYTES)?.remove(0))
    }

    fn upd(v: u64, l: u64, m: u64, ts: u64) -> CdpRequest {
        CdpRequest::Update { virtual_offset: v, length: l, managed_offset: m, timestamp: ts }
    }

    #[test]
    fn codec_roundtrip() {
        let reqs = [
            upd(1, 2, 3, 4),
            CdpRequest::Query { t: 9, range: QueryRange::Full },
            CdpRequest::Query { t: 9, range: QueryRange::Blocks { virtual_offset: 5, length: 6 } },
            CdpRequest::Trim { now: 77 },
            CdpRequest::Configure(VolumeConfig { quantum_capacity: 8, retention: Retention { count: 2, age_ns: 3 } }),
            CdpRequest::Stats,
            CdpRequest::Digest,
        ];
        for r in reqs {
            assert_eq!(CdpRequest::decode(&r.encode()).unwrap(), r);
        }
        assert!(CdpRequest::decode(&[9]).is_err());
        assert!(CdpRequest::decode(&[1, 0]).is_err());
        let mut long = upd(1, 2, 3, 4).encode();
        long.push(0);
        assert!(CdpRequest::decode(&long).is_err());
    }

    #[test]
    fn update_and_query_through_the_plugin() {
        let mut a = ado(4, 2);
        call(&mut a, b"vol", upd(0, 10, 0, 1)).unwrap();
        call(&mut a, b"vol", upd(5, 3, 100, 2)).unwrap();
        let m = decode_mapping(&call(&mut a, b"vol", CdpRequest::Query { t: 2, range: QueryRange::Full }).unwrap()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[1], MapEntry { virtual_offset: 5, length: 3, managed_offset: 100 });
    }

    #[test]
    fn background_maintenance_summarizes_and_trims() {
        let mut a = ado(4, 2);
        for i in 0..40 {
            let (_, sealed) = decode_update(&call(&mut a, b"vol", upd(i, 1, i, i)).unwrap()).unwrap();
            assert_eq!(sealed, i % 4 == 3);
        }
        let s = decode_stats(&call(&mut a, b"vol", CdpRequest::Stats).unwrap()).unwrap();
        assert_eq!((s.quanta, s.sealed), (3, 0));
        assert_eq!(s.trimmed, 8);
        let err = call(&mut a, b"vol", CdpRequest::Query { t: 0, range: QueryRange::Full }).unwrap_err();
        match err {
            AdoError::Plugin { status, message } => {
                assert!(matches!(from_status(status, &message), CdpError::HistoryTrimmed { horizon: 35 }));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn errors_map_to_statuses() {
        let mut a = ado(4, 2);
        let e = call(&mut a, b"none", CdpRequest::Stats).unwrap_err();
        assert!(matches!(e, AdoError::Store(StoreError::NotFound)));
        call(&mut a, b"vol", upd(0, 1, 0, 10)).unwrap();
        let e = call(&mut a, b"vol", upd(0, 1, 0, 5)).unwrap_err();
        assert!(matches!(e, AdoError::Plugin { status: STATUS_ORDERING, .. }));
        let e = a.invoke(b"vol", &[42], 0, 0).unwrap_err();
        assert!(matches!(e, AdoError::Plugin { status: STATUS_INVALID, .. }));
    }

    #[test]
    fn reattach_recovers_volumes() {
        let mut a = ado(4, 2);
        for i in 0..21 {
            call(&mut a, b"vol", upd(i, 2, i * 2, i)).unwrap();
        }
        let before = call(&mut a, b"vol", CdpRequest::Digest).unwrap();
        let pool = a.pool().clone();
        drop(a);
        let mut spec = PluginSpec::new("cdp");
        spec.options.insert("chunk_mib".into(), toml::Value::Integer(1));
        let mut a = LocalAdo::new(pool, &PluginRegistry::builtin(), &[spec]).unwrap();
        assert_eq!(call(&mut a, b"vol", CdpRequest::Digest).unwrap(), before);
        call(&mut a, b"vol", upd(3, 1, 3, 30)).unwrap();
    }
}
