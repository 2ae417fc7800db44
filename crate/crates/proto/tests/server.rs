use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use ados_core::ado::flags::CREATE_IF_MISSING;
use ados_core::ado::{AdoPlugin, AdoServices, PluginRegistry, Result as AdoResult, WorkRequest};
use ados_core::cdp::plugin::CdpRequest;
use ados_core::cdp::{CdpError, MapEntry, QueryRange};
use ados_core::store::StoreError;
use ados_proto::cdp_client::{invocation, CdpClient, CdpClientError};
use ados_proto::frame::{read_frame, Frame, Opcode, VERSION};
use ados_proto::message::{decode_response, ErrorCode, Payload, Request};
use ados_proto::replica::{Replica, ReplicaSet, ReplicationError};
use ados_proto::{Client, ShardConfig, ShardHandle};

const MIB: u64 = 1 << 20;

fn tcp_shard(id: u16, registry: PluginRegistry, plugins: &[&str]) -> ShardHandle {
    let mut c = ShardConfig::in_memory(id);
    c.endpoint = Some("127.0.0.1:0".into());
    for p in plugins {
        c = c.with_plugin(p, toml::Table::new());
    }
    ShardHandle::start(&c, Arc::new(registry)).unwrap()
}

fn client(h: &ShardHandle) -> Client {
    let mut c = Client::connect(h.addr().unwrap()).unwrap();
    c.set_timeout(Some(Duration::from_secs(10)));
    c
}

#[test]
fn kv_operations_over_tcp() {
    let h = tcp_shard(0, PluginRegistry::builtin(), &[]);
    let mut c = client(&h);
    let p = c.create_pool("p", 8 * MIB).unwrap();
    assert_eq!(c.create_pool("p", 8 * MIB).unwrap_err().code(), Some(ErrorCode::NameCollision));
    c.put(p, b"k", b"hello").unwrap();
    assert_eq!(c.get(p, b"k").unwrap(), b"hello");
    c.resize(p, b"k", 8).unwrap();
    assert_eq!(&c.get(p, b"k").unwrap()[..5], b"hello");
    c.erase(p, b"k").unwrap();
    assert_eq!(c.get(p, b"k").unwrap_err().code(), Some(ErrorCode::NotFound));
    assert_eq!(c.open_pool("missing").unwrap_err().code(), Some(ErrorCode::PoolNotFound));
    assert_eq!(c.get(p ^ 0x77, b"k").unwrap_err().code(), Some(ErrorCode::InvalidHandle));

    // A pool in use cannot be deleted; after close it can.
    assert_eq!(c.delete_pool("p").unwrap_err().code(), Some(ErrorCode::Busy));
    c.close_pool(p).unwrap();
    c.delete_pool("p").unwrap();
    assert_eq!(c.open_pool("p").unwrap_err().code(), Some(ErrorCode::PoolNotFound));

    let stats = c.stats();
    assert_eq!(stats.round_trips, 14);
    assert!(stats.bytes_sent > 0 && stats.bytes_received > 0);
}

#[test]
fn flags_on_plain_operations_are_rejected() {
    let h = tcp_shard(0, PluginRegistry::builtin(), &[]);
    let mut c = client(&h);
    let p = c.create_pool("p", 8 * MIB).unwrap();
    let e = c.call(&Request::Get { pool: p, key: b"k".to_vec() }, 1).unwrap_err();
    assert_eq!(e.code(), Some(ErrorCode::Protocol));
}

#[test]
fn echo_and_kvtest_invocations() {
    let h = tcp_shard(0, PluginRegistry::builtin(), &["kvtest", "echo"]);
    let mut c = client(&h);
    let p = c.create_pool("p", 8 * MIB).unwrap();

    // Missing key without CREATE_IF_MISSING.
    assert_eq!(c.invoke_ado(p, b"k", b"get", 0, 0).unwrap_err().code(), Some(ErrorCode::NotFound));

    // Layers run in order: kvtest first, then echo.
    let out = c.invoke_ado(p, b"k", b"info", CREATE_IF_MISSING, 16).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0][0], 1, "new root");
    assert_eq!(u64::from_le_bytes(out[0][1..9].try_into().unwrap()), 16);
    assert_eq!(out[1], b"info");

    let out = c.invoke_ado(p, b"k", b"info", CREATE_IF_MISSING, 16).unwrap();
    assert_eq!(out[0][0], 0, "existing root");

    c.invoke_ado(p, b"k", b"set:abc", 0, 0).unwrap();
    assert_eq!(&c.get(p, b"k").unwrap()[..3], b"abc");

    let out = c.invoke_put_ado(p, b"j", b"xyz", b"get", 0).unwrap();
    assert_eq!(out[0], b"xyz");

    let e = c.invoke_ado(p, b"k", b"bogus", 0, 0).unwrap_err();
    assert_eq!(e.plugin_status(), Some(-2));
}

#[test]
fn plugin_panic_is_reported_and_rolled_back() {
    let h = tcp_shard(0, PluginRegistry::builtin(), &["kvtest"]);
    let mut c = client(&h);
    let p = c.create_pool("p", 8 * MIB).unwrap();
    c.put(p, b"k", b"original").unwrap();
    let e = c.invoke_ado(p, b"k", b"panic", 0, 0).unwrap_err();
    assert_eq!(e.code(), Some(ErrorCode::PluginPanicked));
    assert_eq!(c.get(p, b"k").unwrap(), b"original");
    // The restarted worker serves further work.
    assert_eq!(c.invoke_ado(p, b"k", b"get", 0, 0).unwrap()[0], b"original");
    assert_eq!(h.inspect(|rt| rt.check_pool("p")).unwrap(), Ok(()));
}

/// Increments a counter stored in the value after a delay taken from the
/// request, responding with the new count.
struct Slow;

impl AdoPlugin for Slow {
    fn id(&self) -> &str {
        "slow"
    }

    fn do_work(&mut self, ctx: &mut dyn AdoServices, work: &WorkRequest, out: &mut Vec<Vec<u8>>) -> AdoResult<()> {
        let v = work.value.expect("keyed");
        let ms = u64::from_le_bytes(work.request[..8].try_into().unwrap());
        let n = {
            let pool = ctx.memory();
            u64::from_le_bytes(pool.read_value(v)?[..8].try_into().unwrap())
        };
        thread::sleep(Duration::from_millis(ms));
        let mut pool = ctx.memory();
        let r = pool.region_mut();
        r.write(v.offset, &(n + 1).to_le_bytes()).map_err(StoreError::from)?;
        r.persist(v.offset, 8).map_err(StoreError::from)?;
        out.push((n + 1).to_le_bytes().to_vec());
        Ok(())
    }
}

fn slow_registry() -> PluginRegistry {
    let mut r = PluginRegistry::builtin();
    r.register("slow", |_| Ok(Box::new(Slow)));
    r
}

#[test]
fn invocations_on_a_locked_key_queue_in_order() {
    let h = tcp_shard(0, slow_registry(), &["slow"]);
    let mut setup = client(&h);
    let p = setup.create_pool("p", 8 * MIB).unwrap();
    setup.put(p, b"k", &0u64.to_le_bytes()).unwrap();

    let addr = h.addr().unwrap();
    let workers: Vec<_> = (0..3)
        .map(|_| {
            thread::spawn(move || {
                let mut c = Client::connect(addr).unwrap();
                c.set_timeout(Some(Duration::from_secs(20)));
                let p = c.open_pool("p").unwrap();
                // Pipeline several invocations on the same key.
                let ids: Vec<u64> = (0..5)
                    .map(|_| {
                        let r = Request::InvokeAdo { pool: p, key: b"k".to_vec(), request: 2u64.to_le_bytes().to_vec(), value_size: 0 };
                        c.send(&r, 0).unwrap()
                    })
                    .collect();
                let mut seen = Vec::new();
                for id in ids {
                    let (got, resp) = c.recv().unwrap();
                    assert_eq!(got, id, "responses arrive in request order per connection");
                    match resp.unwrap() {
                        Payload::Buffers(b) => seen.push(u64::from_le_bytes(b[0][..8].try_into().unwrap())),
                        other => panic!("{other:?}"),
                    }
                }
                seen
            })
        })
        .collect();
    let mut all: Vec<u64> = workers.into_iter().flat_map(|w| w.join().unwrap()).collect();
    all.sort();
    assert_eq!(all, (1..=15).collect::<Vec<_>>(), "every increment serialized on the pair lock");
    assert_eq!(setup.get(p, b"k").unwrap(), 15u64.to_le_bytes());
}

#[test]
fn plain_operations_on_a_locked_key_fail() {
    let h = tcp_shard(0, slow_registry(), &["slow"]);
    let mut a = client(&h);
    let p = a.create_pool("p", 8 * MIB).unwrap();
    a.put(p, b"k", &0u64.to_le_bytes()).unwrap();
    let r = Request::InvokeAdo { pool: p, key: b"k".to_vec(), request: 300u64.to_le_bytes().to_vec(), value_size: 0 };
    let id = a.send(&r, 0).unwrap();

    let mut b = client(&h);
    let pb = b.open_pool("p").unwrap();
    thread::sleep(Duration::from_millis(50));
    assert_eq!(b.put(pb, b"k", b"x").unwrap_err().code(), Some(ErrorCode::LockedByAdo));
    assert_eq!(b.get(pb, b"k").unwrap_err().code(), Some(ErrorCode::LockedByAdo));
    // Other keys are unaffected.
    b.put(pb, b"other", b"x").unwrap();

    let (got, resp) = a.recv().unwrap();
    assert_eq!(got, id);
    resp.unwrap();
    assert_eq!(b.get(pb, b"k").unwrap(), 1u64.to_le_bytes());
}

#[test]
fn handles_from_another_shard_are_refused() {
    let s0 = tcp_shard(0, PluginRegistry::builtin(), &[]);
    let s1 = tcp_shard(1, PluginRegistry::builtin(), &[]);
    let mut c0 = client(&s0);
    let mut c1 = client(&s1);
    let p0 = c0.create_pool("p", 8 * MIB).unwrap();
    c0.put(p0, b"k", b"v").unwrap();
    let e = c1.get(p0, b"k").unwrap_err();
    assert_eq!(e.code(), Some(ErrorCode::WrongShard));
    match e {
        ados_proto::ClientError::Server(w) => assert_eq!(w.detail, 1, "owner 0, receiving shard 1"),
        other => panic!("{other:?}"),
    }
}

fn raw_exchange(addr: std::net::SocketAddr, bytes: &[u8]) -> TcpStream {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    s.write_all(bytes).unwrap();
    s
}

fn expect_protocol_error(s: &mut TcpStream, rid: u64) {
    let f = read_frame(s).unwrap().expect("response frame");
    assert_eq!(f.opcode, Opcode::Response);
    assert_eq!(f.request_id, rid);
    let e = decode_response(&f.body).unwrap().unwrap_err();
    assert_eq!(e.code, ErrorCode::Protocol);
}

fn header(len: u32, version: u8, opcode: u8, flags: u16, rid: u64) -> Vec<u8> {
    let mut b = len.to_le_bytes().to_vec();
    b.push(version);
    b.push(opcode);
    b.extend_from_slice(&flags.to_le_bytes());
    b.extend_from_slice(&rid.to_le_bytes());
    b
}

#[test]
fn malformed_frames_get_errors_or_disconnects() {
    let h = tcp_shard(0, PluginRegistry::builtin(), &[]);
    let addr = h.addr().unwrap();

    // Wrong version: error response, connection stays usable.
    let mut s = raw_exchange(addr, &header(12, 9, Opcode::Get as u8, 0, 41));
    expect_protocol_error(&mut s, 41);
    s.write_all(&Frame::new(Opcode::OpenPool, 0, 42, Request::OpenPool { name: "x".into() }.encode_body()).encode()).unwrap();
    let f = read_frame(&mut s).unwrap().unwrap();
    assert_eq!(f.request_id, 42);
    assert_eq!(decode_response(&f.body).unwrap().unwrap_err().code, ErrorCode::PoolNotFound);

    // Unknown opcode.
    let mut s = raw_exchange(addr, &header(12, VERSION, 200, 0, 7));
    expect_protocol_error(&mut s, 7);

    // Truncated body.
    let mut s = raw_exchange(addr, &header(14, VERSION, Opcode::Get as u8, 0, 8).into_iter().chain([1, 2]).collect::<Vec<_>>());
    expect_protocol_error(&mut s, 8);

    // Client sending a response frame.
    let mut s = raw_exchange(addr, &header(12, VERSION, Opcode::Response as u8, 0, 9));
    expect_protocol_error(&mut s, 9);

    // Impossible lengths close the connection.
    for len in [0u32, 11, u32::MAX] {
        let mut s = raw_exchange(addr, &len.to_le_bytes());
        let mut buf = [0u8; 1];
        assert_eq!(s.read(&mut buf).unwrap(), 0, "length {len} should disconnect");
    }

    // Half a frame then hang up.
    drop(raw_exchange(addr, &header(100, VERSION, Opcode::Put as u8, 0, 1)[..10]));

    // Random garbage.
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.gen_range(1..64);
        let junk: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        let mut s = raw_exchange(addr, &junk);
        s.shutdown(std::net::Shutdown::Write).unwrap();
        let mut sink = Vec::new();
        let _ = s.read_to_end(&mut sink);
    }

    // The server still works.
    let mut c = client(&h);
    let p = c.create_pool("alive", 8 * MIB).unwrap();
    c.put(p, b"k", b"v").unwrap();
    assert_eq!(c.get(p, b"k").unwrap(), b"v");
}

fn cdp_shard(id: u16) -> ShardHandle {
    let mut opts = toml::Table::new();
    opts.insert("chunk_mib".into(), 1.into());
    opts.insert("quantum_records".into(), 8.into());
    opts.insert("retention_count".into(), 3.into());
    let mut c = ShardConfig::in_memory(id).with_plugin("cdp", opts);
    c.endpoint = Some("127.0.0.1:0".into());
    c.secondaries = 0;
    ShardHandle::start(&c, Arc::new(PluginRegistry::builtin())).unwrap()
}

#[test]
fn cdp_over_the_wire() {
    let h = cdp_shard(0);
    let mut c = client(&h);
    let p = c.create_pool("cdp", 32 * MIB).unwrap();
    let mut cdp = CdpClient { client: &mut c, pool: p };

    assert!(matches!(cdp.query(b"vol", 1, QueryRange::Full), Err(CdpClientError::Cdp(CdpError::VolumeNotFound))));
    cdp.update(b"vol", 0, 10, 100, 1).unwrap();
    cdp.update(b"vol", 5, 2, 200, 2).unwrap();
    let m = cdp.query(b"vol", 2, QueryRange::Full).unwrap();
    assert_eq!(
        m,
        vec![
            MapEntry { virtual_offset: 0, length: 5, managed_offset: 100 },
            MapEntry { virtual_offset: 5, length: 2, managed_offset: 200 },
            MapEntry { virtual_offset: 7, length: 3, managed_offset: 107 },
        ]
    );
    assert!(matches!(
        cdp.update(b"vol", 0, 1, 1, 1),
        Err(CdpClientError::Cdp(CdpError::OrderingViolation { last: 2, got: 1 }))
    ));

    for ts in 3..60 {
        cdp.update(b"vol", ts % 20, 1, 1000 + ts, ts).unwrap();
    }
    assert!(h.wait_idle(Duration::from_secs(10)));
    let st = cdp.stats(b"vol").unwrap();
    assert!(st.quanta <= 4, "{st:?}");
    assert!(matches!(cdp.query(b"vol", 1, QueryRange::Full), Err(CdpClientError::Cdp(CdpError::HistoryTrimmed { .. }))));
    // One round trip per call.
    assert_eq!(c.stats().round_trips, 65);
}

fn replica_set(shards: &[ShardHandle]) -> ReplicaSet {
    ReplicaSet::new(
        shards
            .iter()
            .map(|h| {
                let mut c = client(h);
                let pool = c.create_pool("r", 32 * MIB).unwrap();
                Replica { client: c, pool }
            })
            .collect(),
    )
}

fn digests(shards: &[ShardHandle]) -> Vec<[u8; 32]> {
    shards.iter().map(|h| h.inspect(|rt| rt.pool_digest("r").unwrap()).unwrap()).collect()
}

#[test]
fn replicas_stay_identical_at_every_acknowledged_prefix() {
    use rand::{Rng, SeedableRng};
    let shards: Vec<_> = (0..3).map(cdp_shard).collect();
    let mut set = replica_set(&shards);
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    let mut clock = 0u64;
    for i in 0..120 {
        clock += rng.gen_range(1..5);
        let tag: &[u8] = if i % 3 == 0 { b"a" } else { b"b" };
        let req = CdpRequest::Update {
            virtual_offset: rng.gen_range(0..4096),
            length: rng.gen_range(1..100),
            managed_offset: rng.gen(),
            timestamp: clock,
        };
        let (body, flags, size) = invocation(&req);
        let resps = set.invoke(tag, &body, flags, size).unwrap();
        assert!(resps.iter().all(|r| r.is_ok()));
        assert_eq!(resps[0], resps[1]);
        assert_eq!(resps[0], resps[2]);
        let d = digests(&shards);
        assert!(d[0] == d[1] && d[1] == d[2], "digests diverged after update {i}");
    }
    assert_eq!(set.acknowledged(), 120);
}

#[test]
fn a_stopped_replica_stalls_the_writer() {
    let mut shards: Vec<_> = (0..3).map(cdp_shard).collect();
    let mut set = replica_set(&shards);
    let upd = |ts: u64| invocation(&CdpRequest::Update { virtual_offset: ts, length: 1, managed_offset: ts, timestamp: ts });
    for ts in 1..=5 {
        let (b, f, s) = upd(ts);
        set.invoke(b"v", &b, f, s).unwrap();
    }
    shards.pop().unwrap().shutdown();
    let (b, f, s) = upd(6);
    match set.invoke(b"v", &b, f, s) {
        Err(ReplicationError::ReplicaUnavailable { failures }) => {
            assert_eq!(failures.len(), 1);
            assert_eq!(failures[0].0, 2);
        }
        other => panic!("expected a stall, got {other:?}"),
    }
    let (b, f, s) = upd(7);
    assert!(matches!(set.invoke(b"v", &b, f, s), Err(ReplicationError::Stalled(2))));
    assert_eq!(set.acknowledged(), 5);
}

#[test]
fn local_transport_matches_tcp() {
    let h = tcp_shard(0, PluginRegistry::builtin(), &["echo"]);
    let mut local = Client::new(h.connect_local());
    let mut tcp = client(&h);
    let p = local.create_pool("p", 8 * MIB).unwrap();
    let q = tcp.open_pool("p").unwrap();
    local.put(p, b"k", b"v").unwrap();
    assert_eq!(tcp.get(q, b"k").unwrap(), b"v");
    assert_eq!(local.invoke_ado(p, b"", b"hi", 0, 0).unwrap(), vec![b"hi".to_vec()]);
}

#[test]
fn responses_survive_a_client_half_close() {
    let h = tcp_shard(0, PluginRegistry::builtin(), &[]);
    let mut s = raw_exchange(h.addr().unwrap(), &Frame::new(Opcode::OpenPool, 0, 3, Request::OpenPool { name: "none".into() }.encode_body()).encode());
    s.shutdown(std::net::Shutdown::Write).unwrap();
    let f = read_frame(&mut s).unwrap().expect("response before close");
    assert_eq!(f.request_id, 3);
    assert_eq!(decode_response(&f.body).unwrap().unwrap_err().code, ErrorCode::PoolNotFound);
    assert!(read_frame(&mut s).unwrap().is_none());
}
