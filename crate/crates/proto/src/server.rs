//! Shard server. Each shard runs one request thread that owns its pools
//! and serves requests run-to-completion; ADO work goes to per-pool
//! workers and their callbacks come back to the same thread. Connections
//! are served by a reader and a writer thread each, which preserves
//! per-connection FIFO order of request handoff.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use ados_core::ado::{self, prepare_work, AdoWorker, PluginRegistry, PluginSpec, WorkItem, WorkerEvent};
use ados_core::pmem::{BackingKind, SyncMode};
use ados_core::store::{PoolHandle, Shard, StoreError};
use crossbeam_channel::{select, unbounded, Receiver, Sender};
use serde::Deserialize;

use crate::frame::{read_frame, Frame, Opcode};
use crate::message::{encode_response, ErrorCode, Payload, Request, Response, WireError};
use crate::transport::LocalTransport;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginConfig {
    pub id: String,
    #[serde(default)]
    pub options: toml::Table,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardConfig {
    #[serde(default)]
    pub id: u16,
    /// `host:port` to listen on; absent for in-process use only.
    pub endpoint: Option<String>,
    /// Directory for pool files; absent keeps pools in memory.
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub sync: SyncMode,
    #[serde(default)]
    pub plugins: Vec<PluginConfig>,
    #[serde(default = "default_secondaries")]
    pub secondaries: usize,
    #[serde(default = "default_queue_depth")]
    pub queue_depth: usize,
}

fn default_secondaries() -> usize {
    1
}

fn default_queue_depth() -> usize {
    ado::DEFAULT_QUEUE_DEPTH
}

impl ShardConfig {
    pub fn in_memory(id: u16) -> ShardConfig {
        ShardConfig {
            id,
            endpoint: None,
            dir: None,
            sync: SyncMode::default(),
            plugins: Vec::new(),
            secondaries: default_secondaries(),
            queue_depth: default_queue_depth(),
        }
    }

    pub fn with_plugin(mut self, id: &str, options: toml::Table) -> ShardConfig {
        self.plugins.push(PluginConfig { id: id.into(), options });
        self
    }

    fn specs(&self) -> Vec<PluginSpec> {
        self.plugins.iter().map(|p| PluginSpec { id: p.id.clone(), options: p.options.clone() }).collect()
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub version: u32,
    #[serde(default)]
    pub shard: Vec<ShardConfig>,
}

impl ServerConfig {
    pub fn parse(text: &str) -> Result<ServerConfig, String> {
        let c: ServerConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if c.version != CONFIG_VERSION {
            return Err(format!("unsupported config version {}", c.version));
        }
        if c.shard.is_empty() {
            return Err("no shards configured".into());
        }
        let ids: HashSet<u16> = c.shard.iter().map(|s| s.id).collect();
        if ids.len() != c.shard.len() {
            return Err("duplicate shard ids".into());
        }
        Ok(c)
    }

    /// Replaces the shard list with `n` copies of the first shard. Ports
    /// are incremented and directories suffixed per copy.
    pub fn with_shard_count(mut self, n: usize) -> Result<ServerConfig, String> {
        let base = self.shard.first().cloned().ok_or("no shards configured")?;
        self.shard = (0..n)
            .map(|i| {
                let mut s = base.clone();
                s.id = base.id + i as u16;
                s.endpoint = base.endpoint.as_ref().map(|e| bump_port(e, i as u16));
                s.dir = base.dir.as_ref().map(|d| d.join(format!("shard{}", s.id)));
                s
            })
            .collect();
        Ok(self)
    }
}

fn bump_port(endpoint: &str, by: u16) -> String {
    match endpoint.rsplit_once(':').and_then(|(h, p)| Some((h, p.parse::<u16>().ok()?))) {
        Some((h, 0)) => format!("{h}:0"),
        Some((h, p)) => format!("{h}:{}", p + by),
        None => endpoint.to_string(),
    }
}

type InspectFn = Box<dyn FnOnce(&mut ShardRuntime) + Send>;

pub(crate) enum ShardMsg {
    Connect { conn: u64, out: Sender<Vec<u8>>, sock: Option<TcpStream> },
    Frame { conn: u64, frame: Frame },
    Disconnect { conn: u64 },
    Inspect(InspectFn),
    Stop,
}

struct PoolRt {
    internal: PoolHandle,
    worker: Option<AdoWorker>,
    clients: usize,
    inflight: usize,
    overflow: VecDeque<WorkItem>,
    waiters: HashMap<Vec<u8>, VecDeque<Deferred>>,
}

struct Deferred {
    conn: u64,
    request_id: u64,
    flags: u16,
    request: Request,
}

struct Pending {
    conn: u64,
    request_id: u64,
}

#[derive(PartialEq, Eq)]
enum Start {
    Started,
    Parked,
    Failed,
}

struct Conn {
    out: Sender<Vec<u8>>,
    sock: Option<TcpStream>,
    handles: HashSet<PoolHandle>,
}

/// State owned by a shard's request thread.
pub struct ShardRuntime {
    shard: Shard,
    registry: Arc<PluginRegistry>,
    specs: Vec<PluginSpec>,
    secondaries: usize,
    queue_depth: usize,
    events: Sender<WorkerEvent>,
    pools: HashMap<String, PoolRt>,
    conns: HashMap<u64, Conn>,
    pending: HashMap<u64, Pending>,
    next_token: u64,
    next_work: u64,
    requests_served: u64,
}

fn store_err(e: StoreError) -> WireError {
    (&e).into()
}

impl ShardRuntime {
    pub fn shard(&mut self) -> &mut Shard {
        &mut self.shard
    }

    /// True when no ADO work or background job is outstanding.
    pub fn idle(&self) -> bool {
        self.pending.is_empty()
            && self.pools.values().all(|p| p.worker.as_ref().is_none_or(|w| w.background_pending() == 0))
    }

    pub fn requests_served(&self) -> u64 {
        self.requests_served
    }

    /// Pool state digest for an open or closed pool.
    pub fn pool_digest(&mut self, name: &str) -> Result<[u8; 32], StoreError> {
        let h = self.shard.open_pool(name)?;
        let d = self.shard.pool(h)?.lock().digest();
        self.shard.close_pool(h)?;
        d
    }

    /// Runs the store and CDP invariant sweep over an open pool.
    pub fn check_pool(&mut self, name: &str) -> Result<(), String> {
        let h = self.shard.open_pool(name).map_err(|e| e.to_string())?;
        let r = self.shard.pool(h).map_err(|e| e.to_string())?.lock().check();
        self.shard.close_pool(h).map_err(|e| e.to_string())?;
        r
    }

    fn respond(&self, conn: u64, request_id: u64, resp: &Response) {
        if let Some(c) = self.conns.get(&conn) {
            let f = Frame::new(Opcode::Response, 0, request_id, encode_response(resp));
            let _ = c.out.send(f.encode());
        }
    }

    fn ensure_runtime(&mut self, name: &str) -> Result<(), WireError> {
        if self.pools.contains_key(name) {
            return Ok(());
        }
        let internal = self.shard.open_pool(name).map_err(store_err)?;
        let worker = if self.specs.is_empty() {
            None
        } else {
            let pool = self.shard.pool(internal).map_err(store_err)?;
            match AdoWorker::spawn(
                name,
                pool,
                &self.registry,
                &self.specs,
                self.secondaries,
                self.queue_depth,
                self.events.clone(),
            ) {
                Ok(w) => Some(w),
                Err(e) => {
                    let _ = self.shard.close_pool(internal);
                    return Err((&e).into());
                }
            }
        };
        let rt = PoolRt {
            internal,
            worker,
            clients: 0,
            inflight: 0,
            overflow: VecDeque::new(),
            waiters: HashMap::new(),
        };
        self.pools.insert(name.to_string(), rt);
        Ok(())
    }

    fn opened(&mut self, conn: u64, name: &str, h: PoolHandle) -> Response {
        if let Err(e) = self.ensure_runtime(name) {
            let _ = self.shard.close_pool(h);
            return Err(e);
        }
        self.pools.get_mut(name).expect("runtime exists").clients += 1;
        if let Some(c) = self.conns.get_mut(&conn) {
            c.handles.insert(h);
        }
        Ok(Payload::Handle(h))
    }

    fn close(&mut self, conn: u64, h: PoolHandle) -> Result<(), StoreError> {
        let name = self.shard.pool_name(h)?.to_string();
        self.shard.close_pool(h)?;
        if let Some(rt) = self.pools.get_mut(&name) {
            rt.clients = rt.clients.saturating_sub(1);
        }
        if let Some(c) = self.conns.get_mut(&conn) {
            c.handles.remove(&h);
        }
        Ok(())
    }

    fn delete(&mut self, name: &str) -> Result<(), StoreError> {
        if let Some(rt) = self.pools.get(name) {
            let busy = rt.clients > 0
                || rt.inflight > 0
                || rt.worker.as_ref().is_some_and(|w| w.background_pending() > 0);
            if busy {
                return Err(StoreError::Busy(name.into()));
            }
            let rt = self.pools.remove(name).expect("checked above");
            drop(rt.worker);
            self.shard.close_pool(rt.internal)?;
        }
        self.shard.delete_pool(name)
    }

    fn handle_frame(&mut self, conn: u64, frame: Frame) {
        self.requests_served += 1;
        let rid = frame.request_id;
        if frame.opcode == Opcode::Response {
            return self.respond(conn, rid, &Err(WireError::protocol("unexpected RESPONSE frame")));
        }
        let req = match Request::decode(frame.opcode, &frame.body) {
            Ok(r) => r,
            Err(e) => return self.respond(conn, rid, &Err(WireError::protocol(e.to_string()))),
        };
        let is_ado = matches!(req, Request::InvokeAdo { .. } | Request::InvokePutAdo { .. });
        if !is_ado && frame.flags != 0 {
            return self.respond(conn, rid, &Err(WireError::protocol(format!("flags {:#x} on {:?}", frame.flags, frame.opcode))));
        }
        if is_ado {
            self.invoke(Deferred { conn, request_id: rid, flags: frame.flags, request: req }, false);
            return;
        }
        let resp = self.serve_kv(conn, req);
        self.respond(conn, rid, &resp);
    }

    fn serve_kv(&mut self, conn: u64, req: Request) -> Response {
        match req {
            Request::CreatePool { name, size } => {
                let h = self.shard.create_pool(&name, size).map_err(store_err)?;
                self.opened(conn, &name, h)
            }
            Request::OpenPool { name } => {
                let h = self.shard.open_pool(&name).map_err(store_err)?;
                self.opened(conn, &name, h)
            }
            Request::ClosePool { pool } => self.close(conn, pool).map(|_| Payload::Empty).map_err(store_err),
            Request::DeletePool { name } => self.delete(&name).map(|_| Payload::Empty).map_err(store_err),
            Request::Put { pool, key, value } => {
                let p = self.shard.pool(pool).map_err(store_err)?;
                let r = p.lock().put(&key, &value);
                r.map(|_| Payload::Empty).map_err(store_err)
            }
            Request::Get { pool, key } => {
                let p = self.shard.pool(pool).map_err(store_err)?;
                let r = p.lock().get(&key);
                r.map(Payload::Value).map_err(store_err)
            }
            Request::Erase { pool, key } => {
                let p = self.shard.pool(pool).map_err(store_err)?;
                let r = p.lock().erase(&key);
                r.map(|_| Payload::Empty).map_err(store_err)
            }
            Request::Resize { pool, key, new_size } => {
                let p = self.shard.pool(pool).map_err(store_err)?;
                let r = p.lock().resize(&key, new_size);
                r.map(|_| Payload::Empty).map_err(store_err)
            }
            Request::InvokeAdo { .. } | Request::InvokePutAdo { .. } => unreachable!("routed to invoke"),
        }
    }

    /// Starts ADO work, or parks it behind the pair lock. Responses for
    /// started work are sent when the worker reports completion.
    /// `released` marks work taken from the head of a key's wait queue.
    fn invoke(&mut self, d: Deferred, released: bool) -> Start {
        match self.try_invoke(d, released) {
            Ok(s) => s,
            Err(e) => {
                let (conn, rid, e) = *e;
                self.respond(conn, rid, &Err(e));
                Start::Failed
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn try_invoke(&mut self, d: Deferred, released: bool) -> Result<Start, Box<(u64, u64, WireError)>> {
        let (conn, rid) = (d.conn, d.request_id);
        let fail = |e: WireError| Box::new((conn, rid, e));
        let (pool_h, key) = match &d.request {
            Request::InvokeAdo { pool, key, .. } | Request::InvokePutAdo { pool, key, .. } => (*pool, key.clone()),
            _ => unreachable!("only invocations are deferred"),
        };
        let name = self.shard.pool_name(pool_h).map_err(|e| fail(store_err(e)))?.to_string();
        let pool = self.shard.pool(pool_h).map_err(|e| fail(store_err(e)))?;
        let rt = self.pools.get_mut(&name).expect("open pool has a runtime");
        if rt.worker.is_none() {
            return Err(fail(WireError::new(ErrorCode::PluginLoad, 0, "no ADO plugins configured for this shard")));
        }
        if !key.is_empty() {
            let queued = !released && rt.waiters.get(&key).is_some_and(|q| !q.is_empty());
            let locked = matches!(pool.lock().lock_holder(&key), Ok(Some(_)));
            if queued || locked {
                let q = rt.waiters.entry(key).or_default();
                if released {
                    q.push_front(d);
                } else {
                    q.push_back(d);
                }
                return Ok(Start::Parked);
            }
        }
        let work_id = self.next_work;
        self.next_work += 1;
        let work = {
            let mut p = pool.lock();
            let r = match &d.request {
                Request::InvokeAdo { request, value_size, .. } => {
                    prepare_work(&mut p, work_id, &key, request, d.flags, *value_size)
                }
                Request::InvokePutAdo { value, request, .. } => {
                    if key.is_empty() {
                        Err(StoreError::InvalidArgument("empty key".into()).into())
                    } else {
                        p.put(&key, value).map_err(ado::AdoError::from).and_then(|_| prepare_work(&mut p, work_id, &key, request, d.flags, 0))
                    }
                }
                _ => unreachable!(),
            };
            r.map_err(|e| fail((&e).into()))?
        };
        let token = self.next_token;
        self.next_token += 1;
        self.pending.insert(token, Pending { conn, request_id: rid });
        rt.inflight += 1;
        let item = WorkItem { work, token };
        if rt.overflow.is_empty() {
            if let Err(item) = rt.worker.as_ref().expect("checked").submit(item) {
                rt.overflow.push_back(item);
            }
        } else {
            rt.overflow.push_back(item);
        }
        Ok(Start::Started)
    }

    fn on_event(&mut self, ev: WorkerEvent) {
        match ev {
            WorkerEvent::Callback(call) => {
                let res = match self.pools.get(&*call.pool) {
                    Some(rt) => self
                        .shard
                        .pool(rt.internal)
                        .and_then(|p| ado::execute_callback(&mut p.lock(), call.work_id, call.request)),
                    None => Err(StoreError::PoolNotFound(call.pool.to_string())),
                };
                let _ = call.reply.send(res);
            }
            WorkerEvent::Done(done) => {
                let p = self.pending.remove(&done.token);
                let Some(rt) = self.pools.get_mut(&*done.pool) else { return };
                rt.inflight = rt.inflight.saturating_sub(1);
                if !done.key.is_empty() {
                    if let Ok(pool) = self.shard.pool(rt.internal) {
                        let _ = pool.lock().unlock_key(&done.key, done.work_id);
                    }
                }
                if let Some(p) = p {
                    let resp = done.result.as_ref().map(|b| Payload::Buffers(b.clone())).map_err(WireError::from);
                    self.respond(p.conn, p.request_id, &resp);
                }
                let rt = self.pools.get_mut(&*done.pool).expect("still present");
                if let Some(w) = rt.worker.as_ref() {
                    while let Some(item) = rt.overflow.pop_front() {
                        if let Err(item) = w.submit(item) {
                            rt.overflow.push_front(item);
                            break;
                        }
                    }
                }
                self.release_waiters(&done.pool, &done.key);
            }
        }
    }

    fn release_waiters(&mut self, pool: &str, key: &[u8]) {
        loop {
            let Some(rt) = self.pools.get_mut(pool) else { return };
            let Some(q) = rt.waiters.get_mut(key) else { return };
            let Some(d) = q.pop_front() else {
                rt.waiters.remove(key);
                return;
            };
            if q.is_empty() {
                rt.waiters.remove(key);
            }
            if self.invoke(d, true) != Start::Failed {
                return;
            }
        }
    }

    fn disconnect(&mut self, conn: u64) {
        if let Some(c) = self.conns.get(&conn) {
            for h in c.handles.clone() {
                let _ = self.close(conn, h);
            }
        }
        self.conns.remove(&conn);
    }
}

/// Handle to a running shard.
pub struct ShardHandle {
    id: u16,
    addr: Option<SocketAddr>,
    inbox: Sender<ShardMsg>,
    next_conn: Arc<AtomicU64>,
    stopping: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    acceptor: Option<JoinHandle<()>>,
}

impl ShardHandle {
    pub fn start(config: &ShardConfig, registry: Arc<PluginRegistry>) -> io::Result<ShardHandle> {
        let shard = match &config.dir {
            Some(d) => Shard::with_dir(config.id, d, config.sync).map_err(io::Error::other)?,
            None => Shard::in_memory(config.id, BackingKind::Memory),
        };
        let specs = config.specs();
        for s in &specs {
            if !registry.contains(&s.id) {
                return Err(io::Error::other(format!("unknown plugin {}", s.id)));
            }
        }
        let (inbox, inbox_rx) = unbounded::<ShardMsg>();
        let (events, events_rx) = unbounded::<WorkerEvent>();
        let rt = ShardRuntime {
            shard,
            registry,
            specs,
            secondaries: config.secondaries,
            queue_depth: config.queue_depth,
            events,
            pools: HashMap::new(),
            conns: HashMap::new(),
            pending: HashMap::new(),
            next_token: 1,
            next_work: 1,
            requests_served: 0,
        };
        let thread = std::thread::Builder::new()
            .name(format!("shard-{}", config.id))
            .spawn(move || run_shard(rt, inbox_rx, events_rx))?;
        let next_conn = Arc::new(AtomicU64::new(1));
        let stopping = Arc::new(AtomicBool::new(false));
        let mut h = ShardHandle {
            id: config.id,
            addr: None,
            inbox,
            next_conn,
            stopping,
            thread: Some(thread),
            acceptor: None,
        };
        if let Some(ep) = &config.endpoint {
            let addr = ep.to_socket_addrs()?.next().ok_or_else(|| io::Error::other(format!("bad endpoint {ep}")))?;
            let listener = TcpListener::bind(addr)?;
            h.addr = Some(listener.local_addr()?);
            let (inbox, next_conn, stopping) = (h.inbox.clone(), h.next_conn.clone(), h.stopping.clone());
            h.acceptor = Some(
                std::thread::Builder::new()
                    .name(format!("accept-{}", config.id))
                    .spawn(move || accept_loop(listener, inbox, next_conn, stopping))?,
            );
        }
        Ok(h)
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn addr(&self) -> Option<SocketAddr> {
        self.addr
    }

    /// In-process connection exchanging the same frames as TCP.
    pub fn connect_local(&self) -> LocalTransport {
        let conn = self.next_conn.fetch_add(1, Ordering::SeqCst);
        let (out, rx) = unbounded();
        let _ = self.inbox.send(ShardMsg::Connect { conn, out, sock: None });
        LocalTransport::new(conn, self.inbox.clone(), rx)
    }

    /// Runs `f` on the shard thread between requests.
    pub fn inspect<R: Send + 'static>(&self, f: impl FnOnce(&mut ShardRuntime) -> R + Send + 'static) -> Option<R> {
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.inbox
            .send(ShardMsg::Inspect(Box::new(move |rt| {
                let _ = tx.send(f(rt));
            })))
            .ok()?;
        rx.recv().ok()
    }

    /// Waits until no ADO work or background job is outstanding.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        while std::time::Instant::now() < deadline {
            if self.inspect(|rt| rt.idle()) != Some(false) {
                return true;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        false
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.stopping.store(true, Ordering::SeqCst);
        let _ = self.inbox.send(ShardMsg::Stop);
        if let Some(addr) = self.addr {
            let _ = TcpStream::connect_timeout(&addr, Duration::from_millis(200));
        }
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ShardHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn run_shard(mut rt: ShardRuntime, inbox: Receiver<ShardMsg>, events: Receiver<WorkerEvent>) {
    loop {
        select! {
            recv(inbox) -> m => match m {
                Ok(ShardMsg::Connect { conn, out, sock }) => {
                    rt.conns.insert(conn, Conn { out, sock, handles: HashSet::new() });
                }
                Ok(ShardMsg::Frame { conn, frame }) => rt.handle_frame(conn, frame),
                Ok(ShardMsg::Disconnect { conn }) => rt.disconnect(conn),
                Ok(ShardMsg::Inspect(f)) => f(&mut rt),
                Ok(ShardMsg::Stop) | Err(_) => break,
            },
            recv(events) -> e => if let Ok(e) = e { rt.on_event(e) },
        }
    }
    for c in rt.conns.values() {
        if let Some(s) = &c.sock {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
    for (_, p) in rt.pools.drain() {
        drop(p.worker);
    }
    for (name, pool) in rt.shard.open_pools() {
        if let Err(e) = pool.lock().region_mut().sync_all() {
            log::warn!("sync of pool {name} failed: {e}");
        }
    }
}

fn accept_loop(listener: TcpListener, inbox: Sender<ShardMsg>, next_conn: Arc<AtomicU64>, stopping: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let conn = next_conn.fetch_add(1, Ordering::SeqCst);
        if let Err(e) = serve_connection(conn, stream, inbox.clone()) {
            log::warn!("connection {conn} setup failed: {e}");
        }
    }
}

fn serve_connection(conn: u64, stream: TcpStream, inbox: Sender<ShardMsg>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let (out, out_rx) = unbounded::<Vec<u8>>();
    inbox.send(ShardMsg::Connect { conn, out: out.clone(), sock: Some(stream.try_clone()?) }).map_err(|_| io::Error::other("shard stopped"))?;
    std::thread::Builder::new().name(format!("conn-{conn}-w")).spawn(move || {
        use std::io::Write;
        for bytes in out_rx {
            if writer.write_all(&bytes).is_err() {
                break;
            }
        }
        let _ = writer.shutdown(Shutdown::Both);
    })?;
    std::thread::Builder::new().name(format!("conn-{conn}-r")).spawn(move || {
        let mut reader = BufReader::new(&stream);
        loop {
            match read_frame(&mut reader) {
                Ok(Some(frame)) => {
                    if inbox.send(ShardMsg::Frame { conn, frame }).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => match e.recoverable() {
                    Some(rid) => {
                        let resp: Response = Err(WireError::protocol(e.to_string()));
                        let _ = out.send(Frame::new(Opcode::Response, 0, rid, encode_response(&resp)).encode());
                    }
                    None => {
                        log::debug!("connection {conn} dropped: {e}");
                        break;
                    }
                },
            }
        }
        // The writer closes the socket once queued responses are out.
        let _ = stream.shutdown(Shutdown::Read);
        let _ = inbox.send(ShardMsg::Disconnect { conn });
    })?;
    Ok(())
}

/// A set of running shards.
pub struct Server {
    pub shards: Vec<ShardHandle>,
}

impl Server {
    pub fn start(config: &ServerConfig, registry: Arc<PluginRegistry>) -> io::Result<Server> {
        let shards = config.shard.iter().map(|s| ShardHandle::start(s, registry.clone())).collect::<io::Result<_>>()?;
        Ok(Server { shards })
    }

    pub fn shutdown(self) {
        for s in self.shards {
            s.shutdown();
        }
    }
}
