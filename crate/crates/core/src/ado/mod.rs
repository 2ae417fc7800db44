//! Active data object runtime: plugin registry, layered `do_work`
//! dispatch, the pool callback API, and worker threads.
//!
//! Plugins see the pool's memory directly through [`AdoServices::memory`]
//! and reach shard-side operations (key creation, pool allocation, ...)
//! through [`AdoServices::callback`]. The memory guard borrows the
//! services object, so a plugin cannot hold pool memory across a callback.

mod worker;
pub mod plugins;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard};
use thiserror::Error;

use crate::index::ValueRef;
use crate::store::{Access, Cursor, KeyPattern, Pool, PoolInfo, RefEntry, StoreError};

pub use worker::{AdoWorker, CallbackCall, WorkDone, WorkItem, WorkerEvent, DEFAULT_QUEUE_DEPTH};

/// Invocation flags carried in the frame header.
pub mod flags {
    pub const CREATE_IF_MISSING: u16 = 1;
    pub const ZERO_COPY_HINT: u16 = 2;
    pub const ALL: u16 = CREATE_IF_MISSING | ZERO_COPY_HINT;
}

#[derive(Debug, Error)]
pub enum AdoError {
    #[error("plugin status {status}: {message}")]
    Plugin { status: i32, message: String },
    #[error("plugin {plugin} panicked: {message}")]
    Panicked { plugin: String, message: String },
    #[error("cannot load plugin {0}")]
    PluginLoad(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("ADO worker stopped")]
    Shutdown,
}

impl AdoError {
    pub fn plugin(status: i32, message: impl Into<String>) -> Self {
        AdoError::Plugin { status, message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, AdoError>;

/// One unit of plugin work. `value` is the pair's value when the work is
/// key-scoped; pool-scoped work (empty key) has none.
#[derive(Clone, Debug, Default)]
pub struct WorkRequest {
    pub work_id: u64,
    pub key: Vec<u8>,
    pub value: Option<ValueRef>,
    pub detached: Vec<ValueRef>,
    pub request: Vec<u8>,
    pub new_root: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CallbackRequest {
    CreateKey { key: Vec<u8>, size: u64 },
    OpenKey { key: Vec<u8> },
    EraseKey { key: Vec<u8> },
    ResizeValue { key: Vec<u8>, new_size: u64 },
    AllocatePoolMemory { size: u64, alignment: u64 },
    FreePoolMemory { offset: u64 },
    GetRefVector,
    Iterate { cursor: Option<Cursor>, max: usize },
    FindKey { pattern: KeyPattern },
    GetPoolInfo,
    Unlock { key: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CallbackResponse {
    Value { value: ValueRef, created: bool },
    Offset(u64),
    Done,
    Refs(Vec<RefEntry>),
    Batch { entries: Vec<RefEntry>, next: Option<Cursor> },
    Key(Option<Vec<u8>>),
    Info(PoolInfo),
}

/// Executes a callback against the pool owning the work item. This is the
/// shard-side half of the callback API.
pub fn execute_callback(
    pool: &mut Pool,
    work_id: u64,
    req: CallbackRequest,
) -> std::result::Result<CallbackResponse, StoreError> {
    let access = if work_id == 0 { Access::Client } else { Access::Work(work_id) };
    use CallbackRequest as C;
    use CallbackResponse as R;
    Ok(match req {
        C::CreateKey { key, size } => {
            let (value, created) = pool.create_key(&key, size, access)?;
            R::Value { value, created }
        }
        C::OpenKey { key } => R::Value { value: pool.value_ref(&key)?, created: false },
        C::EraseKey { key } => {
            pool.erase_as(&key, access)?;
            R::Done
        }
        C::ResizeValue { key, new_size } => {
            R::Value { value: pool.resize_as(&key, new_size, access)?, created: false }
        }
        C::AllocatePoolMemory { size, alignment } => R::Offset(pool.allocate(size, alignment)?),
        C::FreePoolMemory { offset } => {
            if !pool.region().is_live_allocation(offset) {
                return Err(StoreError::InvalidArgument(format!("{offset:#x} is not an allocation")));
            }
            pool.free(offset)?;
            R::Done
        }
        C::GetRefVector => R::Refs(pool.ref_vector()?),
        C::Iterate { cursor, max } => {
            let (entries, next) = pool.iterate(cursor.unwrap_or_else(|| pool.start_cursor()), max)?;
            R::Batch { entries, next }
        }
        C::FindKey { pattern } => R::Key(pool.find_key(&pattern)?),
        C::GetPoolInfo => R::Info(pool.info()?),
        C::Unlock { key } => {
            pool.unlock_key(&key, work_id)?;
            R::Done
        }
    })
}

/// What a plugin can reach: the pool memory and the callback API.
pub trait AdoServices {
    fn pool(&self) -> &Arc<Mutex<Pool>>;
    /// Work id of the item being served; 0 for background work.
    fn work_id(&self) -> u64;
    fn callback(&mut self, req: CallbackRequest) -> std::result::Result<CallbackResponse, StoreError>;
}

fn unexpected(r: CallbackResponse) -> AdoError {
    AdoError::plugin(-1, format!("unexpected callback response {r:?}"))
}

impl dyn AdoServices + '_ {
    pub fn memory(&self) -> MutexGuard<'_, Pool> {
        self.pool().lock()
    }

    fn value_call(&mut self, req: CallbackRequest) -> Result<(ValueRef, bool)> {
        match self.callback(req)? {
            CallbackResponse::Value { value, created } => Ok((value, created)),
            r => Err(unexpected(r)),
        }
    }

    pub fn create_key(&mut self, key: &[u8], size: u64) -> Result<(ValueRef, bool)> {
        self.value_call(CallbackRequest::CreateKey { key: key.to_vec(), size })
    }

    pub fn open_key(&mut self, key: &[u8]) -> Result<ValueRef> {
        Ok(self.value_call(CallbackRequest::OpenKey { key: key.to_vec() })?.0)
    }

    pub fn erase_key(&mut self, key: &[u8]) -> Result<()> {
        self.callback(CallbackRequest::EraseKey { key: key.to_vec() })?;
        Ok(())
    }

    pub fn resize_value(&mut self, key: &[u8], new_size: u64) -> Result<ValueRef> {
        Ok(self.value_call(CallbackRequest::ResizeValue { key: key.to_vec(), new_size })?.0)
    }

    pub fn allocate_pool_memory(&mut self, size: u64, alignment: u64) -> Result<u64> {
        match self.callback(CallbackRequest::AllocatePoolMemory { size, alignment })? {
            CallbackResponse::Offset(o) => Ok(o),
            r => Err(unexpected(r)),
        }
    }

    pub fn free_pool_memory(&mut self, offset: u64) -> Result<()> {
        self.callback(CallbackRequest::FreePoolMemory { offset })?;
        Ok(())
    }

    pub fn get_ref_vector(&mut self) -> Result<Vec<RefEntry>> {
        match self.callback(CallbackRequest::GetRefVector)? {
            CallbackResponse::Refs(v) => Ok(v),
            r => Err(unexpected(r)),
        }
    }

    pub fn iterate(&mut self, cursor: Option<Cursor>, max: usize) -> Result<(Vec<RefEntry>, Option<Cursor>)> {
        match self.callback(CallbackRequest::Iterate { cursor, max })? {
            CallbackResponse::Batch { entries, next } => Ok((entries, next)),
            r => Err(unexpected(r)),
        }
    }

    pub fn find_key(&mut self, pattern: KeyPattern) -> Result<Option<Vec<u8>>> {
        match self.callback(CallbackRequest::FindKey { pattern })? {
            CallbackResponse::Key(k) => Ok(k),
            r => Err(unexpected(r)),
        }
    }

    pub fn get_pool_info(&mut self) -> Result<PoolInfo> {
        match self.callback(CallbackRequest::GetPoolInfo)? {
            CallbackResponse::Info(i) => Ok(i),
            r => Err(unexpected(r)),
        }
    }

    pub fn unlock(&mut self, key: &[u8]) -> Result<()> {
        self.callback(CallbackRequest::Unlock { key: key.to_vec() })?;
        Ok(())
    }
}

/// Services that execute callbacks directly on the pool, for in-process
/// use where plugin and pool share a thread.
pub struct LocalServices {
    pool: Arc<Mutex<Pool>>,
    work_id: u64,
}

impl LocalServices {
    pub fn new(pool: Arc<Mutex<Pool>>, work_id: u64) -> Self {
        LocalServices { pool, work_id }
    }

    pub fn set_work_id(&mut self, work_id: u64) {
        self.work_id = work_id;
    }
}

impl AdoServices for LocalServices {
    fn pool(&self) -> &Arc<Mutex<Pool>> {
        &self.pool
    }
    fn work_id(&self) -> u64 {
        self.work_id
    }
    fn callback(&mut self, req: CallbackRequest) -> std::result::Result<CallbackResponse, StoreError> {
        execute_callback(&mut self.pool.lock(), self.work_id, req)
    }
}

/// Deferred work a plugin hands to a secondary worker.
pub type BackgroundJob = Box<dyn FnOnce(&mut dyn AdoServices) + Send>;

pub trait AdoPlugin: Send {
    fn id(&self) -> &str;

    /// Runs when the plugin is attached to a pool, including after a
    /// worker restart. Recovery of plugin state belongs here.
    fn attach(&mut self, _ctx: &mut dyn AdoServices) -> Result<()> {
        Ok(())
    }

    /// Handles one invocation, appending zero or more response buffers.
    fn do_work(&mut self, ctx: &mut dyn AdoServices, work: &WorkRequest, responses: &mut Vec<Vec<u8>>) -> Result<()>;

    /// Background jobs produced since the last call.
    fn take_background(&mut self) -> Vec<BackgroundJob> {
        Vec::new()
    }
}

pub type PluginOptions = toml::Table;
type Factory = Arc<dyn Fn(&PluginOptions) -> Result<Box<dyn AdoPlugin>> + Send + Sync>;

/// Plugin constructors keyed by plugin id.
#[derive(Clone, Default)]
pub struct PluginRegistry {
    factories: HashMap<String, Factory>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding the built-in plugins.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        plugins::register_builtin(&mut r);
        r
    }

    pub fn register(
        &mut self,
        id: &str,
        f: impl Fn(&PluginOptions) -> Result<Box<dyn AdoPlugin>> + Send + Sync + 'static,
    ) {
        self.factories.insert(id.to_string(), Arc::new(f));
    }

    pub fn contains(&self, id: &str) -> bool {
        self.factories.contains_key(id)
    }

    pub fn instantiate(&self, id: &str, opts: &PluginOptions) -> Result<Box<dyn AdoPlugin>> {
        let f = self.factories.get(id).ok_or_else(|| AdoError::PluginLoad(id.to_string()))?;
        f(opts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PluginSpec {
    pub id: String,
    pub options: PluginOptions,
}

impl PluginSpec {
    pub fn new(id: &str) -> Self {
        PluginSpec { id: id.to_string(), options: PluginOptions::new() }
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// An ordered stack of plugins attached to one pool. Every layer sees
/// every invocation in stack order; the first failing layer ends it.
pub struct PluginStack {
    registry: PluginRegistry,
    specs: Vec<PluginSpec>,
    layers: Vec<Box<dyn AdoPlugin>>,
}

impl PluginStack {
    pub fn new(registry: &PluginRegistry, specs: &[PluginSpec], ctx: &mut dyn AdoServices) -> Result<Self> {
        let mut stack = Self::instantiate(registry, specs)?;
        stack.attach(ctx)?;
        Ok(stack)
    }

    /// Builds the layers without attaching them.
    pub fn instantiate(registry: &PluginRegistry, specs: &[PluginSpec]) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| registry.instantiate(&s.id, &s.options))
            .collect::<Result<Vec<_>>>()?;
        Ok(PluginStack { registry: registry.clone(), specs: specs.to_vec(), layers })
    }

    pub fn attach(&mut self, ctx: &mut dyn AdoServices) -> Result<()> {
        self.layers.iter_mut().try_for_each(|l| l.attach(ctx))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Dispatches `work` to each layer. A panicking layer is contained:
    /// any open transaction is rolled back, the layer is re-instantiated,
    /// and the invocation fails with [`AdoError::Panicked`].
    pub fn dispatch(&mut self, ctx: &mut dyn AdoServices, work: &WorkRequest) -> Result<Vec<Vec<u8>>> {
        let mut responses = Vec::new();
        for i in 0..self.layers.len() {
            let layer = &mut self.layers[i];
            let outcome = catch_unwind(AssertUnwindSafe(|| layer.do_work(ctx, work, &mut responses)));
            match outcome {
                Ok(Ok(())) => {}
                Ok(Err(e)) => return Err(e),
                Err(p) => {
                    let message = panic_message(p);
                    self.recover_layer(ctx, i)?;
                    return Err(AdoError::Panicked { plugin: self.specs[i].id.clone(), message });
                }
            }
        }
        Ok(responses)
    }

    fn recover_layer(&mut self, ctx: &mut dyn AdoServices, i: usize) -> Result<()> {
        {
            let mut pool = ctx.memory();
            let r = pool.region_mut();
            if r.tx_active() {
                r.tx_abort().map_err(StoreError::from)?;
            }
        }
        let mut fresh = self.registry.instantiate(&self.specs[i].id, &self.specs[i].options)?;
        fresh.attach(ctx)?;
        self.layers[i] = fresh;
        Ok(())
    }

    pub fn take_background(&mut self) -> Vec<BackgroundJob> {
        self.layers.iter_mut().flat_map(|l| l.take_background()).collect()
    }
}

/// Synchronous single-threaded ADO host over one pool: takes pair locks,
/// performs on-demand creation and dispatches through a plugin stack,
/// running background jobs inline. Used for in-process deployments and
/// deterministic tests; the threaded server applies the same rules.
pub struct LocalAdo {
    ctx: LocalServices,
    stack: PluginStack,
    next_work: u64,
}

impl LocalAdo {
    pub fn new(pool: Arc<Mutex<Pool>>, registry: &PluginRegistry, specs: &[PluginSpec]) -> Result<Self> {
        let mut ctx = LocalServices::new(pool, 0);
        let stack = PluginStack::new(registry, specs, &mut ctx)?;
        Ok(LocalAdo { ctx, stack, next_work: 1 })
    }

    pub fn pool(&self) -> &Arc<Mutex<Pool>> {
        &self.ctx.pool
    }

    pub fn invoke(&mut self, key: &[u8], request: &[u8], flags: u16, value_size: u64) -> Result<Vec<Vec<u8>>> {
        let work_id = self.next_work;
        self.next_work += 1;
        let work = prepare_work(&mut self.ctx.pool.lock(), work_id, key, request, flags, value_size)?;
        self.run(work)
    }

    pub fn invoke_put(&mut self, key: &[u8], value: &[u8], request: &[u8], flags: u16) -> Result<Vec<Vec<u8>>> {
        if key.is_empty() {
            return Err(StoreError::InvalidArgument("empty key".into()).into());
        }
        self.ctx.pool.lock().put(key, value)?;
        self.invoke(key, request, flags, 0)
    }

    fn run(&mut self, work: WorkRequest) -> Result<Vec<Vec<u8>>> {
        self.ctx.set_work_id(work.work_id);
        let res = self.stack.dispatch(&mut self.ctx, &work);
        if !work.key.is_empty() {
            self.ctx.pool.lock().unlock_key(&work.key, work.work_id)?;
        }
        self.ctx.set_work_id(0);
        for job in self.stack.take_background() {
            job(&mut self.ctx);
        }
        res
    }
}

/// Shard-side preparation of an invocation: validates flags, creates the
/// pair if asked, takes the pair lock and builds the work item.
pub fn prepare_work(
    pool: &mut Pool,
    work_id: u64,
    key: &[u8],
    request: &[u8],
    flags: u16,
    value_size: u64,
) -> Result<WorkRequest> {
    if flags & !flags::ALL != 0 {
        return Err(StoreError::InvalidArgument(format!("unknown flag bits {flags:#x}")).into());
    }
    let mut work = WorkRequest { work_id, key: key.to_vec(), request: request.to_vec(), ..Default::default() };
    if key.is_empty() {
        return Ok(work);
    }
    if flags & flags::CREATE_IF_MISSING != 0 && !pool.contains(key)? {
        if value_size == 0 {
            return Err(StoreError::InvalidArgument("on-demand creation needs a value size".into()).into());
        }
        pool.create_key(key, value_size, Access::Client)?;
        work.new_root = true;
    }
    pool.lock_key(key, work_id)?;
    work.value = Some(pool.value_ref(key)?);
    Ok(work)
}
