//! Threaded ADO workers. Each attached pool gets one primary thread that
//! runs work items one at a time, and optional secondary threads for
//! background jobs. Callbacks travel to the shard as [`WorkerEvent`]s and
//! the issuing thread blocks until the shard replies.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender, TrySendError};
use parking_lot::Mutex;

use super::{
    AdoError, AdoServices, BackgroundJob, CallbackRequest, CallbackResponse, PluginRegistry, PluginSpec,
    PluginStack, Result, WorkRequest,
};
use crate::store::{Pool, StoreError};

pub const DEFAULT_QUEUE_DEPTH: usize = 64;

pub struct CallbackCall {
    pub pool: Arc<str>,
    pub work_id: u64,
    pub request: CallbackRequest,
    pub reply: Sender<std::result::Result<CallbackResponse, StoreError>>,
}

pub struct WorkDone {
    pub pool: Arc<str>,
    pub token: u64,
    pub work_id: u64,
    pub key: Vec<u8>,
    pub result: Result<Vec<Vec<u8>>>,
}

pub enum WorkerEvent {
    Callback(CallbackCall),
    Done(WorkDone),
}

/// A work item plus an opaque token the shard uses to route the answer.
pub struct WorkItem {
    pub work: WorkRequest,
    pub token: u64,
}

struct ChannelServices {
    pool_name: Arc<str>,
    pool: Arc<Mutex<Pool>>,
    work_id: u64,
    events: Sender<WorkerEvent>,
}

fn stopped() -> StoreError {
    StoreError::Io(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "shard stopped"))
}

impl AdoServices for ChannelServices {
    fn pool(&self) -> &Arc<Mutex<Pool>> {
        &self.pool
    }

    fn work_id(&self) -> u64 {
        self.work_id
    }

    fn callback(&mut self, request: CallbackRequest) -> std::result::Result<CallbackResponse, StoreError> {
        let (tx, rx) = bounded(1);
        let call = CallbackCall { pool: self.pool_name.clone(), work_id: self.work_id, request, reply: tx };
        self.events.send(WorkerEvent::Callback(call)).map_err(|_| stopped())?;
        rx.recv().map_err(|_| stopped())?
    }
}

pub struct AdoWorker {
    queue: Option<Sender<WorkItem>>,
    threads: Vec<JoinHandle<()>>,
    background_pending: Arc<AtomicUsize>,
}

impl AdoWorker {
    /// Instantiates the plugin stack (so unknown plugins fail here) and
    /// starts the worker threads. Attachment runs on the primary thread.
    pub fn spawn(
        pool_name: &str,
        pool: Arc<Mutex<Pool>>,
        registry: &PluginRegistry,
        specs: &[PluginSpec],
        secondaries: usize,
        queue_depth: usize,
        events: Sender<WorkerEvent>,
    ) -> Result<AdoWorker> {
        let mut stack = PluginStack::instantiate(registry, specs)?;
        let pool_name: Arc<str> = Arc::from(pool_name);
        let (queue, work_rx) = bounded::<WorkItem>(queue_depth.max(1));
        let (bg_tx, bg_rx) = unbounded::<BackgroundJob>();
        let pending = Arc::new(AtomicUsize::new(0));
        let mut threads = Vec::new();
        for i in 0..secondaries {
            let mut ctx = ChannelServices {
                pool_name: pool_name.clone(),
                pool: pool.clone(),
                work_id: 0,
                events: events.clone(),
            };
            let rx: Receiver<BackgroundJob> = bg_rx.clone();
            let pending = pending.clone();
            threads.push(
                std::thread::Builder::new()
                    .name(format!("ado-{pool_name}-s{i}"))
                    .spawn(move || {
                        for job in rx {
                            job(&mut ctx);
                            pending.fetch_sub(1, Ordering::SeqCst);
                        }
                    })
                    .expect("spawn secondary worker"),
            );
        }
        let mut ctx = ChannelServices { pool_name: pool_name.clone(), pool, work_id: 0, events };
        let bg_pending = pending.clone();
        threads.push(
            std::thread::Builder::new()
                .name(format!("ado-{pool_name}"))
                .spawn(move || {
                    let attached = stack.attach(&mut ctx).map_err(|e| e.to_string());
                    for item in work_rx {
                        let result = match &attached {
                            Ok(()) => {
                                ctx.work_id = item.work.work_id;
                                let r = stack.dispatch(&mut ctx, &item.work);
                                ctx.work_id = 0;
                                r
                            }
                            Err(msg) => Err(AdoError::PluginLoad(msg.clone())),
                        };
                        let jobs = stack.take_background();
                        if secondaries == 0 {
                            for job in jobs {
                                job(&mut ctx);
                            }
                        } else {
                            for job in jobs {
                                bg_pending.fetch_add(1, Ordering::SeqCst);
                                if bg_tx.send(job).is_err() {
                                    bg_pending.fetch_sub(1, Ordering::SeqCst);
                                }
                            }
                        }
                        let done = WorkDone {
                            pool: ctx.pool_name.clone(),
                            token: item.token,
                            work_id: item.work.work_id,
                            key: item.work.key,
                            result,
                        };
                        if ctx.events.send(WorkerEvent::Done(done)).is_err() {
                            break;
                        }
                    }
                })
                .expect("spawn primary worker"),
        );
        Ok(AdoWorker { queue: Some(queue), threads, background_pending: pending })
    }

    /// Queues a work item. Returns it back if the queue is full.
    pub fn submit(&self, item: WorkItem) -> std::result::Result<(), WorkItem> {
        match self.queue.as_ref().expect("worker running").try_send(item) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(i)) | Err(TrySendError::Disconnected(i)) => Err(i),
        }
    }

    /// Number of background jobs handed to secondaries and not yet done.
    pub fn background_pending(&self) -> usize {
        self.background_pending.load(Ordering::SeqCst)
    }

    /// Stops accepting work and waits for the threads. The caller must
    /// have dropped the event receiver (or keep serving it) so threads
    /// blocked on a callback can finish.
    pub fn join(mut self) {
        self.queue.take();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for AdoWorker {
    fn drop(&mut self) {
        self.queue.take();
    }
}
