use std::sync::Arc;

use ados_core::ado::{flags, AdoError, AdoPlugin, AdoServices, LocalAdo, PluginRegistry, PluginSpec, WorkRequest};
use ados_core::pmem::BackingKind;
use ados_core::store::{Access, Pool, StoreError};
use parking_lot::Mutex;

type Log = Arc<Mutex<Vec<String>>>;

/// Records what it sees and probes the pair lock from inside the work item.
struct Probe {
    name: String,
    log: Log,
}

impl AdoPlugin for Probe {
    fn id(&self) -> &str {
        "probe"
    }

    fn do_work(&mut self, ctx: &mut dyn AdoServices, work: &WorkRequest, out: &mut Vec<Vec<u8>>) -> ados_core::ado::Result<()> {
        let mut entry = format!("{}:{}", self.name, String::from_utf8_lossy(&work.request));
        if !work.key.is_empty() {
            let mut pool = ctx.memory();
            let holder = pool.lock_holder(&work.key)?;
            assert_eq!(holder, Some(work.work_id));
            let client = pool.put(&work.key, b"intruder");
            assert!(matches!(client, Err(StoreError::LockedByAdo(id)) if id == work.work_id));
            pool.put_as(&work.key, self.name.as_bytes(), Access::Work(work.work_id))?;
        } else {
            entry.push_str(":pool");
        }
        if work.request == b"early" {
            ctx.unlock(&work.key)?;
            assert_eq!(ctx.memory().lock_holder(&work.key)?, None);
        }
        self.log.lock().push(entry);
        out.push(self.name.as_bytes().to_vec());
        Ok(())
    }
}

fn registry(log: &Log) -> PluginRegistry {
    let mut r = PluginRegistry::builtin();
    let log = log.clone();
    r.register("probe", move |opts| {
        let name = opts.get("name").and_then(|v| v.as_str()).unwrap_or("probe").to_string();
        Ok(Box::new(Probe { name, log: log.clone() }))
    });
    r
}

fn probe(name: &str) -> PluginSpec {
    let mut s = PluginSpec::new("probe");
    s.options.insert("name".into(), name.into());
    s
}

fn host(specs: &[PluginSpec], log: &Log) -> LocalAdo {
    let pool = Arc::new(Mutex::new(Pool::create_in_memory("p", 8 << 20, BackingKind::Memory).unwrap()));
    LocalAdo::new(pool, &registry(log), specs).unwrap()
}

#[test]
fn every_layer_runs_in_stack_order_under_the_pair_lock() {
    let log = Log::default();
    let mut a = host(&[probe("a"), probe("b"), probe("c")], &log);
    let r = a.invoke(b"k", b"go", flags::CREATE_IF_MISSING, 16).unwrap();
    assert_eq!(r, vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec()]);
    assert_eq!(*log.lock(), ["a:go", "b:go", "c:go"]);
    let pool = a.pool().lock();
    assert_eq!(pool.get(b"k").unwrap(), b"c");
    assert_eq!(pool.lock_holder(b"k").unwrap(), None);
}

#[test]
fn plugin_may_release_the_lock_early() {
    let log = Log::default();
    let mut a = host(&[probe("a")], &log);
    a.invoke(b"k", b"early", flags::CREATE_IF_MISSING, 8).unwrap();
    a.pool().lock().put(b"k", b"client").unwrap();
}

#[test]
fn empty_key_is_pool_scoped_work() {
    let log = Log::default();
    let mut a = host(&[probe("a")], &log);
    a.invoke(b"", b"scan", 0, 0).unwrap();
    assert_eq!(*log.lock(), ["a:scan:pool"]);
}

#[test]
fn external_and_builtin_plugins_compose() {
    let log = Log::default();
    let mut a = host(&[PluginSpec::new("echo"), PluginSpec::new("kvtest"), probe("a")], &log);
    let r = a.invoke_put(b"k", b"stored", b"get", 0).unwrap();
    assert_eq!(r, vec![b"get".to_vec(), b"stored".to_vec(), b"a".to_vec()]);
    assert_eq!(a.pool().lock().get(b"k").unwrap(), b"a");
}

#[test]
fn panic_fails_the_item_and_the_host_carries_on() {
    let log = Log::default();
    let mut a = host(&[PluginSpec::new("kvtest")], &log);
    a.pool().lock().put(b"k", b"stable").unwrap();
    assert!(matches!(a.invoke(b"k", b"panic", 0, 0), Err(AdoError::Panicked { .. })));
    assert_eq!(a.pool().lock().get(b"k").unwrap(), b"stable");
    assert_eq!(a.pool().lock().lock_holder(b"k").unwrap(), None);
    assert_eq!(a.invoke(b"k", b"get", 0, 0).unwrap(), vec![b"stable".to_vec()]);
    assert!(matches!(a.invoke(b"k", b"frobnicate", 0, 0), Err(AdoError::Plugin { .. })));
    a.pool().lock().check().unwrap();
}

#[test]
fn set_then_get_through_the_store() {
    let log = Log::default();
    let mut a = host(&[PluginSpec::new("kvtest")], &log);
    a.invoke(b"k", b"set:hello", flags::CREATE_IF_MISSING, 5).unwrap();
    assert_eq!(a.pool().lock().get(b"k").unwrap(), b"hello");
}
