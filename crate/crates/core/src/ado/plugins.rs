//! Built-in plugins.
//!
//! `echo` answers every request with the request bytes. `kvtest` is a
//! small command plugin used to exercise the runtime:
//!
//! | request       | effect                                               |
//! |---------------|------------------------------------------------------|
//! | `get`         | responds with the value bytes                        |
//! | `set:<bytes>` | overwrites the value prefix in place                 |
//! | `info`        | responds `[new_root as u8] ++ value length (u64 LE)` |
//! | `unlock`      | releases the pair lock early                         |
//! | `panic`       | starts a transaction, scribbles, then panics         |

use super::{AdoError, AdoPlugin, AdoServices, PluginRegistry, Result, WorkRequest};
use crate::store::StoreError;

pub fn register_builtin(r: &mut PluginRegistry) {
    r.register("echo", |_| Ok(Box::new(Echo)));
    r.register("kvtest", |_| Ok(Box::new(KvTest)));
    r.register("cdp", |opts| Ok(Box::new(crate::cdp::plugin::CdpPlugin::from_options(opts)?)));
}

pub struct Echo;

impl AdoPlugin for Echo {
    fn id(&self) -> &str {
        "echo"
    }

    fn do_work(&mut self, _ctx: &mut dyn AdoServices, work: &WorkRequest, out: &mut Vec<Vec<u8>>) -> Result<()> {
        out.push(work.request.clone());
        Ok(())
    }
}

pub struct KvTest;

impl AdoPlugin for KvTest {
    fn id(&self) -> &str {
        "kvtest"
    }

    fn do_work(&mut self, ctx: &mut dyn AdoServices, work: &WorkRequest, out: &mut Vec<Vec<u8>>) -> Result<()> {
        let value = work.value.ok_or_else(|| AdoError::plugin(-3, "kvtest needs a key"))?;
        let req = work.request.as_slice();
        match req {
            b"get" => out.push(ctx.memory().read_value(value)?),
            b"info" => {
                let mut r = vec![work.new_root as u8];
                r.extend_from_slice(&value.length.to_le_bytes());
                out.push(r);
            }
            b"unlock" => ctx.unlock(&work.key)?,
            b"panic" => {
                let mut pool = ctx.memory();
                let r = pool.region_mut();
                r.tx_begin().map_err(StoreError::from)?;
                if value.length > 0 {
                    r.tx_write(value.offset, &vec![0xEE; value.length as usize]).map_err(StoreError::from)?;
                }
                panic!("kvtest asked to panic");
            }
            _ if req.starts_with(b"set:") => {
                let data = &req[4..];
                let n = data.len().min(value.length as usize);
                let mut pool = ctx.memory();
                let r = pool.region_mut();
                r.write(value.offset, &data[..n]).map_err(StoreError::from)?;
                r.persist(value.offset, n as u64).map_err(StoreError::from)?;
            }
            _ => return Err(AdoError::plugin(-2, format!("unknown kvtest command {:?}", String::from_utf8_lossy(req)))),
        }
        Ok(())
    }
}
