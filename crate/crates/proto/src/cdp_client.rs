//! Typed client for the CDP plugin. Each call is one ADO invocation, so
//! one network round trip.

use ados_core::ado::flags::CREATE_IF_MISSING;
use ados_core::cdp::engine::{VolumeStats, VOLUME_ROOT_BYTES};
use ados_core::cdp::plugin::{decode_mapping, decode_stats, decode_u64, decode_update, from_status, CdpRequest};
use ados_core::cdp::{BlockMapping, CdpError, QueryRange, VolumeConfig};
use ados_core::store::StoreError;
use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::message::ErrorCode;

#[derive(Debug, Error)]
pub enum CdpClientError {
    #[error(transparent)]
    Cdp(CdpError),
    #[error(transparent)]
    Client(ClientError),
}

impl From<ClientError> for CdpClientError {
    fn from(e: ClientError) -> Self {
        match &e {
            ClientError::Server(w) if w.code == ErrorCode::Plugin => {
                CdpClientError::Cdp(from_status(w.detail as i32, &w.message))
            }
            ClientError::Server(w) if w.code == ErrorCode::NotFound => {
                CdpClientError::Cdp(CdpError::VolumeNotFound)
            }
            ClientError::Server(w) if w.code == ErrorCode::OutOfMemory => {
                CdpClientError::Cdp(CdpError::Store(StoreError::OutOfMemory))
            }
            _ => CdpClientError::Client(e),
        }
    }
}

impl From<CdpError> for CdpClientError {
    fn from(e: CdpError) -> Self {
        CdpClientError::Cdp(e)
    }
}

pub type Result<T> = std::result::Result<T, CdpClientError>;

/// Encoded invocation for one CDP request: (request bytes, flags, value size).
pub fn invocation(req: &CdpRequest) -> (Vec<u8>, u16, u64) {
    let creates = matches!(req, CdpRequest::Update { .. } | CdpRequest::Configure(_));
    if creates {
        (req.encode(), CREATE_IF_MISSING, VOLUME_ROOT_BYTES)
    } else {
        (req.encode(), 0, 0)
    }
}

pub struct CdpClient<'a> {
    pub client: &'a mut Client,
    pub pool: u64,
}

impl CdpClient<'_> {
    fn call(&mut self, tag: &[u8], req: CdpRequest) -> Result<Vec<u8>> {
        let (body, flags, size) = invocation(&req);
        let mut out = self.client.invoke_ado(self.pool, tag, &body, flags, size)?;
        if out.len() != 1 {
            return Err(CdpError::Request(format!("{} response buffers", out.len())).into());
        }
        Ok(out.remove(0))
    }

    /// Returns (sequence, sealed).
    pub fn update(&mut self, tag: &[u8], v: u64, len: u64, m: u64, ts: u64) -> Result<(u64, bool)> {
        let b = self.call(tag, CdpRequest::Update { virtual_offset: v, length: len, managed_offset: m, timestamp: ts })?;
        Ok(decode_update(&b)?)
    }

    pub fn query(&mut self, tag: &[u8], t: u64, range: QueryRange) -> Result<BlockMapping> {
        Ok(decode_mapping(&self.call(tag, CdpRequest::Query { t, range })?)?)
    }

    pub fn trim(&mut self, tag: &[u8], now: u64) -> Result<u64> {
        Ok(decode_u64(&self.call(tag, CdpRequest::Trim { now })?)?)
    }

    pub fn configure(&mut self, tag: &[u8], config: VolumeConfig) -> Result<()> {
        self.call(tag, CdpRequest::Configure(config)).map(|_| ())
    }

    pub fn stats(&mut self, tag: &[u8]) -> Result<VolumeStats> {
        Ok(decode_stats(&self.call(tag, CdpRequest::Stats)?)?)
    }

    pub fn digest(&mut self, tag: &[u8]) -> Result<[u8; 32]> {
        let b = self.call(tag, CdpRequest::Digest)?;
        b.try_into().map_err(|_| CdpError::Request("digest length".into()).into())
    }
}
