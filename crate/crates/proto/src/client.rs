//! Client library. One connection per client; calls are stop-and-wait,
//! and [`Client::send`]/[`Client::recv`] allow pipelining.

use std::io;
use std::net::ToSocketAddrs;
use std::time::Duration;

use ados_core::cdp::plainkv::KvBackend;
use ados_core::store::StoreError;
use thiserror::Error;

use crate::frame::{Frame, Opcode};
use crate::message::{decode_response, ErrorCode, Payload, Request, Response, WireError};
use crate::transport::{TcpTransport, Transport};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {:?} ({}): {}", .0.code, .0.detail, .0.message)]
    Server(WireError),
}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Server(w) => Some(w.code),
            _ => None,
        }
    }

    /// Plugin status of a failed invocation.
    pub fn plugin_status(&self) -> Option<i32> {
        match self {
            ClientError::Server(w) if w.code == ErrorCode::Plugin => Some(w.detail as i32),
            _ => None,
        }
    }

    /// True when the connection can no longer be trusted.
    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::Timeout | ClientError::Io(_) | ClientError::Protocol(_))
    }
}

/// Per-connection traffic counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub round_trips: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

pub struct Client {
    transport: Box<dyn Transport>,
    next_id: u64,
    timeout: Option<Duration>,
    stats: ClientStats,
}

impl Client {
    pub fn new(transport: impl Transport + 'static) -> Client {
        Client { transport: Box::new(transport), next_id: 1, timeout: None, stats: ClientStats::default() }
    }

    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Client> {
        Ok(Client::new(TcpTransport::connect(addr)?))
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    /// Sends a request without waiting; returns its request id.
    pub fn send(&mut self, req: &Request, flags: u16) -> Result<u64, ClientError> {
        let id = self.next_id;
        self.next_id += 1;
        let f = Frame::new(req.opcode(), flags, id, req.encode_body());
        self.stats.bytes_sent += (crate::frame::HEADER_LEN + f.body.len()) as u64;
        self.stats.round_trips += 1;
        self.transport.send(&f)?;
        Ok(id)
    }

    /// Receives the next response.
    pub fn recv(&mut self) -> Result<(u64, Response), ClientError> {
        let f = self.transport.recv(self.timeout)?;
        self.stats.bytes_received += (crate::frame::HEADER_LEN + f.body.len()) as u64;
        if f.opcode != Opcode::Response {
            return Err(ClientError::Protocol(format!("server sent {:?}", f.opcode)));
        }
        let r = decode_response(&f.body).map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok((f.request_id, r))
    }

    pub fn call(&mut self, req: &Request, flags: u16) -> Result<Payload, ClientError> {
        let id = self.send(req, flags)?;
        let (got, resp) = self.recv()?;
        if got != id {
            return Err(ClientError::Protocol(format!("response for {got}, expected {id}")));
        }
        resp.map_err(ClientError::Server)
    }

    fn handle(p: Payload) -> Result<u64, ClientError> {
        match p {
            Payload::Handle(h) => Ok(h),
            other => Err(ClientError::Protocol(format!("expected a handle, got {other:?}"))),
        }
    }

    pub fn create_pool(&mut self, name: &str, size: u64) -> Result<u64, ClientError> {
        Self::handle(self.call(&Request::CreatePool { name: name.into(), size }, 0)?)
    }

    pub fn open_pool(&mut self, name: &str) -> Result<u64, ClientError> {
        Self::handle(self.call(&Request::OpenPool { name: name.into() }, 0)?)
    }

    pub fn close_pool(&mut self, pool: u64) -> Result<(), ClientError> {
        self.call(&Request::ClosePool { pool }, 0).map(|_| ())
    }

    pub fn delete_pool(&mut self, name: &str) -> Result<(), ClientError> {
        self.call(&Request::DeletePool { name: name.into() }, 0).map(|_| ())
    }

    pub fn put(&mut self, pool: u64, key: &[u8], value: &[u8]) -> Result<(), ClientError> {
        self.call(&Request::Put { pool, key: key.to_vec(), value: value.to_vec() }, 0).map(|_| ())
    }

    pub fn get(&mut self, pool: u64, key: &[u8]) -> Result<Vec<u8>, ClientError> {
        match self.call(&Request::Get { pool, key: key.to_vec() }, 0)? {
            Payload::Value(v) => Ok(v),
            other => Err(ClientError::Protocol(format!("expected a value, got {other:?}"))),
        }
    }

    pub fn erase(&mut self, pool: u64, key: &[u8]) -> Result<(), ClientError> {
        self.call(&Request::Erase { pool, key: key.to_vec() }, 0).map(|_| ())
    }

    pub fn resize(&mut self, pool: u64, key: &[u8], new_size: u64) -> Result<(), ClientError> {
        self.call(&Request::Resize { pool, key: key.to_vec(), new_size }, 0).map(|_| ())
    }

    fn buffers(p: Payload) -> Result<Vec<Vec<u8>>, ClientError> {
        match p {
            Payload::Buffers(b) => Ok(b),
            other => Err(ClientError::Protocol(format!("expected response buffers, got {other:?}"))),
        }
    }

    pub fn invoke_ado(
        &mut self,
        pool: u64,
        key: &[u8],
        request: &[u8],
        flags: u16,
        value_size: u64,
    ) -> Result<Vec<Vec<u8>>, ClientError> {
        let req = Request::InvokeAdo { pool, key: key.to_vec(), request: request.to_vec(), value_size };
        Self::buffers(self.call(&req, flags)?)
    }

    pub fn invoke_put_ado(
        &mut self,
        pool: u64,
        key: &[u8],
        value: &[u8],
        request: &[u8],
        flags: u16,
    ) -> Result<Vec<Vec<u8>>, ClientError> {
        let req = Request::InvokePutAdo { pool, key: key.to_vec(), value: value.to_vec(), request: request.to_vec() };
        Self::buffers(self.call(&req, flags)?)
    }
}

/// A pool on a remote shard seen through the plain key-value API.
pub struct RemotePool<'a> {
    pub client: &'a mut Client,
    pub pool: u64,
}

fn to_store(e: ClientError) -> StoreError {
    match &e {
        ClientError::Server(w) => match w.code {
            ErrorCode::NotFound => StoreError::NotFound,
            ErrorCode::OutOfMemory => StoreError::OutOfMemory,
            ErrorCode::LockedByAdo => StoreError::LockedByAdo(w.detail as u64),
            ErrorCode::InvalidArgument => StoreError::InvalidArgument(w.message.clone()),
            _ => StoreError::Io(io::Error::other(e.to_string())),
        },
        _ => StoreError::Io(io::Error::other(e.to_string())),
    }
}

impl KvBackend for RemotePool<'_> {
    fn put(&mut self, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        self.client.put(self.pool, key, value).map_err(to_store)
    }

    fn get(&mut self, key: &[u8]) -> Result<Vec<u8>, StoreError> {
        self.client.get(self.pool, key).map_err(to_store)
    }

    fn erase(&mut self, key: &[u8]) -> Result<(), StoreError> {
        self.client.erase(self.pool, key).map_err(to_store)
    }
}
