//! Typed request and response bodies. Byte strings are a u32 LE length
//! followed by the bytes; integers are little-endian.
//!
//! ```text
//! OPEN_POOL       name
//! CREATE_POOL     name, size u64
//! DELETE_POOL     name
//! CLOSE_POOL      pool u64
//! PUT             pool u64, key, value
//! GET | ERASE     pool u64, key
//! RESIZE          pool u64, key, new_size u64
//! INVOKE_ADO      pool u64, key, request, value_size u64
//! INVOKE_PUT_ADO  pool u64, key, value, request
//! RESPONSE        status u16, then
//!                   ok:    kind u8 (0 empty, 1 handle u64, 2 value, 3 count u32 + buffers)
//!                   error: detail i64, message
//! ```
//!
//! ADO flags travel in the frame header; every other opcode requires
//! zero flags.

use ados_core::ado::AdoError;
use ados_core::store::StoreError;
use thiserror::Error;

use crate::frame::Opcode;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    OpenPool { name: String },
    CreatePool { name: String, size: u64 },
    DeletePool { name: String },
    ClosePool { pool: u64 },
    Put { pool: u64, key: Vec<u8>, value: Vec<u8> },
    Get { pool: u64, key: Vec<u8> },
    Erase { pool: u64, key: Vec<u8> },
    Resize { pool: u64, key: Vec<u8>, new_size: u64 },
    InvokeAdo { pool: u64, key: Vec<u8>, request: Vec<u8>, value_size: u64 },
    InvokePutAdo { pool: u64, key: Vec<u8>, value: Vec<u8>, request: Vec<u8> },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed body: {0}")]
pub struct BodyError(pub String);

#[derive(Default)]
pub struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
        self
    }
}

pub struct Reader<'a>(pub &'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BodyError> {
        if self.0.len() < n {
            return Err(BodyError(format!("need {n} bytes, have {}", self.0.len())));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }

    pub fn u8(&mut self) -> Result<u8, BodyError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, BodyError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, BodyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, BodyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, BodyError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn string(&mut self) -> Result<String, BodyError> {
        String::from_utf8(self.bytes()?).map_err(|_| BodyError("string is not UTF-8".into()))
    }

    pub fn finish(&self) -> Result<(), BodyError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(BodyError(format!("{} trailing bytes", self.0.len())))
        }
    }
}

impl Request {
    pub fn opcode(&self) -> Opcode {
        match self {
            Request::OpenPool { .. } => Opcode::OpenPool,
            Request::CreatePool { .. } => Opcode::CreatePool,
            Request::DeletePool { .. } => Opcode::DeletePool,
            Request::ClosePool { .. } => Opcode::ClosePool,
            Request::Put { .. } => Opcode::Put,
            Request::Get { .. } => Opcode::Get,
            Request::Erase { .. } => Opcode::Erase,
            Request::Resize { .. } => Opcode::Resize,
            Request::InvokeAdo { .. } => Opcode::InvokeAdo,
            Request::InvokePutAdo { .. } => Opcode::InvokePutAdo,
        }
    }

    /// Pool handle addressed by the request, if any.
    pub fn pool(&self) -> Option<u64> {
        match self {
            Request::ClosePool { pool }
            | Request::Put { pool, .. }
            | Request::Get { pool, .. }
            | Request::Erase { pool, .. }
            | Request::Resize { pool, .. }
            | Request::InvokeAdo { pool, .. }
            | Request::InvokePutAdo { pool, .. } => Some(*pool),
            _ => None,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut w = Writer::default();
        match self {
            Request::OpenPool { name } | Request::DeletePool { name } => {
                w.bytes(name.as_bytes());
            }
            Request::CreatePool { name, size } => {
                w.bytes(name.as_bytes()).u64(*size);
            }
            Request::ClosePool { pool } => {
                w.u64(*pool);
            }
            Request::Put { pool, key, value } => {
                w.u64(*pool).bytes(key).bytes(value);
            }
            Request::Get { pool, key } | Request::Erase { pool, key } => {
                w.u64(*pool).bytes(key);
            }
            Request::Resize { pool, key, new_size } => {
                w.u64(*pool).bytes(key).u64(*new_size);
            }
            Request::InvokeAdo { pool, key, request, value_size } => {
                w.u64(*pool).bytes(key).bytes(request).u64(*value_size);
            }
            Request::InvokePutAdo { pool, key, value, request } => {
                w.u64(*pool).bytes(key).bytes(value).bytes(request);
            }
        }
        w.0
    }

    pub fn decode(opcode: Opcode, body: &[u8]) -> Result<Request, BodyError> {
        let mut r = Reader(body);
        let req = match opcode {
            Opcode::OpenPool => Request::OpenPool { name: r.string()? },
            Opcode::CreatePool => Request::CreatePool { name: r.string()?, size: r.u64()? },
            Opcode::DeletePool => Request::DeletePool { name: r.string()? },
            Opcode::ClosePool => Request::ClosePool { pool: r.u64()? },
            Opcode::Put => Request::Put { pool: r.u64()?, key: r.bytes()?, value: r.bytes()? },
            Opcode::Get => Request::Get { pool: r.u64()?, key: r.bytes()? },
            Opcode::Erase => Request::Erase { pool: r.u64()?, key: r.bytes()? },
            Opcode::Resize => Request::Resize { pool: r.u64()?, key: r.bytes()?, new_size: r.u64()? },
            Opcode::InvokeAdo => {
                Request::InvokeAdo { pool: r.u64()?, key: r.bytes()?, request: r.bytes()?, value_size: r.u64()? }
            }
            Opcode::InvokePutAdo => {
                Request::InvokePutAdo { pool: r.u64()?, key: r.bytes()?, value: r.bytes()?, request: r.bytes()? }
            }
            Opcode::Response => return Err(BodyError("RESPONSE is not a request".into())),
        };
        r.finish()?;
        Ok(req)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    Protocol = 1,
    NotFound = 2,
    PoolNotFound = 3,
    NameCollision = 4,
    Busy = 5,
    OutOfMemory = 6,
    LockedByAdo = 7,
    WrongShard = 8,
    InvalidHandle = 9,
    InvalidArgument = 10,
    UnknownCursor = 11,
    Plugin = 12,
    PluginPanicked = 13,
    PluginLoad = 14,
    Internal = 15,
    Shutdown = 16,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<ErrorCode> {
        use ErrorCode::*;
        [
            Protocol,
            NotFound,
            PoolNotFound,
            NameCollision,
            Busy,
            OutOfMemory,
            LockedByAdo,
            WrongShard,
            InvalidHandle,
            InvalidArgument,
            UnknownCursor,
            Plugin,
            PluginPanicked,
            PluginLoad,
            Internal,
            Shutdown,
        ]
        .get(usize::from(v).wrapping_sub(1))
        .copied()
    }
}

/// An error as carried on the wire. `detail` holds the plugin status,
/// the locking work id, or the owning shard, depending on `code`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireError {
    pub code: ErrorCode,
    pub detail: i64,
    pub message: String,
}

impl WireError {
    pub fn new(code: ErrorCode, detail: i64, message: impl Into<String>) -> Self {
        WireError { code, detail, message: message.into() }
    }

    pub fn protocol(message: impl Into<String>) -> Self {
        WireError::new(ErrorCode::Protocol, 0, message)
    }
}

impl From<&StoreError> for WireError {
    fn from(e: &StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::NameCollision(_) => WireError::new(ErrorCode::NameCollision, 0, msg),
            StoreError::PoolNotFound(_) => WireError::new(ErrorCode::PoolNotFound, 0, msg),
            StoreError::NotFound => WireError::new(ErrorCode::NotFound, 0, msg),
            StoreError::Busy(_) => WireError::new(ErrorCode::Busy, 0, msg),
            StoreError::OutOfMemory => WireError::new(ErrorCode::OutOfMemory, 0, msg),
            StoreError::LockedByAdo(w) => WireError::new(ErrorCode::LockedByAdo, *w as i64, msg),
            StoreError::WrongShard { owner, shard } => {
                WireError::new(ErrorCode::WrongShard, (i64::from(*owner) << 16) | i64::from(*shard), msg)
            }
            StoreError::InvalidHandle(h) => WireError::new(ErrorCode::InvalidHandle, *h as i64, msg),
            StoreError::UnknownCursor => WireError::new(ErrorCode::UnknownCursor, 0, msg),
            StoreError::InvalidArgument(_) => WireError::new(ErrorCode::InvalidArgument, 0, msg),
            StoreError::Pmem(_) | StoreError::Index(_) | StoreError::Io(_) => WireError::new(ErrorCode::Internal, 0, msg),
        }
    }
}

impl From<&AdoError> for WireError {
    fn from(e: &AdoError) -> Self {
        match e {
            AdoError::Plugin { status, message } => WireError::new(ErrorCode::Plugin, i64::from(*status), message.clone()),
            AdoError::Panicked { .. } => WireError::new(ErrorCode::PluginPanicked, 0, e.to_string()),
            AdoError::PluginLoad(_) => WireError::new(ErrorCode::PluginLoad, 0, e.to_string()),
            AdoError::Store(s) => s.into(),
            AdoError::Shutdown => WireError::new(ErrorCode::Shutdown, 0, e.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Empty,
    Handle(u64),
    Value(Vec<u8>),
    Buffers(Vec<Vec<u8>>),
}

pub type Response = Result<Payload, WireError>;

pub fn encode_response(r: &Response) -> Vec<u8> {
    let mut w = Writer::default();
    match r {
        Ok(p) => {
            w.u16(0);
            match p {
                Payload::Empty => {
                    w.u8(0);
                }
                Payload::Handle(h) => {
                    w.u8(1).u64(*h);
                }
                Payload::Value(v) => {
                    w.u8(2).bytes(v);
                }
                Payload::Buffers(bs) => {
                    w.u8(3).u32(bs.len() as u32);
                    for b in bs {
                        w.bytes(b);
                    }
                }
            }
        }
        Err(e) => {
            w.u16(e.code as u16).u64(e.detail as u64).bytes(e.message.as_bytes());
        }
    }
    w.0
}

pub fn decode_response(body: &[u8]) -> Result<Response, BodyError> {
    let mut r = Reader(body);
    let status = r.u16()?;
    let resp = if status == 0 {
        Ok(match r.u8()? {
            0 => Payload::Empty,
            1 => Payload::Handle(r.u64()?),
            2 => Payload::Value(r.bytes()?),
            3 => {
                let n = r.u32()?;
                let mut bs = Vec::new();
                for _ in 0..n {
                    bs.push(r.bytes()?);
                }
                Payload::Buffers(bs)
            }
            k => return Err(BodyError(format!("payload kind {k}"))),
        })
    } else {
        let code = ErrorCode::from_u16(status).ok_or_else(|| BodyError(format!("status {status}")))?;
        let detail = r.u64()? as i64;
        let message = r.string()?;
        Err(WireError { code, detail, message })
    };
    r.finish()?;
    Ok(resp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_roundtrip() {
        let reqs = vec![
            Request::OpenPool { name: "p".into() },
            Request::CreatePool { name: "p".into(), size: 1 << 30 },
            Request::DeletePool { name: "p".into() },
            Request::ClosePool { pool: 5 },
            Request::Put { pool: 1, key: b"k".to_vec(), value: vec![1, 2, 3] },
            Request::Get { pool: 1, key: b"k".to_vec() },
            Request::Erase { pool: 1, key: b"k".to_vec() },
            Request::Resize { pool: 1, key: b"k".to_vec(), new_size: 99 },
            Request::InvokeAdo { pool: 1, key: b"k".to_vec(), request: vec![7], value_size: 128 },
            Request::InvokePutAdo { pool: 1, key: b"k".to_vec(), value: vec![0; 10], request: vec![] },
        ];
        for r in reqs {
            assert_eq!(Request::decode(r.opcode(), &r.encode_body()).unwrap(), r);
            let mut long = r.encode_body();
            long.push(0);
            assert!(Request::decode(r.opcode(), &long).is_err());
        }
    }

    #[test]
    fn response_roundtrip() {
        let rs: Vec<Response> = vec![
            Ok(Payload::Empty),
            Ok(Payload::Handle(42)),
            Ok(Payload::Value(b"abc".to_vec())),
            Ok(Payload::Buffers(vec![vec![], vec![1]])),
            Err(WireError::new(ErrorCode::Plugin, -11, "horizon=5")),
        ];
        for r in rs {
            assert_eq!(decode_response(&encode_response(&r)).unwrap(), r);
        }
    }

    #[test]
    fn store_errors_map_to_codes() {
        let e: WireError = (&StoreError::WrongShard { owner: 2, shard: 1 }).into();
        assert_eq!((e.code, e.detail), (ErrorCode::WrongShard, (2 << 16) | 1));
        let e: WireError = (&StoreError::LockedByAdo(9)).into();
        assert_eq!((e.code, e.detail), (ErrorCode::LockedByAdo, 9));
    }
}
