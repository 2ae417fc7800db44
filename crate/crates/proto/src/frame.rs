//! Length-prefixed frames:
//!
//! ```text
//! length u32 LE | version u8 | opcode u8 | flags u16 LE | request_id u64 LE | body
//! ```
//!
//! `length` counts every byte after the length field.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const VERSION: u8 = 1;
/// Bytes covered by `length` before the body.
pub const FIXED_LEN: u32 = 12;
pub const HEADER_LEN: usize = 4 + FIXED_LEN as usize;
pub const MAX_BODY: u32 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    OpenPool = 1,
    CreatePool = 2,
    DeletePool = 3,
    Put = 4,
    Get = 5,
    Erase = 6,
    Resize = 7,
    InvokeAdo = 8,
    InvokePutAdo = 9,
    Response = 10,
    ClosePool = 11,
}

impl Opcode {
    pub const ALL: [Opcode; 11] = [
        Opcode::OpenPool,
        Opcode::CreatePool,
        Opcode::DeletePool,
        Opcode::Put,
        Opcode::Get,
        Opcode::Erase,
        Opcode::Resize,
        Opcode::InvokeAdo,
        Opcode::InvokePutAdo,
        Opcode::Response,
        Opcode::ClosePool,
    ];

    pub fn from_u8(b: u8) -> Option<Opcode> {
        Opcode::ALL.get(usize::from(b).wrapping_sub(1)).copied()
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame length {0} out of range")]
    Length(u32),
    #[error("unsupported protocol version {version}")]
    Version { version: u8, request_id: u64 },
    #[error("unknown opcode {opcode}")]
    Opcode { opcode: u8, request_id: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FrameError {
    /// Request id of a well-delimited frame that failed validation; such
    /// frames get an error response and the connection survives.
    pub fn recoverable(&self) -> Option<u64> {
        match *self {
            FrameError::Version { request_id, .. } | FrameError::Opcode { request_id, .. } => Some(request_id),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub opcode: Opcode,
    pub flags: u16,
    pub request_id: u64,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: Opcode, flags: u16, request_id: u64, body: Vec<u8>) -> Frame {
        Frame { opcode, flags, request_id, body }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(FIXED_LEN + self.body.len() as u32).to_le_bytes());
        out.push(VERSION);
        out.push(self.opcode as u8);
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&self.body);
    }

    /// Decodes one frame from the front of `buf`. Returns `Ok(None)` when
    /// more bytes are needed, otherwise the frame and bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, FrameError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(buf[..4].try_into().unwrap());
        check_length(len)?;
        let total = 4 + len as usize;
        if buf.len() < total {
            return Ok(None);
        }
        Ok(Some((parse(&buf[4..total])?, total)))
    }
}

fn check_length(len: u32) -> Result<(), FrameError> {
    if !(FIXED_LEN..=FIXED_LEN + MAX_BODY).contains(&len) {
        return Err(FrameError::Length(len));
    }
    Ok(())
}

fn parse(b: &[u8]) -> Result<Frame, FrameError> {
    let request_id = u64::from_le_bytes(b[4..12].try_into().unwrap());
    if b[0] != VERSION {
        return Err(FrameError::Version { version: b[0], request_id });
    }
    let opcode = Opcode::from_u8(b[1]).ok_or(FrameError::Opcode { opcode: b[1], request_id })?;
    Ok(Frame { opcode, flags: u16::from_le_bytes([b[2], b[3]]), request_id, body: b[12..].to_vec() })
}

/// Reads one frame. `Ok(None)` on a clean end of stream between frames.
/// After a recoverable error the stream is positioned at the next frame.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, FrameError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len);
    check_length(len)?;
    let mut rest = vec![0u8; len as usize];
    r.read_exact(&mut rest)?;
    parse(&rest).map(Some)
}

pub fn write_frame(w: &mut impl Write, f: &Frame) -> io::Result<()> {
    w.write_all(&f.encode())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let f = Frame::new(Opcode::Put, 0x0102, 0x1122334455667788, vec![9, 8]);
        let b = f.encode();
        assert_eq!(&b[..4], &14u32.to_le_bytes());
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 4);
        assert_eq!(&b[6..8], &[2, 1]);
        assert_eq!(&b[8..16], &0x1122334455667788u64.to_le_bytes());
        assert_eq!(&b[16..], &[9, 8]);
        assert_eq!(Frame::decode(&b).unwrap(), Some((f, 18)));
    }

    #[test]
    fn partial_and_bad_frames() {
        let b = Frame::new(Opcode::Get, 0, 7, vec![1, 2, 3]).encode();
        for cut in 0..b.len() {
            assert_eq!(Frame::decode(&b[..cut]).unwrap(), None);
        }
        let mut bad = b.clone();
        bad[5] = 99;
        assert!(matches!(Frame::decode(&bad), Err(FrameError::Opcode { opcode: 99, request_id: 7 })));
        bad[5] = 0;
        assert!(matches!(Frame::decode(&bad), Err(FrameError::Opcode { opcode: 0, .. })));
        let mut bad = b.clone();
        bad[4] = 2;
        assert_eq!(Frame::decode(&bad).unwrap_err().recoverable(), Some(7));
        let mut bad = b;
        bad[..4].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(Frame::decode(&bad), Err(FrameError::Length(3))));
    }

    #[test]
    fn stream_reads_in_sequence() {
        let mut buf = Vec::new();
        for i in 0..5 {
            write_frame(&mut buf, &Frame::new(Opcode::Response, 0, i, vec![i as u8; i as usize])).unwrap();
        }
        let mut r = &buf[..];
        for i in 0..5 {
            assert_eq!(read_frame(&mut r).unwrap().unwrap().request_id, i);
        }
        assert!(read_frame(&mut r).unwrap().is_none());
    }
}
