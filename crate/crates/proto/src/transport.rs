//! Client-side transports. Both carry encoded frames; the in-process one
//! hands them to the shard thread directly instead of through a socket.

use std::io::{self, BufReader};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};

use crate::client::ClientError;
use crate::frame::{read_frame, write_frame, Frame, FrameError};
use crate::server::ShardMsg;

pub trait Transport: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), ClientError>;
    /// Next frame from the server; `None` timeout blocks indefinitely.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Frame, ClientError>;
}

pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<TcpTransport> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(TcpTransport { writer: s.try_clone()?, reader: BufReader::new(s) })
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), ClientError> {
        write_frame(&mut self.writer, frame).map_err(ClientError::Io)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Frame, ClientError> {
        self.reader.get_ref().set_read_timeout(timeout).map_err(ClientError::Io)?;
        match read_frame(&mut self.reader) {
            Ok(Some(f)) => Ok(f),
            Ok(None) => Err(ClientError::Io(io::ErrorKind::UnexpectedEof.into())),
            Err(FrameError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Err(ClientError::Timeout)
            }
            Err(FrameError::Io(e)) => Err(ClientError::Io(e)),
            Err(e) => Err(ClientError::Protocol(e.to_string())),
        }
    }
}

pub struct LocalTransport {
    conn: u64,
    inbox: Sender<ShardMsg>,
    replies: Receiver<Vec<u8>>,
}

impl LocalTransport {
    pub(crate) fn new(conn: u64, inbox: Sender<ShardMsg>, replies: Receiver<Vec<u8>>) -> Self {
        LocalTransport { conn, inbox, replies }
    }
}

fn stopped() -> ClientError {
    ClientError::Io(io::Error::new(io::ErrorKind::BrokenPipe, "shard stopped"))
}

impl Transport for LocalTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), ClientError> {
        self.inbox.send(ShardMsg::Frame { conn: self.conn, frame: frame.clone() }).map_err(|_| stopped())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Frame, ClientError> {
        let bytes = match timeout {
            Some(t) => self.replies.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => ClientError::Timeout,
                RecvTimeoutError::Disconnected => stopped(),
            })?,
            None => self.replies.recv().map_err(|_| stopped())?,
        };
        match Frame::decode(&bytes) {
            Ok(Some((f, _))) => Ok(f),
            Ok(None) => Err(ClientError::Protocol("truncated frame".into())),
            Err(e) => Err(ClientError::Protocol(e.to_string())),
        }
    }
}

impl Drop for LocalTransport {
    fn drop(&mut self) {
        let _ = self.inbox.send(ShardMsg::Disconnect { conn: self.conn });
    }
}
