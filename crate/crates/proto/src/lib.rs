//! Wire protocol, shard server runtime, client library and client-driven
//! replication for the ADO key-value store.

pub mod cdp_client;
pub mod client;
pub mod frame;
pub mod message;
pub mod replica;
pub mod server;
pub mod transport;

pub use client::{Client, ClientError, ClientStats, RemotePool};
pub use frame::{Frame, FrameError, Opcode};
pub use message::{ErrorCode, Payload, Request, Response, WireError};
pub use replica::{Replica, ReplicaSet, ReplicationError};
pub use server::{Server, ServerConfig, ShardConfig, ShardHandle};
