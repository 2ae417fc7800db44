//! Workload generation, reference oracle, verification suites and
//! experiment drivers for the CDP store.

pub mod crash;
pub mod experiments;
pub mod histogram;
pub mod oracle;
pub mod report;
pub mod spec;
pub mod verify;
pub mod workload;

use ados_core::cdp::CdpError;
use ados_core::store::StoreError;
use ados_proto::cdp_client::CdpClientError;
use ados_proto::{ClientError, ReplicationError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    CdpClient(#[from] CdpClientError),
    #[error(transparent)]
    Cdp(#[from] CdpError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pmem(#[from] ados_core::pmem::PmemError),
    #[error(transparent)]
    Replication(#[from] ReplicationError),
    #[error(transparent)]
    Ado(#[from] ados_core::ado::AdoError),
    #[error("invalid workload spec: {0}")]
    Spec(String),
    #[error("{0}")]
    Other(String),
}
