//! Client-driven replication. The writer sends each invocation to every
//! replica and does not send the next one until all have acknowledged.
//! A replica that fails to answer stalls the writer for good; failover
//! and reconciliation are left to the operator.

use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::message::{Request, Response};

pub struct Replica {
    pub client: Client,
    pub pool: u64,
}

#[derive(Debug, Error)]
pub enum ReplicationError {
    #[error("replicas unavailable: {}", describe(.failures))]
    ReplicaUnavailable { failures: Vec<(usize, ClientError)> },
    #[error("writer stalled after replica {0} failed")]
    Stalled(usize),
}

fn describe(f: &[(usize, ClientError)]) -> String {
    f.iter().map(|(i, e)| format!("#{i}: {e}")).collect::<Vec<_>>().join(", ")
}

pub struct ReplicaSet {
    replicas: Vec<Replica>,
    stalled: Option<usize>,
    acknowledged: u64,
}

impl ReplicaSet {
    pub fn new(replicas: Vec<Replica>) -> ReplicaSet {
        assert!(!replicas.is_empty(), "a replica set needs at least one replica");
        ReplicaSet { replicas, stalled: None, acknowledged: 0 }
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn replicas_mut(&mut self) -> &mut [Replica] {
        &mut self.replicas
    }

    /// Invocations acknowledged by every replica.
    pub fn acknowledged(&self) -> u64 {
        self.acknowledged
    }

    pub fn stalled(&self) -> Option<usize> {
        self.stalled
    }

    /// Sends one invocation to all replicas and waits for every answer.
    /// Returns each replica's response, in replica order.
    pub fn invoke(&mut self, key: &[u8], request: &[u8], flags: u16, value_size: u64) -> Result<Vec<Response>, ReplicationError> {
        if let Some(i) = self.stalled {
            return Err(ReplicationError::Stalled(i));
        }
        let mut failures = Vec::new();
        let mut sent = Vec::with_capacity(self.replicas.len());
        for (i, r) in self.replicas.iter_mut().enumerate() {
            let req = Request::InvokeAdo { pool: r.pool, key: key.to_vec(), request: request.to_vec(), value_size };
            match r.client.send(&req, flags) {
                Ok(id) => sent.push(Some(id)),
                Err(e) => {
                    failures.push((i, e));
                    sent.push(None);
                }
            }
        }
        let mut out = Vec::with_capacity(self.replicas.len());
        for (i, r) in self.replicas.iter_mut().enumerate() {
            let Some(id) = sent[i] else { continue };
            match r.client.recv() {
                Ok((got, resp)) if got == id => out.push(resp),
                Ok((got, _)) => failures.push((i, ClientError::Protocol(format!("response for {got}, expected {id}")))),
                Err(e) => failures.push((i, e)),
            }
        }
        if let Some((i, _)) = failures.first() {
            self.stalled = Some(*i);
            return Err(ReplicationError::ReplicaUnavailable { failures });
        }
        self.acknowledged += 1;
        Ok(out)
    }
}
