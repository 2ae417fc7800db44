//! Declarative workload description read from TOML.

use ados_core::cdp::{records_for_bytes, MIB};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ado,
    PlainKv,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Ado => "ado",
            Mode::PlainKv => "plain_kv",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub seed: u64,
    /// Volumes owned by each client thread.
    pub volumes: usize,
    pub blocks_per_volume: u64,
    pub span_min: u64,
    pub span_max: u64,
    /// Client threads per shard (or per replica group).
    pub threads: usize,
    /// Updates issued by each client thread.
    pub updates: u64,
    /// When set, threads stop after this many seconds instead.
    pub duration_s: Option<f64>,
    pub modes: Vec<Mode>,
    pub replication: Vec<usize>,
    pub shards: Vec<usize>,
    pub quantum_mib: Vec<u64>,
    /// Records in a 4 MiB quantum; other sizes scale proportionally.
    /// Unset means the true size (65,536 records per 4 MiB).
    pub quantum_records: Option<u64>,
    pub retention: u64,
    /// Use a counter instead of wall-clock nanoseconds for timestamps.
    pub synthetic_clock: bool,
    /// Probes per kind and quantum size in the query-latency experiment.
    pub queries: usize,
    pub query_blocks: u64,
    pub query_interval_ms: u64,
    /// Outstanding invocations while preloading volumes.
    pub pipeline: usize,
    pub sample_every: u64,
    pub crash_points: usize,
    pub process_crash_points: usize,
    /// Plugin heap growth step.
    pub chunk_mib: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            seed: 1,
            volumes: 4,
            blocks_per_volume: 1_000_000,
            span_min: 1,
            span_max: 100,
            threads: 1,
            updates: 100_000,
            duration_s: None,
            modes: vec![Mode::Ado],
            replication: vec![1],
            shards: vec![1, 2, 4],
            quantum_mib: vec![4],
            quantum_records: None,
            retention: 10,
            synthetic_clock: true,
            queries: 20,
            query_blocks: 100_000,
            query_interval_ms: 250,
            pipeline: 64,
            sample_every: 12_500,
            crash_points: 200,
            process_crash_points: 3,
            chunk_mib: 64,
        }
    }
}

impl WorkloadSpec {
    pub fn parse(text: &str) -> Result<WorkloadSpec, String> {
        let s: WorkloadSpec = toml::from_str(text).map_err(|e| e.to_string())?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.span_min == 0 || self.span_min > self.span_max {
            return Err(format!("bad span range {}..={}", self.span_min, self.span_max));
        }
        if self.span_max > self.blocks_per_volume {
            return Err("span_max exceeds blocks_per_volume".into());
        }
        if self.volumes == 0 || self.threads == 0 {
            return Err("volumes and threads must be positive".into());
        }
        if self.sample_every == 0 || self.pipeline == 0 {
            return Err("sample_every and pipeline must be positive".into());
        }
        if self.quantum_mib.contains(&0) || self.quantum_records == Some(0) {
            return Err("quantum sizes must be positive".into());
        }
        if self.replication.contains(&0) || self.shards.contains(&0) {
            return Err("shard and replica counts must be positive".into());
        }
        Ok(())
    }

    /// Quantum capacity in records for a quantum of `mib` MiB.
    pub fn capacity(&self, mib: u64) -> u64 {
        match self.quantum_records {
            Some(r) => (r * mib / 4).max(1),
            None => records_for_bytes(mib * MIB),
        }
    }
}
