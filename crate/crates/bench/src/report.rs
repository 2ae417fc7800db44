//! Experiment reports: one JSON summary plus one CSV per table.

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::histogram::{Bucket, LogHistogram};
use crate::spec::WorkloadSpec;

/// Bumped whenever a column or field changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunResult {
    pub label: String,
    pub mode: String,
    pub shards: usize,
    pub replication: usize,
    pub threads: usize,
    pub updates: u64,
    pub seconds: f64,
    pub updates_per_s: f64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    /// Client round trips during the update phase.
    pub round_trips: u64,
    /// Plain-KV traffic beyond the per-update record puts.
    pub extra_puts: u64,
    pub erases: u64,
}

impl RunResult {
    pub fn round_trips_per_update(&self) -> f64 {
        if self.updates == 0 {
            0.0
        } else {
            self.round_trips as f64 / self.updates as f64
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ThroughputSample {
    pub label: String,
    pub index: usize,
    pub updates: u64,
    pub elapsed_s: f64,
    pub updates_per_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencySummary {
    pub label: String,
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    pub buckets: Vec<Bucket>,
}

impl LatencySummary {
    pub fn new(label: &str, h: &LogHistogram) -> LatencySummary {
        LatencySummary {
            label: label.into(),
            count: h.count(),
            mean_us: h.mean_us(),
            p50_us: h.quantile_us(0.5),
            p99_us: h.quantile_us(0.99),
            max_us: h.max_us(),
            buckets: h.buckets(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct QuerySample {
    pub label: String,
    pub quantum_mib: u64,
    /// `end`, `boundary`, `random`, `empty` or `load`.
    pub kind: String,
    pub t: u64,
    pub entries: u64,
    pub ms: f64,
    /// Seconds since the run started when the query completed.
    pub completed_at_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FootprintRow {
    pub mode: String,
    pub updates: u64,
    pub client_volatile_bytes: u64,
    pub server_volatile_bytes: u64,
    pub server_persistent_bytes: u64,
    pub pairs: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CrashRow {
    pub point: u64,
    pub phase: String,
    pub policy: String,
    pub recovered_updates: u64,
    pub acknowledged_updates: u64,
    pub probes: u64,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub experiment: String,
    pub spec: WorkloadSpec,
    pub runs: Vec<RunResult>,
    pub throughput: Vec<ThroughputSample>,
    pub latency: Vec<LatencySummary>,
    pub queries: Vec<QuerySample>,
    pub footprint: Vec<FootprintRow>,
    pub crash: Vec<CrashRow>,
    pub checks: Vec<Check>,
}

#[derive(Serialize)]
struct BucketRow<'a> {
    label: &'a str,
    lower_us: f64,
    upper_us: f64,
    count: u64,
}

impl Report {
    pub fn new(experiment: &str, spec: &WorkloadSpec) -> Report {
        Report {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.into(),
            spec: spec.clone(),
            runs: Vec::new(),
            throughput: Vec::new(),
            latency: Vec::new(),
            queries: Vec::new(),
            footprint: Vec::new(),
            crash: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Writes `report.json` and the non-empty CSV tables into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        write_csv(&dir.join("runs.csv"), &self.runs)?;
        write_csv(&dir.join("throughput.csv"), &self.throughput)?;
        let buckets: Vec<BucketRow> = self
            .latency
            .iter()
            .flat_map(|l| {
                l.buckets.iter().map(|b| BucketRow { label: &l.label, lower_us: b.lower_us, upper_us: b.upper_us, count: b.count })
            })
            .collect();
        write_csv(&dir.join("latency.csv"), &buckets)?;
        write_csv(&dir.join("queries.csv"), &self.queries)?;
        write_csv(&dir.join("footprint.csv"), &self.footprint)?;
        write_csv(&dir.join("crash.csv"), &self.crash)?;
        write_csv(&dir.join("checks.csv"), &self.checks)?;
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

/// Shared update counter that timestamps every `every`-th update.
pub struct Sampler {
    start: Instant,
    every: u64,
    count: std::sync::atomic::AtomicU64,
    marks: Mutex<Vec<(u64, f64)>>,
}

impl Sampler {
    pub fn new(every: u64) -> Sampler {
        Sampler { start: Instant::now(), every, count: 0.into(), marks: Mutex::new(Vec::new()) }
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    pub fn tick(&self) {
        let n = self.count.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        if n.is_multiple_of(self.every) {
            let at = self.start.elapsed().as_secs_f64();
            self.marks.lock().unwrap().push((n, at));
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(std::sync::atomic::Ordering::Relaxed)
    }

    /// Throughput over each interval of `every` updates.
    pub fn samples(&self, label: &str) -> Vec<ThroughputSample> {
        let mut marks = self.marks.lock().unwrap().clone();
        marks.sort_by_key(|a| a.0);
        let mut prev = 0.0;
        marks
            .into_iter()
            .enumerate()
            .map(|(index, (updates, at))| {
                let dt = (at - prev).max(1e-9);
                prev = at;
                ThroughputSample { label: label.into(), index, updates, elapsed_s: at, updates_per_s: self.every as f64 / dt }
            })
            .collect()
    }
}
