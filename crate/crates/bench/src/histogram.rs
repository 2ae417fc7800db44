//! Latency histogram with log-spaced buckets from 1 µs to 1 s.

use std::time::Duration;

use serde::Serialize;

/// Buckets per factor of ten.
pub const PER_DECADE: usize = 10;
pub const DECADES: usize = 6;
const LOWEST_NS: f64 = 1_000.0;
/// Bucket 0 holds samples under 1 µs, the last one samples of 1 s or more.
pub const BUCKETS: usize = PER_DECADE * DECADES + 2;

#[derive(Clone, Debug)]
pub struct LogHistogram {
    counts: Vec<u64>,
    count: u64,
    sum_ns: u128,
    min_ns: u64,
    max_ns: u64,
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct Bucket {
    pub lower_us: f64,
    pub upper_us: f64,
    pub count: u64,
}

impl Default for LogHistogram {
    fn default() -> Self {
        LogHistogram { counts: vec![0; BUCKETS], count: 0, sum_ns: 0, min_ns: u64::MAX, max_ns: 0 }
    }
}

fn edge_ns(i: usize) -> f64 {
    match i {
        0 => 0.0,
        _ if i >= BUCKETS => f64::INFINITY,
        _ => LOWEST_NS * 10f64.powf((i - 1) as f64 / PER_DECADE as f64),
    }
}

pub fn bucket_of(ns: u64) -> usize {
    if (ns as f64) < LOWEST_NS {
        return 0;
    }
    let i = 1 + ((ns as f64 / LOWEST_NS).log10() * PER_DECADE as f64 + 1e-9).floor() as usize;
    i.min(BUCKETS - 1)
}

impl LogHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, d: Duration) {
        self.record_ns(d.as_nanos().min(u64::MAX as u128) as u64);
    }

    pub fn record_ns(&mut self, ns: u64) {
        self.counts[bucket_of(ns)] += 1;
        self.count += 1;
        self.sum_ns += ns as u128;
        self.min_ns = self.min_ns.min(ns);
        self.max_ns = self.max_ns.max(ns);
    }

    pub fn merge(&mut self, other: &LogHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.count += other.count;
        self.sum_ns += other.sum_ns;
        self.min_ns = self.min_ns.min(other.min_ns);
        self.max_ns = self.max_ns.max(other.max_ns);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean_us(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.sum_ns as f64 / self.count as f64 / 1_000.0
    }

    pub fn max_us(&self) -> f64 {
        self.max_ns as f64 / 1_000.0
    }

    /// Upper edge of the bucket holding the `q`-quantile, capped at the
    /// largest sample.
    pub fn quantile_us(&self, q: f64) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let rank = ((q * self.count as f64).ceil() as u64).clamp(1, self.count);
        let mut seen = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return edge_ns(i + 1).min(self.max_ns as f64) / 1_000.0;
            }
        }
        self.max_us()
    }

    pub fn buckets(&self) -> Vec<Bucket> {
        (0..BUCKETS)
            .map(|i| Bucket { lower_us: edge_ns(i) / 1_000.0, upper_us: edge_ns(i + 1) / 1_000.0, count: self.counts[i] })
            .collect()
    }
}
