//! Seeded update streams. Equal seeds give equal streams.

use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::spec::WorkloadSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Update {
    pub volume: usize,
    pub virtual_offset: u64,
    pub length: u64,
    pub managed_offset: u64,
    pub timestamp: u64,
}

/// Nanosecond timestamps, strictly increasing.
pub struct Clock {
    synthetic: bool,
    last: u64,
}

impl Clock {
    pub fn new(synthetic: bool) -> Clock {
        Clock { synthetic, last: 0 }
    }

    pub fn now(&mut self) -> u64 {
        let t = if self.synthetic {
            self.last + 1_000
        } else {
            let wall = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
            wall.max(self.last + 1)
        };
        self.last = t;
        t
    }
}

/// Stream of updates for one client thread. Volumes are written round
/// robin; managed offsets come from a per-volume append cursor.
pub struct Generator {
    rng: ChaCha8Rng,
    clock: Clock,
    volumes: usize,
    blocks: u64,
    span: (u64, u64),
    next_managed: Vec<u64>,
    issued: u64,
}

impl Generator {
    pub fn new(spec: &WorkloadSpec, stream: u64) -> Generator {
        Generator::with_shape(spec.seed, stream, spec.volumes, spec.blocks_per_volume, (spec.span_min, spec.span_max), spec.synthetic_clock)
    }

    pub fn with_shape(seed: u64, stream: u64, volumes: usize, blocks: u64, span: (u64, u64), synthetic: bool) -> Generator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Generator { rng, clock: Clock::new(synthetic), volumes, blocks, span, next_managed: vec![0; volumes], issued: 0 }
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    pub fn next_update(&mut self) -> Update {
        let volume = (self.issued % self.volumes as u64) as usize;
        self.issued += 1;
        let length = self.rng.gen_range(self.span.0..=self.span.1);
        let virtual_offset = self.rng.gen_range(0..=self.blocks - length);
        let managed_offset = self.next_managed[volume];
        self.next_managed[volume] += length;
        Update { volume, virtual_offset, length, managed_offset, timestamp: self.clock.now() }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

pub fn volume_tag(thread: usize, volume: usize) -> String {
    format!("t{thread}v{volume}")
}
