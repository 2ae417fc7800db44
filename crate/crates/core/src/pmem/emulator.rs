//! Write-back cache model used for crash injection.
//!
//! The emulator keeps two images of the region: `volatile` is what loads
//! observe, `durable` is what survives a power failure. Stores land in
//! `volatile` and mark their 8-byte words dirty; `persist` copies dirty
//! words in a range into `durable`. When a crash is taken, every still
//! dirty word is independently kept or dropped, so an aligned 8-byte store
//! is never torn but unflushed data may be lost in any combination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What happens to unpersisted words when the crash is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropPolicy {
    /// Every unpersisted word is lost.
    DropAll,
    /// Every unpersisted word happened to be written back.
    KeepAll,
    /// Each unpersisted word is kept with probability 1/2.
    Random,
}

/// Crash injected just before durability event number `at_event` (0-based)
/// takes effect. Events are `persist` calls and atomic 8-byte stores.
#[derive(Clone, Copy, Debug)]
pub struct CrashPlan {
    pub at_event: u64,
    pub seed: u64,
    pub policy: DropPolicy,
}

pub struct CrashEmulator {
    volatile: Vec<u8>,
    durable: Vec<u8>,
    dirty: Vec<u64>,
    events: u64,
    plan: Option<CrashPlan>,
    image: Option<Vec<u8>>,
}

impl CrashEmulator {
    pub fn new(initial: Vec<u8>) -> Self {
        let words = initial.len().div_ceil(8);
        CrashEmulator {
            durable: initial.clone(),
            volatile: initial,
            dirty: vec![0; words.div_ceil(64)],
            events: 0,
            plan: None,
            image: None,
        }
    }

    pub fn set_plan(&mut self, plan: Option<CrashPlan>) {
        self.plan = plan;
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn crashed(&self) -> bool {
        self.image.is_some()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.volatile
    }

    pub fn write(&mut self, offset: usize, data: &[u8]) {
        self.volatile[offset..offset + data.len()].copy_from_slice(data);
        self.mark_dirty(offset, data.len());
    }

    pub fn fill(&mut self, offset: usize, len: usize, byte: u8) {
        self.volatile[offset..offset + len].fill(byte);
        self.mark_dirty(offset, len);
    }

    fn mark_dirty(&mut self, offset: usize, len: usize) {
        if len == 0 {
            return;
        }
        let first = offset / 8;
        let last = (offset + len - 1) / 8;
        for w in first..=last {
            self.dirty[w / 64] |= 1 << (w % 64);
        }
    }

    /// Counts one durability event, taking the crash image first when the
    /// plan says this event is the crash point.
    pub fn event(&mut self) {
        if let Some(plan) = self.plan {
            if self.image.is_none() && self.events == plan.at_event {
                self.image = Some(self.snapshot(plan.seed, plan.policy));
            }
        }
        self.events += 1;
    }

    pub fn persist(&mut self, offset: usize, len: usize) {
        self.event();
        if self.image.is_some() || len == 0 {
            // After the crash point nothing else reaches the media. The
            // volatile side keeps running so callers finish normally.
            return;
        }
        let first = offset / 8;
        let last = (offset + len - 1) / 8;
        for w in first..=last {
            let bit = 1u64 << (w % 64);
            if self.dirty[w / 64] & bit != 0 {
                self.dirty[w / 64] &= !bit;
                let lo = w * 8;
                let hi = (lo + 8).min(self.volatile.len());
                self.durable[lo..hi].copy_from_slice(&self.volatile[lo..hi]);
            }
        }
    }

    fn snapshot(&self, seed: u64, policy: DropPolicy) -> Vec<u8> {
        let mut image = self.durable.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, &bits) in self.dirty.iter().enumerate() {
            let mut bits = bits;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let keep = match policy {
                    DropPolicy::DropAll => false,
                    DropPolicy::KeepAll => true,
                    DropPolicy::Random => rng.gen_bool(0.5),
                };
                if keep {
                    let lo = (i * 64 + b) * 8;
                    let hi = (lo + 8).min(image.len());
                    image[lo..hi].copy_from_slice(&self.volatile[lo..hi]);
                }
            }
        }
        image
    }

    /// The media contents at the crash point, or, if the planned crash was
    /// never reached, a crash taken now.
    pub fn crash_image(&self) -> Vec<u8> {
        match (&self.image, self.plan) {
            (Some(img), _) => img.clone(),
            (None, Some(plan)) => self.snapshot(plan.seed, plan.policy),
            (None, None) => self.snapshot(0, DropPolicy::DropAll),
        }
    }

    /// Durable image of a clean shutdown (everything written back).
    pub fn clean_image(&self) -> Vec<u8> {
        self.volatile.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persisted_word_survives() {
        let mut e = CrashEmulator::new(vec![0; 64]);
        e.write(8, &[1; 8]);
        e.persist(8, 8);
        e.set_plan(Some(CrashPlan { at_event: 1, seed: 1, policy: DropPolicy::DropAll }));
        e.write(16, &[2; 8]);
        e.persist(16, 8);
        let img = e.crash_image();
        assert_eq!(&img[8..16], &[1; 8]);
        assert_eq!(&img[16..24], &[0; 8]);
    }

    #[test]
    fn unpersisted_word_may_survive_or_not() {
        let mut seen = [false; 2];
        for seed in 0..64 {
            let mut e = CrashEmulator::new(vec![0; 64]);
            e.set_plan(Some(CrashPlan { at_event: 0, seed, policy: DropPolicy::Random }));
            e.write(0, &0xAAAA_AAAA_AAAA_AAAAu64.to_le_bytes());
            e.persist(0, 8);
            let img = e.crash_image();
            let w = u64::from_le_bytes(img[0..8].try_into().unwrap());
            // never torn
            assert!(w == 0 || w == 0xAAAA_AAAA_AAAA_AAAA);
            seen[(w != 0) as usize] = true;
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn nothing_reaches_media_after_crash() {
        let mut e = CrashEmulator::new(vec![0; 32]);
        e.set_plan(Some(CrashPlan { at_event: 0, seed: 0, policy: DropPolicy::DropAll }));
        e.write(0, &[9; 8]);
        e.persist(0, 8);
        e.write(8, &[9; 8]);
        e.persist(8, 8);
        assert!(e.crashed());
        assert_eq!(e.crash_image(), vec![0; 32]);
        assert_eq!(&e.bytes()[0..16], &[9; 16]);
    }
}
