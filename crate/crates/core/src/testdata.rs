//! Seeded pseudo-random payloads used as benchmark source objects.

use bytes::Bytes;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::digest::{Adler32, Digest};

pub const PATTERN_CHUNK: usize = 64 * 1024;

/// Deterministic byte stream of a fixed length. The same `(size, seed)`
/// always produces the same bytes.
pub struct TestPattern {
    rng: ChaCha8Rng,
    remaining: u64,
}

impl TestPattern {
    pub fn new(size: u64, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            remaining: size,
        }
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }
}

impl Iterator for TestPattern {
    type Item = Bytes;

    fn next(&mut self) -> Option<Bytes> {
        if self.remaining == 0 {
            return None;
        }
        let n = self.remaining.min(PATTERN_CHUNK as u64) as usize;
        let mut buf = vec![0u8; n];
        self.rng.fill_bytes(&mut buf);
        self.remaining -= n as u64;
        Some(Bytes::from(buf))
    }
}

/// Digest of a pattern computed without materialising it.
pub fn pattern_digest(size: u64, seed: u64) -> Digest {
    let mut state = Adler32::new();
    for chunk in TestPattern::new(size, seed) {
        state.update(&chunk);
    }
    state.finish()
}
