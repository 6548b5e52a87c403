//! Deterministic, splittable RNG streams.
//!
//! Every random decision in the library flows from one master seed. Distinct
//! purposes (episode sampling, test support draws, weight init, ...) get
//! independent streams derived by hashing the purpose tags into the seed, so
//! adding a consumer in one place never shifts the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Master seed from which all streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

// FNV-1a, 64-bit: stable across platforms and Rust releases.
pub(crate) fn fnv1a(init: u64, bytes: &[u8]) -> u64 {
    let mut h = init ^ 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive the stream seed for a (purpose, indices) address.
    pub fn derive(&self, purpose: &str, indices: &[u64]) -> u64 {
        let mut h = fnv1a(self.seed, purpose.as_bytes());
        for &i in indices {
            h = fnv1a(h, &i.to_le_bytes());
        }
        h
    }

    /// RNG stream for a (purpose, indices) address.
    pub fn stream(&self, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(purpose, indices))
    }
}
