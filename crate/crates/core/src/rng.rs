//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by `(master seed, stream name, index)`, so results do not
//! depend on scheduling or on how many other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeededRng {
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for the named substream and item index.
    pub fn stream(&self, name: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(name, index))
    }

    /// Child seed for a named substream; useful to hand a whole sub-experiment
    /// its own master seed.
    pub fn derive(&self, name: &str, index: u64) -> u64 {
        let mut h = splitmix64(self.seed ^ 0x5bd1_e995_1234_5678);
        h = splitmix64(h ^ fnv1a(name.as_bytes()));
        splitmix64(h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn child(&self, name: &str, index: u64) -> SeededRng {
        SeededRng::new(self.derive(name, index))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Uniform draw from `[lo, hi)`; returns `lo` when the range is empty.
pub fn uniform(rng: &mut impl rand::Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
