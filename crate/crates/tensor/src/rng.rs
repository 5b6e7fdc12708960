//! Seeded, platform-independent randomness.
//!
//! Every random draw in the workspace comes from a ChaCha8 stream whose key
//! is derived from a root seed and a list of stream tags through SplitMix64
//! finalization. Streams for different purposes (initialization, epoch
//! shuffles, per-sample noise) never share state, so adding draws in one
//! place does not shift the draws in another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use rand::Rng;

pub type StreamRng = ChaCha8Rng;

pub const ALGORITHM: &str = "chacha8/splitmix64";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    /// Independent generator for the stream identified by `tags`.
    pub fn stream(&self, tags: &[u64]) -> StreamRng {
        let mut key = splitmix64(self.seed);
        for &t in tags {
            key = splitmix64(key ^ splitmix64(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        }
        ChaCha8Rng::seed_from_u64(key)
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Stable string tag → stream tag (FNV-1a).
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
