//! Seeded random sources.
//!
//! Every stochastic component takes an explicit `u64` seed and builds a
//! ChaCha8 stream from it, so runs are reproducible across platforms and
//! `rand` releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent child seed from a parent seed and a stream label.
///
/// SplitMix64 finalizer over `seed ^ label * golden`, which decorrelates
/// nearby parents and labels.
pub fn derive(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream labels used with [`derive`].
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const PROMOTED: u64 = 2;
    pub const MF: u64 = 3;
    pub const BPR: u64 = 4;
    pub const TREE: u64 = 5;
    pub const SRU: u64 = 6;
    pub const POLICY: u64 = 7;
    pub const AGENT: u64 = 8;
    pub const EPISODE: u64 = 9;
    pub const FINE_TUNE: u64 = 10;
    pub const BASELINE: u64 = 11;
    pub const EVAL: u64 = 12;
}
