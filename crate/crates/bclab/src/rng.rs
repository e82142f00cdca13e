//! Seed plumbing.
//!
//! All randomness in the crate flows through ChaCha streams keyed by 64-bit
//! seeds, so any run is bit-reproducible from its seed regardless of
//! platform or thread scheduling. Sub-seeds are derived with SplitMix64 so
//! that independent components (data generation, per-sample noise, episode
//! resets) never share a stream by accident.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a master seed and a stream label.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h = seed;
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h)
}

/// Derive a sub-seed from a master seed and an index.
pub fn derive_idx(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// The crate's standard RNG, constructed from a 64-bit seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
