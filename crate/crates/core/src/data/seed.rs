//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream seeded by a
//! 64-bit value derived here. The mixing function is the SplitMix64
//! finalizer:
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
//! z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//! z =  z ^ (z >> 31)
//! ```
//!
//! and a derived seed folds each component in turn:
//! `h = mix(seed + 0x9e3779b97f4a7c15)`, then `h = mix(h ^ part)` per part.
//! `mix` is a bijection on `u64`, so two derivations that differ only in
//! their last part never collide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Domain;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

pub const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(seed.wrapping_add(GOLDEN)), |h, &p| mix64(h ^ p))
}

/// Seed of one augmented view: `(seed, domain, image index, view)`.
pub fn view_seed(seed: u64, domain: Domain, index: usize, view: usize) -> u64 {
    derive(seed, &[domain.tag(), index as u64, view as u64])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags for the different consumers of a run seed.
pub mod tags {
    pub const SAMPLER: u64 = 0x5341_4d50;
    pub const STEP: u64 = 0x5354_4550;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHIFT: u64 = 0x5348_4654;
    pub const DIGITS: u64 = 0x4447_5453;
    pub const EVAL: u64 = 0x4556_414c;
    pub const TRANSFORM: u64 = 0x5846_524d;
}
