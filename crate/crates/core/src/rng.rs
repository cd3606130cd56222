//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(seed, domain, index)`, so results never depend on call order across
//! samples, steps or worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Keeping them in one place avoids accidental reuse.
pub mod domain {
    pub const DICTIONARY: u64 = 1;
    pub const CODES_TRAIN: u64 = 2;
    pub const CODES_TEST: u64 = 3;
    pub const NOISE_TRAIN: u64 = 4;
    pub const NOISE_TEST: u64 = 5;
    pub const INIT: u64 = 6;
    pub const BATCH: u64 = 7;
    pub const MASK: u64 = 8;
    pub const HEAD: u64 = 9;
    pub const SPLIT: u64 = 10;
    pub const BALANCE: u64 = 11;
    pub const SHUFFLE: u64 = 12;
}

/// Independent generator for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
