//! Seed derivation.
//!
//! Every random quantity in the crate is drawn from a generator whose seed is
//! a pure function of the user seed and a path of integer keys, e.g.
//! `(seed, EBP_DRAW, area, draw)`. Jobs can therefore run in any order, on any
//! number of threads, and still reproduce the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags for the first key of a derivation path.
pub mod stream {
    pub const EBP_DRAW: u64 = 1;
    pub const BOOT_SAMPLE: u64 = 2;
    pub const STANDARD_POP: u64 = 3;
    pub const STANDARD_DRAW: u64 = 4;
    pub const PARAM_BOOT: u64 = 5;
    pub const SIM_REPLICATE: u64 = 6;
    pub const SIM_COVARIATES: u64 = 7;
    pub const SIM_POPULATION: u64 = 8;
    pub const SIM_SAMPLE: u64 = 9;
    pub const SIM_PIPELINE: u64 = 10;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a path of keys into a child seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn rng_for(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

/// Area ids are signed; keys are not.
pub fn area_key(area_id: i64) -> u64 {
    area_id as u64
}
