//! Counter-based seed derivation.
//!
//! A master seed expands into independent child seeds by hashing
//! `(parent, counter)` pairs with SplitMix64. Children depend only on the path
//! of counters, never on the order in which they are requested, so sweeps and
//! bootstrap replicates can run in any order and still reproduce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags used by the pipelines. Kept stable: changing one changes every
/// downstream output for a given master seed.
pub mod stage {
    pub const SIMULATE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
    pub const TEST_POINTS: u64 = 4;
    pub const ORACLE: u64 = 5;
    pub const GROUP_ORACLE: u64 = 6;
    pub const CELL: u64 = 7;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `counter` under `parent`.
#[inline]
pub fn child(parent: u64, counter: u64) -> u64 {
    splitmix64(parent ^ splitmix64(counter.wrapping_mul(GOLDEN).wrapping_add(1)))
}

/// Folds a path of counters into a single seed.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(master, |s, &c| child(s, c))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
