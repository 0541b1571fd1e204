//! Deterministic random streams.
//!
//! Every Monte Carlo work item (a replicate, a perturbation draw) gets its own
//! ChaCha20 stream keyed by `(seed, index)`, so results do not depend on how
//! items are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Generator for work item `index` under master `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sub-seed for nested experiments (e.g. one experiment cell out of many).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
