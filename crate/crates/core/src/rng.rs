//! Seeded random number generation.
//!
//! Every randomized stage (matching, splits, initialization, dropout,
//! baselines, permutation tests) draws from a ChaCha stream seeded from an
//! explicit integer, so runs are reproducible across platforms.

/// The deterministic generator used throughout the crate.
pub type SeededRng = rand_chacha::ChaCha20Rng;

/// Build a generator from an experiment seed.
pub fn seeded(seed: u64) -> SeededRng {
    <SeededRng as rand::SeedableRng>::seed_from_u64(seed)
}
