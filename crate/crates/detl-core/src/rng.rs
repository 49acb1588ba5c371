//! Deterministic stream seeding.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose seed is
//! derived from the run seed plus a list of integer tags (purpose, epoch,
//! sample index, fold index, ...). Two runs with the same seed therefore make
//! identical draws regardless of thread scheduling or iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for seed derivation. Values are arbitrary but fixed: changing
/// them changes every downstream stream.
pub mod stream {
    pub const DATA_GEN: u64 = 0x01;
    pub const INIT: u64 = 0x02;
    pub const SHUFFLE: u64 = 0x03;
    pub const AUGMENT: u64 = 0x04;
    pub const HOLDOUT: u64 = 0x05;
    pub const FOLDS: u64 = 0x06;
    pub const FOLD: u64 = 0x07;
    pub const HEAD: u64 = 0x08;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &t in tags {
        state = splitmix64(state ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    state
}

/// Seeded RNG for the stream identified by `tags`.
pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_deterministic() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn streams_are_independent_of_draw_order() {
        let a: f32 = rng_from(3, &[stream::AUGMENT, 0, 5]).gen();
        // Drawing from another stream first must not affect the value.
        let _ = rng_from(3, &[stream::AUGMENT, 0, 4]).gen::<f32>();
        let b: f32 = rng_from(3, &[stream::AUGMENT, 0, 5]).gen();
        assert_eq!(a, b);
    }
}
