//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a base
//! seed plus a path of stream tags (client id, round, epoch, ...). Streams do
//! not depend on thread scheduling or on the data being processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of stream tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

// Stream tags used across modules.
pub(crate) const TAG_SPLIT: u64 = 0x5350;
pub(crate) const TAG_PARTITION: u64 = 0x5041;
pub(crate) const TAG_SYNTH: u64 = 0x5359;
pub(crate) const TAG_EPOCH: u64 = 0x4550;
pub(crate) const TAG_CLIENT: u64 = 0x434C;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, &[]), derive_seed(8, &[]));
    }
}
