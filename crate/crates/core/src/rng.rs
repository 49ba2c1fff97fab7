//! Named, index-addressable random substreams.
//!
//! Every random decision in the pipeline is drawn from a generator seeded by
//! `(global seed, stream name, a, b)`, so any component can be replayed in
//! isolation without reproducing the draws that preceded it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_INIT: &str = "init";
pub const STREAM_SHUFFLE: &str = "shuffle";
pub const STREAM_MASK: &str = "mask";
pub const STREAM_DROPOUT: &str = "dropout";
pub const STREAM_EVAL: &str = "eval";

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives the seed of substream `name` at index `(a, b)`.
pub fn derive_seed(global: u64, name: &str, a: u64, b: u64) -> u64 {
    let mut h = splitmix(global);
    h = splitmix(h ^ fnv1a(name));
    h = splitmix(h ^ a);
    splitmix(h ^ b.rotate_left(32))
}

pub fn substream(global: u64, name: &str, a: u64, b: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(global, name, a, b))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn substreams_are_distinct_and_stable() {
        let a = derive_seed(7, STREAM_MASK, 0, 1);
        assert_eq!(a, derive_seed(7, STREAM_MASK, 0, 1));
        assert_ne!(a, derive_seed(7, STREAM_MASK, 1, 0));
        assert_ne!(a, derive_seed(7, STREAM_SHUFFLE, 0, 1));
        assert_ne!(a, derive_seed(8, STREAM_MASK, 0, 1));
        let mut r1 = substream(3, STREAM_INIT, 0, 0);
        let mut r2 = substream(3, STREAM_INIT, 0, 0);
        assert_eq!(r1.next_u64(), r2.next_u64());
    }
}
