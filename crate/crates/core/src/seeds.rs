//! Stateless derivation of per-purpose generators from a run seed, so any
//! step can be replayed from counters alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub mod stream {
    pub const EPOCH: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const STEP: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EVAL: u64 = 5;
}

pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

pub fn rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive(1, stream::EPOCH, 0), derive(1, stream::AUGMENT, 0));
        assert_ne!(derive(1, stream::EPOCH, 0), derive(1, stream::EPOCH, 1));
        assert_ne!(derive(1, stream::EPOCH, 0), derive(2, stream::EPOCH, 0));
        assert_eq!(derive(9, 3, 7), derive(9, 3, 7));
    }
}
