//! Deterministic RNG stream derivation.
//!
//! Every random stream in the crate is derived from a `(base seed, tag,
//! index)` triple via SHA-256, so any part of a run can be reproduced in
//! isolation: sample `i` of a batch depends only on `(seed, i)`, training
//! step `k` only on `(seed, k)`, and so on. No global RNG exists.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG for `(seed, tag, index)`.
pub fn derive_rng(seed: u64, tag: &str, index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_triple_same_stream() {
        let mut a = derive_rng(7, "x", 3);
        let mut b = derive_rng(7, "x", 3);
        for _ in 0..16 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn distinct_tags_and_indices_decorrelate() {
        let mut a = derive_rng(7, "x", 3);
        let mut b = derive_rng(7, "y", 3);
        let mut c = derive_rng(7, "x", 4);
        let x: u64 = a.gen();
        assert_ne!(x, b.gen::<u64>());
        let mut a2 = derive_rng(7, "x", 3);
        assert_eq!(x, a2.gen::<u64>());
        assert_ne!(x, c.gen::<u64>());
    }
}
