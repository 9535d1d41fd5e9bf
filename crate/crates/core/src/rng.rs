//! Seed plumbing shared by every randomized routine.
//!
//! All randomness is derived from a root seed through named substreams so that
//! e.g. changing the number of evaluation episodes never perturbs the explore
//! stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one well-mixed hash.
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &w| mix64(acc ^ mix64(w)))
}

/// Seed of the substream `name` (e.g. `"explore"`, `"eval"`) under `seed`.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut words = vec![seed];
    words.extend(name.bytes().map(u64::from));
    hash_words(&words)
}

/// Seed of the `index`-th child of `seed` (per-episode, per-trial streams).
pub fn child(seed: u64, index: u64) -> u64 {
    hash_words(&[seed, index])
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maps a hash to a uniform draw in `[0, 1)` using its top 53 bits.
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ() {
        assert_ne!(substream(7, "explore"), substream(7, "eval"));
        assert_eq!(substream(7, "eval"), substream(7, "eval"));
        assert_ne!(child(7, 0), child(7, 1));
    }

    #[test]
    fn unit_range() {
        for i in 0..1000u64 {
            let u = unit_f64(mix64(i));
            assert!((0.0..1.0).contains(&u));
        }
        assert_eq!(unit_f64(0), 0.0);
        assert!(unit_f64(u64::MAX) < 1.0);
    }
}
