//! Deterministic seed derivation.
//!
//! Every random object in the simulator (sketch operators, client sampling,
//! weight init, synthetic data) draws its seed through the same fixed 64-bit
//! mixing function, so a run is fully determined by one root seed and the
//! derivation path. The mixer is the SplitMix64 finalizer: integer-only,
//! identical on every platform.

/// SplitMix64 finalizer. Bijective on `u64`, avalanches all bits.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a tag. Chaining `derive` calls with
/// distinct tag sequences yields practically disjoint streams.
#[inline]
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0xA5A5_A5A5_A5A5_A5A5)))
}

/// Folds a path of tags into one child seed. `child_seed(s, &[a, b])` differs
/// from `child_seed(s, &[b, a])` because each level re-mixes.
pub fn child_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(root, |acc, &tag| derive(acc, tag))
}
