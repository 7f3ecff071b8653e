//! Deterministic seed derivation.
//!
//! Parallel work items (simulation runs, CV folds, bootstrap replicates)
//! each get an independent stream seeded by `derive_seed(master, index)`, so
//! results do not depend on scheduling order.

/// SplitMix64 finalizer over `master + index + 1`; statistically independent
/// streams for distinct indices.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
