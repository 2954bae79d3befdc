//! Derivation of independent per-stage seeds from one user-supplied seed.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a named stage.
pub fn derive(seed: u64, stage: &str) -> u64 {
    stage.bytes().fold(mix(seed), |acc, b| mix(acc ^ u64::from(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_get_distinct_seeds() {
        assert_ne!(derive(7, "tsne"), derive(7, "forest"));
        assert_ne!(derive(7, "tsne"), derive(8, "tsne"));
        assert_eq!(derive(7, "folds"), derive(7, "folds"));
    }
}
