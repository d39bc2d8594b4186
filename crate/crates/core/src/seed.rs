//! Deterministic derivation of independent seeds.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `base`, so distinct paths give unrelated seeds.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base), |acc, p| mix(acc ^ mix(*p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_values_matter() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_ne!(derive(1, &[2]), derive(2, &[2]));
        assert_eq!(derive(5, &[7, 9]), derive(5, &[7, 9]));
    }
}
