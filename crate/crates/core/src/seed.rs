//! Stable seed derivation. Per-order and per-shard streams are keyed by
//! content, never by scheduling order.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Seed for one order's Monte Carlo stream: `hash(global, user, brand, day)`.
pub fn order_seed(global: u64, user: u64, brand: u32, day: u32) -> u64 {
    derive(&[global, user, brand as u64, day as u64])
}
