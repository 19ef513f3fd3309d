//! Labeled seed derivation. Every stochastic component takes a seed derived
//! from the run seed and a stable label, so runs are reproducible from
//! `(seed, config)` alone.

/// Derives a child seed from `base` and a label (FNV-1a over the label,
/// mixed with splitmix64).
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(base ^ splitmix64(h))
}

/// Derives a child seed from `base` and an integer index.
pub fn derive_index(base: u64, index: u64) -> u64 {
    splitmix64(base.wrapping_add(splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
