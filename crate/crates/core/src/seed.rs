//! Seed derivation for independent, reproducible random streams.

/// Mix `parts` into `base` with splitmix64 steps.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix(base);
    for &p in parts {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    s
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
