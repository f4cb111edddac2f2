/// Derives an independent seed from a base seed and a path of indices
/// (splitmix64 finalizer applied per component).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut s = seed;
    for &p in parts {
        s = mix(s ^ mix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    mix(s)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
