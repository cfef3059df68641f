/// Derives an independent child seed from `(root, tag, index)`.
///
/// SplitMix64 finalizer over a mix of the inputs, so parallel workers can
/// each build their own RNG and still reproduce serial output.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h = root ^ 0x9E37_79B9_7F4A_7C15;
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ mix(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
