//! Deterministic seed derivation.
//!
//! Every random decision in a run descends from one base seed through
//! `derive_seed(base, round, label)`, so reruns — and independent
//! reimplementations of the same scheme — agree bit for bit. The hash is
//! FNV-1a over the label bytes mixed with the base and round through
//! splitmix64 finalizers; it is stable across platforms and releases,
//! unlike `std`'s `DefaultHasher`.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream seed from a base seed, a round index, and a label
/// such as `"sampling"`, `"shuffle"`, or a client id.
pub fn derive_seed(base: u64, round: u64, label: &str) -> u64 {
    let mut z = splitmix64(base);
    z = splitmix64(z ^ round);
    splitmix64(z ^ fnv1a(label.as_bytes()))
}
