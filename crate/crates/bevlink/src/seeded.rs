//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by the root seed, a textual label, and integer indices, so adding or
//! reordering consumers never perturbs unrelated streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice. Also used as the blob checksum.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed, a stream label, and indices.
pub fn derive_seed(root: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a(label.as_bytes()) ^ splitmix(root);
    for &i in indices {
        h = splitmix(h ^ i.wrapping_mul(FNV_PRIME));
    }
    h
}

/// ChaCha8 stream for `(root, label, indices)`.
pub fn stream(root: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, indices))
}
