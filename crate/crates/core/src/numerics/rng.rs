//! Reproducible random streams.
//!
//! Every consumer draws from its own ChaCha8 stream. A stream is keyed by the
//! run seed, a purpose label and an index (typically the epoch), mixed with
//! FNV-1a over the label and SplitMix64 finalisation into a 64-bit ChaCha
//! seed. Streams therefore never depend on how much randomness another
//! consumer used, and resuming at epoch `k` only needs the run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the 64-bit key of stream `(seed, label, index)`.
pub fn stream_key(seed: u64, label: &str, index: u64) -> u64 {
    let a = splitmix64(seed ^ fnv1a(label.as_bytes()));
    splitmix64(a ^ splitmix64(index))
}

/// Open stream `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, label, index))
}
