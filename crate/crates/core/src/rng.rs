//! Named random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! run seed and a purpose label, so adding draws in one place never shifts
//! the numbers seen somewhere else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Independent stream for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label));
    rng
}

/// Independent stream for `(seed, label, index)`, e.g. one per epoch.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> StreamRng {
    stream(seed, &format!("{label}#{index}"))
}
