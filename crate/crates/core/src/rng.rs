//! Named, seed-derived random streams.
//!
//! All randomness flows from one master seed. A stream is identified by a
//! name (`"data"`, `"init"`, `"train"`, `"sample"`, ...) and an index, so
//! re-seeding one component never perturbs another and parallel workers get
//! the same numbers regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed for `(master, name, index)`.
pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    // FNV-1a over the stream name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix(splitmix(master ^ splitmix(h)) ^ index)
}

pub fn stream(master: u64, name: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name, index))
}
