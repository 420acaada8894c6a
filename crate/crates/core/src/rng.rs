//! Seeded random streams.
//!
//! Every random choice in the toolkit draws from a ChaCha stream derived from
//! the run seed and a stream name, so components can be exercised in
//! isolation and still reproduce the numbers they produce inside a full run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const LANDMARKS: &str = "landmarks";
pub const KMEANS: &str = "kmeans";
pub const SIMULATOR: &str = "simulator";
pub const ATTACK: &str = "attack";

/// Derive the stream `name` of run `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    // FNV-1a over the name, then a splitmix64 finalizer mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
