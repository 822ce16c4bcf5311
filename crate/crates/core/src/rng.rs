//! Reproducible random streams.
//!
//! Every stochastic routine draws from a ChaCha stream addressed by
//! `(master seed, purpose, index...)`. Streams are independent, so samples
//! can be generated in parallel in any order and still reproduce the
//! sequential result bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating the random streams of different pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Pilot = 1,
    Increment = 2,
    PriorDraw = 3,
    InitResample = 4,
    Mutation = 5,
    Resample = 6,
    DataNoise = 7,
    Bootstrap = 8,
    Study = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the stream for `(purpose, parts...)` under a master seed.
///
/// The stream id is a splitmix chain over the address parts, so distinct
/// addresses collide with probability ~2^-64.
pub fn substream(seed: u64, purpose: Purpose, parts: &[u64]) -> ChaCha8Rng {
    let mut id = splitmix64(purpose as u64);
    for &p in parts {
        id = splitmix64(id ^ p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
