//! Counter-based random streams.
//!
//! Every random draw is addressed by `(master seed, key, purpose, chunk)`.
//! Samples are grouped into fixed-size chunks, each chunk owning its own
//! ChaCha stream, so results never depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of consecutive samples drawn from one stream.
pub const CHUNK: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Selection = 1,
    Estimation = 2,
    Prediction = 3,
    Dataset = 4,
    Noise = 5,
    Search = 6,
    Trial = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The stream for one chunk of draws.
pub fn stream(master: u64, key: u64, purpose: Purpose, chunk: u64) -> ChaCha8Rng {
    let seed = splitmix(splitmix(splitmix(master) ^ key) ^ purpose as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Chunk index ranges covering `n` samples.
pub fn chunks(n: u64) -> impl Iterator<Item = (u64, u64)> + Clone {
    (0..n.div_ceil(CHUNK)).map(move |c| (c, CHUNK.min(n - c * CHUNK)))
}
