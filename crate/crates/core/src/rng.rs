//! Counter-based random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream addressed by
//! `(seed, domain, major, minor)`. The key is derived from the seed and the
//! domain; `major`/`minor` select the 64-bit stream id, so draws never depend
//! on the order in which streams are created or consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Independent purposes that draw from the same master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Augment = 1,
    Shuffle = 2,
    Init = 3,
    EpochOrder = 4,
    Synth = 5,
    Step = 6,
    Eval = 7,
    Test = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix two words into one; used to derive child seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(17))
}

pub fn stream(seed: u64, domain: Domain, major: u64, minor: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, domain as u64));
    rng.set_stream(mix(major, minor));
    rng
}
