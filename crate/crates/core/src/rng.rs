//! Deterministic RNG stream derivation.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(seed, purpose, a, b)`, typically `a = user id` and `b = round`, so the
//! schedule of parallel work can never change what a stream yields.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    TestData = 2,
    Partition = 3,
    Compromise = 4,
    ModelInit = 5,
    Selection = 6,
    LocalTrain = 7,
    AttackCoin = 8,
    Attack = 9,
    Projector = 10,
    Predictor = 11,
    Bench = 12,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b.rotate_left(32));
    StreamRng::seed_from_u64(h)
}
