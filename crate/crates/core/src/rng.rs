//! Keyed random streams.
//!
//! Every stochastic draw in a simulation comes from a stream keyed by
//! `(global_seed, client, round, purpose)`, so results do not depend on the
//! order in which clients are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ModelInit = 1,
    Partition = 2,
    DataSplit = 3,
    LocalTraining = 4,
    Perturbation = 5,
    Attack = 6,
    AttackEstimate = 7,
    Synthetic = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from the stream key.
pub fn stream_seed(global_seed: u64, client: u64, round: u64, purpose: Purpose) -> u64 {
    [client, round, purpose as u64]
        .into_iter()
        .fold(splitmix64(global_seed), |acc, part| splitmix64(acc ^ splitmix64(part)))
}

pub fn stream(global_seed: u64, client: u64, round: u64, purpose: Purpose) -> SimRng {
    SimRng::seed_from_u64(stream_seed(global_seed, client, round, purpose))
}
