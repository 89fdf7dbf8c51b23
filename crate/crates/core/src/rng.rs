//! Seed lineage. Every random draw in a run comes from a stream keyed by a
//! tuple of integers, so results do not depend on scheduling or on how many
//! workers sample in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes, mixed into the key so that e.g. evaluation draws never
/// alias training draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Initial = 1,
    Fap = 2,
    Subset = 4,
    Eval = 5,
    Suite = 6,
    TaskOrder = 7,
    Check = 8,
    Init = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master_seed: u64, purpose: Purpose, parts: &[u64]) -> StreamRng {
    let mut key = Vec::with_capacity(parts.len() + 2);
    key.push(master_seed);
    key.push(purpose as u64);
    key.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(mix(&key))
}
