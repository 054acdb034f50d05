//! Seed derivation. Every stage draws from its own stream derived from the
//! root seed and a stage label, so adding draws in one stage never shifts
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

/// One step of the SplitMix64 sequence.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed of the child stream `label` under `parent`.
pub fn derive(parent: u64, label: &str) -> u64 {
    splitmix64(parent ^ splitmix64(fnv1a(label)))
}

/// Seed of the `index`-th child (sessions, batches, probe repeats).
pub fn derive_index(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

pub fn stage_rng(root: u64, label: &str) -> StageRng {
    StageRng::seed_from_u64(derive(root, label))
}

pub fn rng_from(seed: u64) -> StageRng {
    StageRng::seed_from_u64(seed)
}
