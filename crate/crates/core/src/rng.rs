//! Seed fan-out. Every random decision in the crate draws from a ChaCha
//! stream derived from `(root seed, label, index)`, so components never
//! share state and any step can be replayed in isolation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of the `index`-th draw of substream `label`.
pub fn substream(root: u64, label: &str, index: u64) -> u64 {
    splitmix(splitmix(root ^ fnv1a(label)).wrapping_add(index))
}

pub fn rng_for(root: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(substream(root, label, index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Threshold such that `next_u32() < t` holds with probability `p`.
pub fn bernoulli_threshold(p: f64) -> u64 {
    (p.clamp(0.0, 1.0) * 4_294_967_296.0).round() as u64
}

/// Integer-only Bernoulli draw against a precomputed threshold.
pub fn bernoulli(rng: &mut Rng, threshold: u64) -> bool {
    (rng.next_u32() as u64) < threshold
}
