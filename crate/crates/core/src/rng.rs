//! Seed derivation. Every random stream in a run is a pure function of the
//! run seed and a tag path, so epochs can be replayed without stored RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn str_tag(s: &str) -> u64 {
    s.bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

pub fn derive_seed(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ str_tag(tag));
    for &i in indices {
        h = splitmix(h ^ i);
    }
    h
}

pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, indices))
}
