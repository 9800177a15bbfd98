//! Seeded randomness.
//!
//! Every run derives all of its randomness from one root seed. Independent
//! purposes (data order, noise draws, parameter init, evaluation pairing)
//! get independent ChaCha streams so changing one does not perturb the
//! others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// A fixed-purpose RNG stream derived from a root seed.
pub fn stream(root_seed: u64, purpose: &str) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(root_seed);
    rng.set_stream(fnv1a(purpose.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
