//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a base seed plus a string path, so streams are independent
//! of the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = splitmix(base);
    for part in parts {
        // FNV-1a over the bytes, then one avalanche round.
        let mut f: u64 = 0xcbf2_9ce4_8422_2325;
        for b in part.bytes() {
            f ^= b as u64;
            f = f.wrapping_mul(0x0100_0000_01b3);
        }
        h = splitmix(h ^ f);
    }
    h
}

pub fn stream(base: u64, parts: &[&str]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
