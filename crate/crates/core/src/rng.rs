//! Seedable counter-based random streams.
//!
//! Every stochastic operation takes an explicit [`Rng`]. Independent streams
//! are derived from a base seed plus a list of integer tags (epoch, sample
//! id, ...), so results do not depend on the order streams are consumed in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream keyed by `seed` and `tags`; distinct tag lists give unrelated streams.
pub fn derive(seed: u64, tags: &[u64]) -> Rng {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut rng = Rng::seed_from_u64(h);
    rng.set_stream(tags.len() as u64);
    rng
}
