//! Deterministic random streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Well-separated purposes for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Mask = 1,
    Init = 2,
    Shuffle = 3,
    Update = 4,
    Probe = 5,
    Data = 6,
    Scratch = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, purpose, index)`, e.g. the shuffle of a
/// given epoch or the growth draw of a given update step.
pub fn derive(seed: u64, stream: Stream, index: u64) -> Rng {
    let s = splitmix(splitmix(seed ^ splitmix(stream as u64)) ^ index);
    Rng::seed_from_u64(s)
}
