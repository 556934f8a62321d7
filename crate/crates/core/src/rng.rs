//! Seeded random streams. Every random draw in the crate goes through
//! [`stream`], so independent consumers never share a generator.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

/// Independent generator for `(seed, purpose)`.
///
/// The purpose string is folded into the seed with FNV-1a so that, e.g., the
/// initialization stream and the mask stream of one run never overlap.
pub fn stream(seed: u64, purpose: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Rng::seed_from_u64(seed ^ h.rotate_left(17))
}
