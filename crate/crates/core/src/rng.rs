//! Hierarchical, named random streams.
//!
//! Every random draw in the crate comes from a [`StreamSeed`] derived from a
//! single root seed through a path of tags and indices, e.g.
//! `root / "rollout" / update / prompt / trajectory`. Streams are independent
//! of evaluation order, so sequential and parallel runs agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSeed(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl StreamSeed {
    pub const fn root(seed: u64) -> Self {
        Self(seed)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Child stream named by a purpose tag.
    pub fn tag(self, tag: &str) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(fnv1a(tag))))
    }

    /// Child stream named by an index.
    pub fn index(self, i: u64) -> Self {
        Self(splitmix64(self.0.rotate_left(17) ^ splitmix64(i.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }
}
