//! Keyed random streams.
//!
//! Every stochastic draw in the simulator comes from a stream identified by a
//! path of integers, e.g. `(seed, round, client, epoch, sample)`. Streams are
//! derived by hashing the path, so the draws seen by one client or one sample
//! never depend on how many draws other parts of the program made, or on the
//! order work was scheduled in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier of a deterministic random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(splitmix64(seed ^ 0x5EED_0F_F1E1D))
    }

    /// Derives the sub-stream `tag` of this stream.
    pub fn child(self, tag: u64) -> Self {
        RngKey(splitmix64(self.0.rotate_left(17) ^ splitmix64(tag.wrapping_add(1))))
    }

    pub fn path(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |k, &t| k.child(t))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

/// Stream tags shared across modules, kept in one place so that two call
/// sites never collide on the same sub-stream.
pub mod tags {
    pub const SELECT: u64 = 1;
    pub const LOCAL: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const AUX_POSTERIOR: u64 = 5;
    pub const MAIN_POSTERIOR: u64 = 6;
    pub const MASK: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const INIT: u64 = 9;
    pub const PARTITION: u64 = 10;
    pub const DATA: u64 = 11;
    pub const WARMUP: u64 = 12;
    pub const ADAPT: u64 = 13;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let mut r1 = RngKey::new(3).path(&[1, 2, 3]).rng();
        let mut r2 = RngKey::new(3).path(&[1, 2, 3]).rng();
        for _ in 0..16 {
            assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
        }
    }

    #[test]
    fn sibling_streams_differ() {
        let k = RngKey::new(0);
        assert_ne!(k.child(0), k.child(1));
        assert_ne!(k.path(&[1, 2]), k.path(&[2, 1]));
        assert_ne!(RngKey::new(0), RngKey::new(1));
    }
}
