//! Named, splittable random streams.
//!
//! Every stochastic stage of the pipeline draws from its own named child of
//! one run seed, so changing how one stage consumes randomness never shifts
//! the draws seen by another. Streams are ChaCha8 (counter-based, platform
//! independent); child seeds are derived by hashing the parent seed with the
//! stream name or index.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer; decorrelates derived seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A node in the seed tree. `child("data")` and `child("init")` of the same
/// node are independent streams; `index(i)` derives per-item sub-streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree(mix(seed))
    }

    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree(mix(self.0 ^ fnv1a(name.as_bytes())))
    }

    pub fn index(&self, i: u64) -> SeedTree {
        SeedTree(mix(self.0.wrapping_add(0x9e37_79b9).wrapping_mul(2 * i + 1)))
    }

    pub fn seed(&self) -> u64 {
        self.0
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// First `k` entries of a seeded Fisher-Yates shuffle of `0..n`.
pub fn sample_without_replacement<R: rand::Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} of {n} without replacement");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
