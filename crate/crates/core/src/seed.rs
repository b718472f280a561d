//! Deterministic seed fan-out.
//!
//! Every run takes one top-level seed. Components (tokenizer, training,
//! negative sampling, evaluation) derive their own sub-seed by name, so any
//! component can be re-seeded independently without disturbing the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives named sub-seeds from a single root seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Sub-seed for a named component. FNV-1a over the name, mixed with the
    /// root via splitmix64 finalization.
    pub fn seed(&self, name: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in name.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        splitmix64(self.root ^ h)
    }

    /// A ChaCha RNG seeded for a named component.
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(name))
    }

    /// Sub-tree rooted at a named component, for per-item derivation
    /// (e.g. one RNG per evaluation user).
    pub fn subtree(&self, name: &str) -> SeedTree {
        SeedTree::new(self.seed(name))
    }

    /// Indexed variant of [`seed`], for per-element streams.
    pub fn seed_indexed(&self, name: &str, index: u64) -> u64 {
        splitmix64(self.seed(name) ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    }

    pub fn rng_indexed(&self, name: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed_indexed(name, index))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
