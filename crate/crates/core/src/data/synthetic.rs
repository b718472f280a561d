//! Synthetic hierarchical-preference data with known cluster structure.
//!
//! Items live in a cluster tree: per-level centers are drawn with shrinking
//! scale, and an item embedding is the sum of its ancestor centers plus small
//! noise. Each user draws a preference distribution over leaf clusters and
//! emits a sequence of items from preferred clusters, corrupted by uniform
//! noise with probability `noise`. Because the generating tree is known,
//! drift and recovery are measurable.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    /// Cluster-tree branching factors, root to leaves.
    pub branching: Vec<usize>,
    /// Dirichlet concentration of user preferences over leaf clusters.
    /// Zero degenerates to a single uniformly chosen preferred leaf.
    pub alpha: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Probability that a drawn item ignores preferences (uniform catalog).
    pub noise: f64,
    /// Std of level-1 cluster centers.
    pub center_scale: f64,
    /// Multiplier on the center scale per level down the tree.
    pub center_decay: f64,
    /// Std of per-item noise around its leaf center sum.
    pub item_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 64,
            num_items: 256,
            dim: 64,
            branching: vec![8, 4, 4],
            alpha: 0.05,
            seq_len_min: 8,
            seq_len_max: 16,
            noise: 0.1,
            center_scale: 4.0,
            center_decay: 0.5,
            item_noise: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn leaves(&self) -> usize {
        self.branching.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching.is_empty() {
            return Err(Error::config("synthetic: branching must be non-empty"));
        }
        if self.leaves() > self.num_items {
            return Err(Error::config(format!(
                "synthetic: branching product {} exceeds num_items {}",
                self.leaves(),
                self.num_items
            )));
        }
        if self.num_users == 0 || self.num_items == 0 || self.dim == 0 {
            return Err(Error::config("synthetic: users, items, dim must be > 0"));
        }
        if self.seq_len_min < 2 || self.seq_len_min > self.seq_len_max {
            return Err(Error::config(
                "synthetic: need 2 <= seq_len_min <= seq_len_max",
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("synthetic: noise must be in [0, 1]"));
        }
        if self.alpha < 0.0 {
            return Err(Error::config("synthetic: alpha must be >= 0"));
        }
        Ok(())
    }
}

/// Generated catalog plus interaction log, with the true leaf assignment per
/// item kept for structure checks.
pub struct SyntheticData {
    pub item_embeddings: Tensor,
    pub interactions: Vec<Interaction>,
    pub item_leaf: Vec<usize>,
}

pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = config.dim;
    let leaves = config.leaves();

    // Per-level cluster centers. Level l has prod(branching[..=l]) nodes;
    // a node's center is drawn fresh, its absolute position is the sum down
    // the ancestor chain.
    let mut level_node_centers: Vec<Vec<f64>> = Vec::with_capacity(config.branching.len());
    let mut nodes_at_level = 1usize;
    let mut scale = config.center_scale;
    for &branch in &config.branching {
        nodes_at_level *= branch;
        let normal = Normal::new(0.0, scale).expect("valid std");
        let centers: Vec<f64> = (0..nodes_at_level * dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        level_node_centers.push(centers);
        scale *= config.center_decay;
    }

    // Leaf index -> absolute center (sum of ancestors).
    let mut leaf_centers = vec![0.0f64; leaves * dim];
    for leaf in 0..leaves {
        // Mixed-radix digits of the leaf, root first.
        let mut digits = Vec::with_capacity(config.branching.len());
        let mut rest = leaf;
        for &branch in config.branching.iter().rev() {
            digits.push(rest % branch);
            rest /= branch;
        }
        digits.reverse();
        let mut node = 0usize;
        for (level, (&digit, &branch)) in digits.iter().zip(&config.branching).enumerate() {
            node = node * branch + digit;
            let center = &level_node_centers[level][node * dim..(node + 1) * dim];
            for (acc, c) in leaf_centers[leaf * dim..(leaf + 1) * dim]
                .iter_mut()
                .zip(center)
            {
                *acc += c;
            }
        }
    }

    // Items round-robin over leaves so every leaf is populated.
    let noise_dist = Normal::new(0.0, config.item_noise).expect("valid std");
    let mut embeddings = vec![0.0f64; config.num_items * dim];
    let mut item_leaf = Vec::with_capacity(config.num_items);
    let mut leaf_items: Vec<Vec<usize>> = vec![Vec::new(); leaves];
    for item in 0..config.num_items {
        let leaf = item % leaves;
        item_leaf.push(leaf);
        leaf_items[leaf].push(item);
        for ((e, c), _) in embeddings[item * dim..(item + 1) * dim]
            .iter_mut()
            .zip(&leaf_centers[leaf * dim..(leaf + 1) * dim])
            .zip(0..dim)
        {
            *e = c + noise_dist.sample(&mut rng);
        }
    }

    // User sequences.
    let mut interactions = Vec::new();
    for user in 0..config.num_users {
        let prefs = draw_leaf_preferences(leaves, config.alpha, &mut rng);
        let len = rng.gen_range(config.seq_len_min..=config.seq_len_max);
        for t in 0..len {
            let item = if rng.gen::<f64>() < config.noise {
                rng.gen_range(0..config.num_items)
            } else {
                let leaf = sample_categorical(&prefs, &mut rng);
                leaf_items[leaf][rng.gen_range(0..leaf_items[leaf].len())]
            };
            interactions.push(Interaction {
                user_id: user as u64,
                item_id: item,
                timestamp: t as i64,
            });
        }
    }

    Ok(SyntheticData {
        item_embeddings: Tensor::from_vec(vec![config.num_items, dim], embeddings)?,
        interactions,
        item_leaf,
    })
}

fn draw_leaf_preferences(leaves: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if alpha <= 0.0 {
        let mut prefs = vec![0.0; leaves];
        prefs[rng.gen_range(0..leaves)] = 1.0;
        return prefs;
    }
    let gamma = Gamma::new(alpha, 1.0).expect("valid shape");
    let mut prefs: Vec<f64> = (0..leaves).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = prefs.iter().sum();
    if sum <= f64::MIN_POSITIVE {
        // Tiny alpha can underflow every draw; degrade to a point mass.
        let pick = rng.gen_range(0..leaves);
        prefs.iter_mut().for_each(|p| *p = 0.0);
        prefs[pick] = 1.0;
        return prefs;
    }
    prefs.iter_mut().for_each(|p| *p /= sum);
    prefs
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut target = rng.gen::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if target < p {
            return i;
        }
        target -= p;
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branching_larger_than_catalog_is_config_error() {
        let config = SyntheticConfig {
            num_items: 10,
            branching: vec![4, 4],
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&config, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn concentrated_users_stay_in_one_leaf() {
        // alpha = 0 and noise = 0 force every user's items into one leaf,
        // hence one shared level-1 ancestor.
        let config = SyntheticConfig {
            num_users: 20,
            num_items: 64,
            dim: 8,
            branching: vec![4, 4],
            alpha: 0.0,
            noise: 0.0,
            seq_len_min: 5,
            seq_len_max: 10,
            ..Default::default()
        };
        let data = generate_synthetic(&config, 7).unwrap();
        let seqs = super::super::build_sequences(&data.interactions);
        for seq in seqs {
            let leaves: std::collections::HashSet<usize> =
                seq.items.iter().map(|&i| data.item_leaf[i]).collect();
            assert_eq!(leaves.len(), 1, "user {} strayed", seq.user_id);
            let level1: std::collections::HashSet<usize> =
                leaves.iter().map(|l| l / 4).collect();
            assert_eq!(level1.len(), 1);
        }
    }

    #[test]
    fn full_noise_gives_uniform_item_marginal() {
        // With noise = 1 every draw is uniform over the catalog. The
        // chi-square statistic over 100k draws should sit within 3σ of its
        // mean (df = num_items - 1, σ = sqrt(2·df)).
        let config = SyntheticConfig {
            num_users: 10_000,
            num_items: 50,
            dim: 4,
            branching: vec![5],
            noise: 1.0,
            seq_len_min: 10,
            seq_len_max: 10,
            ..Default::default()
        };
        let data = generate_synthetic(&config, 13).unwrap();
        let draws = data.interactions.len() as f64;
        assert_eq!(draws as usize, 100_000);
        let mut counts = vec![0usize; config.num_items];
        for it in &data.interactions {
            counts[it.item_id] += 1;
        }
        let expected = draws / config.num_items as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let df = (config.num_items - 1) as f64;
        let sigma = (2.0 * df).sqrt();
        assert!(
            (chi2 - df).abs() < 3.0 * sigma,
            "chi-square {chi2} too far from df {df}"
        );
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let config = SyntheticConfig::default();
        let a = generate_synthetic(&config, 42).unwrap();
        let b = generate_synthetic(&config, 42).unwrap();
        assert_eq!(a.item_embeddings.data(), b.item_embeddings.data());
        assert_eq!(a.interactions, b.interactions);
        let c = generate_synthetic(&config, 43).unwrap();
        assert_ne!(a.interactions, c.interactions);
    }
}
