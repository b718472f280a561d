//! Prefix trie over catalog Semantic ID paths.
//!
//! Tracks, for every depth `b`, the set of valid length-`b` prefixes — the
//! paths that lead to at least one real item. Supports constrained beam
//! expansion (which tokens may extend a prefix) and uniform negative
//! sampling for contrastive training.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::SemanticPath;
use crate::error::{Error, Result};

struct TrieNode {
    children: BTreeMap<u16, usize>,
    /// Number of catalog items whose path passes through this node.
    item_count: usize,
}

struct LevelIndex {
    /// All valid paths of this depth, lexicographically sorted.
    paths: Vec<SemanticPath>,
    position: HashMap<SemanticPath, usize>,
}

/// The valid-path sets for all depths `1..=d`.
pub struct PrefixTrie {
    depth: usize,
    nodes: Vec<TrieNode>,
    levels: Vec<LevelIndex>,
    /// Cumulative offsets of each level into the global path index space.
    level_offsets: Vec<usize>,
}

/// Result of [`PrefixTrie::sample_negatives`].
#[derive(Debug, Clone)]
pub struct NegativeSample {
    pub paths: Vec<SemanticPath>,
    /// True when fewer than the requested count existed and all were returned.
    pub undersampled: bool,
}

impl PrefixTrie {
    /// Build from full-length catalog paths. Duplicate paths collapse to one
    /// trie path with their item count accumulated.
    pub fn build(paths: &[SemanticPath], depth: usize) -> Result<PrefixTrie> {
        let mut nodes = vec![TrieNode {
            children: BTreeMap::new(),
            item_count: 0,
        }];
        for p in paths {
            if p.len() != depth {
                return Err(Error::usage(format!(
                    "trie expects full paths of length {depth}, got {}",
                    p.len()
                )));
            }
            nodes[0].item_count += 1;
            let mut cur = 0usize;
            for &tok in p.tokens() {
                let next = match nodes[cur].children.get(&tok) {
                    Some(&idx) => idx,
                    None => {
                        let idx = nodes.len();
                        nodes.push(TrieNode {
                            children: BTreeMap::new(),
                            item_count: 0,
                        });
                        nodes[cur].children.insert(tok, idx);
                        idx
                    }
                };
                nodes[next].item_count += 1;
                cur = next;
            }
        }

        // Enumerate each depth in lexicographic order by walking the trie.
        let mut levels: Vec<LevelIndex> = Vec::with_capacity(depth);
        let mut frontier: Vec<(usize, SemanticPath)> = vec![(0, SemanticPath::empty())];
        for _ in 0..depth {
            let mut next_frontier = Vec::new();
            for (node, prefix) in &frontier {
                for (&tok, &child) in &nodes[*node].children {
                    next_frontier.push((child, prefix.extended(tok)));
                }
            }
            let paths: Vec<SemanticPath> =
                next_frontier.iter().map(|(_, p)| p.clone()).collect();
            let position = paths
                .iter()
                .cloned()
                .enumerate()
                .map(|(i, p)| (p, i))
                .collect();
            levels.push(LevelIndex { paths, position });
            frontier = next_frontier;
        }

        let mut level_offsets = Vec::with_capacity(depth);
        let mut acc = 0usize;
        for level in &levels {
            level_offsets.push(acc);
            acc += level.paths.len();
        }

        Ok(PrefixTrie {
            depth,
            nodes,
            levels,
            level_offsets,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `|V_b|` for `b` in `1..=depth`.
    pub fn valid_count(&self, b: usize) -> usize {
        self.levels[b - 1].paths.len()
    }

    /// All valid paths of depth `b`, lexicographically sorted.
    pub fn valid_paths(&self, b: usize) -> &[SemanticPath] {
        &self.levels[b - 1].paths
    }

    /// Total valid paths across all depths; the reward model's table size.
    pub fn total_valid_paths(&self) -> usize {
        self.levels.iter().map(|l| l.paths.len()).sum()
    }

    fn node_of(&self, prefix: &SemanticPath) -> Option<usize> {
        let mut cur = 0usize;
        for &tok in prefix.tokens() {
            cur = *self.nodes[cur].children.get(&tok)?;
        }
        Some(cur)
    }

    pub fn contains(&self, prefix: &SemanticPath) -> bool {
        !prefix.is_empty() && prefix.len() <= self.depth && self.node_of(prefix).is_some()
    }

    /// Number of catalog items below a prefix (0 when absent).
    pub fn items_under(&self, prefix: &SemanticPath) -> usize {
        self.node_of(prefix)
            .map(|n| self.nodes[n].item_count)
            .unwrap_or(0)
    }

    /// Tokens `s` with `prefix ⊕ s` valid, in ascending order. An empty
    /// prefix yields the first tokens of all items; an unknown prefix yields
    /// an empty set.
    pub fn valid_extensions(&self, prefix: &SemanticPath) -> Vec<u16> {
        match self.node_of(prefix) {
            Some(n) => self.nodes[n].children.keys().copied().collect(),
            None => Vec::new(),
        }
    }

    /// Position of a path within the global (depth-major, lexicographic)
    /// index over all valid paths. This keys the reward model's embedding
    /// table.
    pub fn global_path_index(&self, path: &SemanticPath) -> Option<usize> {
        if path.is_empty() || path.len() > self.depth {
            return None;
        }
        let level = &self.levels[path.len() - 1];
        level
            .position
            .get(path)
            .map(|&i| self.level_offsets[path.len() - 1] + i)
    }

    /// Draw `n` distinct members of `V_b \ {positive}` uniformly. When fewer
    /// than `n` exist, returns all of them with `undersampled` set.
    pub fn sample_negatives(
        &self,
        positive: &SemanticPath,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> NegativeSample {
        let b = positive.len();
        let level = &self.levels[b - 1];
        let pos_idx = level.position.get(positive).copied();
        let total = level.paths.len();
        let available = total - usize::from(pos_idx.is_some());

        if available <= n {
            let paths = level
                .paths
                .iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != pos_idx)
                .map(|(_, p)| p.clone())
                .collect();
            return NegativeSample {
                paths,
                undersampled: available < n,
            };
        }

        let mut picked: Vec<usize> = Vec::with_capacity(n);
        if n * 2 >= available {
            // Dense draw: partial Fisher-Yates over the candidate indices.
            let mut candidates: Vec<usize> =
                (0..total).filter(|&i| Some(i) != pos_idx).collect();
            for i in 0..n {
                let j = rng.gen_range(i..candidates.len());
                candidates.swap(i, j);
                picked.push(candidates[i]);
            }
        } else {
            // Sparse draw: rejection sampling stays uniform over the set.
            let mut taken = std::collections::HashSet::with_capacity(n * 2);
            while picked.len() < n {
                let i = rng.gen_range(0..total);
                if Some(i) == pos_idx || !taken.insert(i) {
                    continue;
                }
                picked.push(i);
            }
        }
        NegativeSample {
            paths: picked.into_iter().map(|i| level.paths[i].clone()).collect(),
            undersampled: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use std::collections::HashSet;

    fn p(tokens: &[u16]) -> SemanticPath {
        SemanticPath::new(tokens.to_vec())
    }

    fn small_trie() -> PrefixTrie {
        PrefixTrie::build(&[p(&[0, 1]), p(&[0, 2])], 2).unwrap()
    }

    #[test]
    fn valid_sets_match_hand_example() {
        let trie = small_trie();
        assert_eq!(trie.valid_paths(1), &[p(&[0])]);
        assert_eq!(trie.valid_paths(2), &[p(&[0, 1]), p(&[0, 2])]);
        assert_eq!(trie.valid_count(1), 1);
        assert_eq!(trie.valid_count(2), 2);
    }

    #[test]
    fn duplicates_collapse_with_item_count() {
        let trie = PrefixTrie::build(&[p(&[3, 4]), p(&[3, 4])], 2).unwrap();
        assert_eq!(trie.valid_count(2), 1);
        assert_eq!(trie.items_under(&p(&[3, 4])), 2);
        assert_eq!(trie.items_under(&p(&[3])), 2);
    }

    #[test]
    fn extensions_are_ascending_and_exact() {
        let trie = small_trie();
        assert_eq!(trie.valid_extensions(&SemanticPath::empty()), vec![0]);
        assert_eq!(trie.valid_extensions(&p(&[0])), vec![1, 2]);
        assert_eq!(trie.valid_extensions(&p(&[0, 1])), Vec::<u16>::new());
        assert_eq!(trie.valid_extensions(&p(&[9])), Vec::<u16>::new());
    }

    #[test]
    fn membership_matches_brute_force_prefix_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let depth = 3;
        let m = 8u16;
        let paths: Vec<SemanticPath> = (0..500)
            .map(|_| {
                p(&[
                    rng.gen_range(0..m),
                    rng.gen_range(0..m),
                    rng.gen_range(0..m),
                ])
            })
            .collect();
        let trie = PrefixTrie::build(&paths, depth).unwrap();

        let mut oracle: Vec<HashSet<SemanticPath>> = vec![HashSet::new(); depth];
        for path in &paths {
            for b in 1..=depth {
                oracle[b - 1].insert(path.prefix(b));
            }
        }
        for b in 1..=depth {
            assert_eq!(trie.valid_count(b), oracle[b - 1].len());
            for candidate in oracle[b - 1].iter() {
                assert!(trie.contains(candidate));
            }
        }
        // Distinct full paths (set-based oracle for |V_d|).
        assert_eq!(trie.valid_count(depth), oracle[depth - 1].len());
        // Probe some non-members.
        for _ in 0..100 {
            let candidate = p(&[
                rng.gen_range(0..m * 2),
                rng.gen_range(0..m * 2),
                rng.gen_range(0..m * 2),
            ]);
            assert_eq!(
                trie.contains(&candidate),
                oracle[2].contains(&candidate),
                "mismatch on {candidate:?}"
            );
        }
    }

    #[test]
    fn forced_negative_set() {
        let trie = PrefixTrie::build(&[p(&[0, 0]), p(&[1, 0]), p(&[2, 0])], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample = trie.sample_negatives(&p(&[0]), 2, &mut rng);
        assert!(!sample.undersampled);
        let set: HashSet<_> = sample.paths.into_iter().collect();
        assert_eq!(set, HashSet::from([p(&[1]), p(&[2])]));
    }

    #[test]
    fn undersampling_returns_all_and_flags() {
        let trie = PrefixTrie::build(&[p(&[0, 0]), p(&[1, 0])], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample = trie.sample_negatives(&p(&[0]), 5, &mut rng);
        assert!(sample.undersampled);
        assert_eq!(sample.paths, vec![p(&[1])]);
    }

    #[test]
    fn positive_never_sampled() {
        let paths: Vec<SemanticPath> = (0..6).map(|t| p(&[t, 0])).collect();
        let trie = PrefixTrie::build(&paths, 2).unwrap();
        let positive = p(&[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10_000 {
            let sample = trie.sample_negatives(&positive, 1, &mut rng);
            assert_ne!(sample.paths[0], positive);
        }
    }

    #[test]
    fn negative_frequencies_are_uniform() {
        // 11 valid paths, positive excluded, N=1: each of the 10 candidates
        // should appear with p=1/10 over 60k draws. 3σ ≈ 3·√(60000·0.1·0.9).
        let paths: Vec<SemanticPath> = (0..11).map(|t| p(&[t, 0])).collect();
        let trie = PrefixTrie::build(&paths, 2).unwrap();
        let positive = p(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut counts = vec![0usize; 11];
        let draws = 60_000;
        for _ in 0..draws {
            let sample = trie.sample_negatives(&positive, 1, &mut rng);
            counts[sample.paths[0].tokens()[0] as usize] += 1;
        }
        assert_eq!(counts[4], 0);
        let expected = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for (t, &c) in counts.iter().enumerate() {
            if t == 4 {
                continue;
            }
            assert!(
                (c as f64 - expected).abs() < 3.0 * sigma,
                "token {t}: {c} draws vs expected {expected}"
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let paths: Vec<SemanticPath> = (0..50).map(|t| p(&[t, 0])).collect();
        let trie = PrefixTrie::build(&paths, 2).unwrap();
        let a = trie.sample_negatives(&p(&[7]), 10, &mut ChaCha8Rng::seed_from_u64(9));
        let b = trie.sample_negatives(&p(&[7]), 10, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.paths, b.paths);
    }

    #[test]
    fn global_index_is_depth_major_and_dense() {
        let trie = small_trie();
        assert_eq!(trie.global_path_index(&p(&[0])), Some(0));
        assert_eq!(trie.global_path_index(&p(&[0, 1])), Some(1));
        assert_eq!(trie.global_path_index(&p(&[0, 2])), Some(2));
        assert_eq!(trie.global_path_index(&p(&[1])), None);
        assert_eq!(trie.total_valid_paths(), 3);
    }
}
