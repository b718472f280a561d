//! Beam search over the valid-path trie, with optional per-depth reward
//! reranking, plus an exhaustive decoding oracle.
//!
//! Searches run against a [`SearchModel`]: anything that can produce
//! next-level logits for a prefix, and optionally score a batch of candidate
//! paths. The trained model plugs in through [`ModelSearch`]; tests plug in
//! hand-built tables.

mod topk;

pub use topk::radix_topk;

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::Session;
use crate::tensor::Var;
use crate::tokenizer::{PrefixTrie, SemanticPath};

/// A path with its cumulative log-probability and, when the reward model
/// ranked it, the reward score.
#[derive(Debug, Clone)]
pub struct ScoredPath {
    pub path: SemanticPath,
    pub logprob: f64,
    pub prm_score: Option<f64>,
}

/// Reward-guided beam parameters.
#[derive(Debug, Clone)]
pub struct BeamConfig {
    /// Global beam size `K`: per-parent expansion width.
    pub beam_size: usize,
    /// Candidate-set size `K⁺` scored by the reward model per depth.
    pub k_plus: usize,
    /// Retained size `K′` per depth.
    pub k_prime: usize,
    /// Per-depth reward flags; `false` retains by log-probability.
    pub prm_depths: Vec<bool>,
    /// Mask expansion to trie-valid tokens (renormalized log-probabilities).
    pub constrained: bool,
}

impl BeamConfig {
    /// Reward model on at every depth.
    pub fn all_on(beam_size: usize, k_plus: usize, k_prime: usize, depth: usize) -> BeamConfig {
        BeamConfig {
            beam_size,
            k_plus,
            k_prime,
            prm_depths: vec![true; depth],
            constrained: true,
        }
    }

    /// Plain beam behavior at every depth.
    pub fn all_off(beam_size: usize, depth: usize) -> BeamConfig {
        BeamConfig {
            beam_size,
            k_plus: beam_size,
            k_prime: beam_size,
            prm_depths: vec![false; depth],
            constrained: true,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        if self.k_prime > self.k_plus {
            return Err(Error::config(format!(
                "k_prime {} exceeds k_plus {}",
                self.k_prime, self.k_plus
            )));
        }
        if self.prm_depths.len() != depth {
            return Err(Error::config(format!(
                "{} reward flags for depth {depth}",
                self.prm_depths.len()
            )));
        }
        if self.prm_depths.iter().any(|&f| f) && !self.constrained {
            return Err(Error::config(
                "reward scoring requires constrained decoding (the path table only covers valid paths)",
            ));
        }
        Ok(())
    }
}

/// What a search needs from the model.
pub trait SearchModel {
    /// Next-level logits (length `M`) for a decoding prefix.
    fn next_logits(&mut self, prefix: &SemanticPath) -> Result<Vec<f64>>;

    /// Whether candidate-path scoring is available.
    fn has_path_scorer(&self) -> bool {
        false
    }

    /// Scores for a batch of same-length candidate paths, one scalar each.
    fn score_paths(&mut self, _paths: &[SemanticPath]) -> Result<Vec<f64>> {
        Err(Error::config("this search model has no path scorer"))
    }
}

/// The trained model as a search backend.
pub struct ModelSearch<'s, 'p, 't> {
    pub session: &'s mut Session<'p>,
    pub enc: Var,
    pub trie: &'t PrefixTrie,
}

impl SearchModel for ModelSearch<'_, '_, '_> {
    fn next_logits(&mut self, prefix: &SemanticPath) -> Result<Vec<f64>> {
        self.session.decode_logits(self.enc, prefix)
    }

    fn has_path_scorer(&self) -> bool {
        true
    }

    fn score_paths(&mut self, paths: &[SemanticPath]) -> Result<Vec<f64>> {
        self.session.prm_scores(self.enc, paths, self.trie)
    }
}

/// Search output: final ranking, the retained beam at every depth, and
/// instrumentation counters.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub ranked: Vec<ScoredPath>,
    /// `snapshots[b-1]` is the retained beam after depth `b`, in retained
    /// order.
    pub snapshots: Vec<Vec<ScoredPath>>,
    pub decode_calls: usize,
    pub prm_paths_scored: usize,
}

/// Renormalized log-probabilities over the valid tokens of a prefix.
/// Returns `(token, logprob)` pairs in the order of `valid`.
pub fn masked_log_probs(logits: &[f64], valid: &[u16]) -> Vec<(u16, f64)> {
    let picked: Vec<f64> = valid.iter().map(|&t| logits[t as usize]).collect();
    let lse = crate::tensor::logsumexp(&picked);
    valid
        .iter()
        .zip(picked)
        .map(|(&t, l)| (t, l - lse))
        .collect()
}

fn all_tokens(m: usize) -> Vec<u16> {
    (0..m as u16).collect()
}

fn cmp_by_logprob(a: &ScoredPath, b: &ScoredPath) -> Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.path.cmp(&b.path))
}

fn cmp_by_prm(a: &ScoredPath, b: &ScoredPath) -> Ordering {
    let pa = a.prm_score.expect("reward-ranked path has a score");
    let pb = b.prm_score.expect("reward-ranked path has a score");
    pb.partial_cmp(&pa)
        .unwrap_or(Ordering::Equal)
        .then_with(|| cmp_by_logprob(a, b))
}

/// Classic beam search: expand every beam path with all its valid
/// extensions, keep the top `k` by cumulative log-probability per depth.
/// Final order is log-probability descending, ties lexicographic.
pub fn beam_search_standard(
    model: &mut dyn SearchModel,
    k: usize,
    trie: &PrefixTrie,
    constrained: bool,
) -> Result<SearchResult> {
    if k < 1 {
        return Err(Error::config("beam size must be at least 1"));
    }
    let depth = trie.depth();
    let mut beam = vec![ScoredPath {
        path: SemanticPath::empty(),
        logprob: 0.0,
        prm_score: None,
    }];
    let mut snapshots = Vec::with_capacity(depth);
    let mut decode_calls = 0;
    for _ in 1..=depth {
        let mut candidates = Vec::new();
        for parent in &beam {
            let logits = model.next_logits(&parent.path)?;
            decode_calls += 1;
            let valid = if constrained {
                trie.valid_extensions(&parent.path)
            } else {
                all_tokens(logits.len())
            };
            for (tok, lp) in masked_log_probs(&logits, &valid) {
                candidates.push(ScoredPath {
                    path: parent.path.extended(tok),
                    logprob: parent.logprob + lp,
                    prm_score: None,
                });
            }
        }
        candidates.sort_by(cmp_by_logprob);
        candidates.truncate(k);
        snapshots.push(candidates.clone());
        beam = candidates;
    }
    Ok(SearchResult {
        ranked: beam,
        snapshots,
        decode_calls,
        prm_paths_scored: 0,
    })
}

/// Reward-guided beam search.
///
/// Per depth: every beam path expands with its top-`K` extensions by
/// probability; the union is pruned to the top-`K⁺` candidates by cumulative
/// log-probability; at reward-enabled depths all `K⁺` candidates are scored
/// in one batch and the top-`K′` by reward score survive (log-probabilities
/// carry forward unchanged); at disabled depths the top-`K′` by
/// log-probability survive. The final ranking follows the last selection
/// rule applied at depth `d`.
pub fn beam_search_prm(
    model: &mut dyn SearchModel,
    config: &BeamConfig,
    trie: &PrefixTrie,
) -> Result<SearchResult> {
    let depth = trie.depth();
    config.validate(depth)?;
    if config.prm_depths.iter().any(|&f| f) && !model.has_path_scorer() {
        return Err(Error::config(
            "reward scoring enabled but the search model has no path scorer",
        ));
    }

    let mut beam = vec![ScoredPath {
        path: SemanticPath::empty(),
        logprob: 0.0,
        prm_score: None,
    }];
    let mut snapshots = Vec::with_capacity(depth);
    let mut decode_calls = 0;
    let mut prm_paths_scored = 0;

    for b in 1..=depth {
        let mut candidates = Vec::new();
        for parent in &beam {
            let logits = model.next_logits(&parent.path)?;
            decode_calls += 1;
            let valid = if config.constrained {
                trie.valid_extensions(&parent.path)
            } else {
                all_tokens(logits.len())
            };
            let mut extensions = masked_log_probs(&logits, &valid);
            extensions.sort_by(|x, y| {
                y.1.partial_cmp(&x.1)
                    .unwrap_or(Ordering::Equal)
                    .then(x.0.cmp(&y.0))
            });
            extensions.truncate(config.beam_size);
            for (tok, lp) in extensions {
                candidates.push(ScoredPath {
                    path: parent.path.extended(tok),
                    logprob: parent.logprob + lp,
                    prm_score: None,
                });
            }
        }
        candidates.sort_by(cmp_by_logprob);
        candidates.truncate(config.k_plus);

        let retained = if config.prm_depths[b - 1] {
            let paths: Vec<SemanticPath> =
                candidates.iter().map(|c| c.path.clone()).collect();
            let scores = model.score_paths(&paths)?;
            prm_paths_scored += paths.len();
            let mut scored: Vec<ScoredPath> = candidates
                .into_iter()
                .zip(scores)
                .map(|(mut c, s)| {
                    c.prm_score = Some(s);
                    c
                })
                .collect();
            scored.sort_by(cmp_by_prm);
            scored.truncate(config.k_prime);
            scored
        } else {
            candidates.truncate(config.k_prime);
            candidates
        };
        snapshots.push(retained.clone());
        beam = retained;
    }

    Ok(SearchResult {
        ranked: beam,
        snapshots,
        decode_calls,
        prm_paths_scored,
    })
}

/// Exhaustive guard for [`brute_force_decode`].
pub const BRUTE_FORCE_LIMIT: usize = 65_536;

/// Evaluate the exact joint log-probability of every valid full path and
/// return the top `k`. The stepwise accumulation matches beam search
/// bit for bit.
pub fn brute_force_decode(
    model: &mut dyn SearchModel,
    k: usize,
    trie: &PrefixTrie,
) -> Result<Vec<ScoredPath>> {
    let total = trie.valid_count(trie.depth());
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::config(format!(
            "brute-force decode over {total} paths exceeds the {BRUTE_FORCE_LIMIT} guard"
        )));
    }
    let mut full: Vec<ScoredPath> = Vec::with_capacity(total);
    let mut stack: Vec<(SemanticPath, f64)> = vec![(SemanticPath::empty(), 0.0)];
    // Depth-first in reverse token order so paths pop in lexicographic order.
    while let Some((prefix, lp)) = stack.pop() {
        if prefix.len() == trie.depth() {
            full.push(ScoredPath {
                path: prefix,
                logprob: lp,
                prm_score: None,
            });
            continue;
        }
        let logits = model.next_logits(&prefix)?;
        let valid = trie.valid_extensions(&prefix);
        for (tok, step_lp) in masked_log_probs(&logits, &valid).into_iter().rev() {
            stack.push((prefix.extended(tok), lp + step_lp));
        }
    }
    debug_assert_eq!(full.len(), total);
    let scores: Vec<f64> = full.iter().map(|p| p.logprob).collect();
    let top = radix_topk(&scores, k);
    Ok(top.into_iter().map(|i| full[i].clone()).collect())
}

/// Negative log-likelihood of a full path under the constrained model:
/// `-Σ_b log p(s_b | s_<b)` with probabilities renormalized over valid
/// extensions at each step.
pub fn constrained_path_nll(
    model: &mut dyn SearchModel,
    trie: &PrefixTrie,
    path: &SemanticPath,
) -> Result<f64> {
    let mut nll = 0.0;
    for b in 0..path.len() {
        let prefix = path.prefix(b);
        let logits = model.next_logits(&prefix)?;
        let valid = trie.valid_extensions(&prefix);
        let tok = path.tokens()[b];
        let lp = masked_log_probs(&logits, &valid)
            .into_iter()
            .find(|&(t, _)| t == tok)
            .ok_or_else(|| Error::usage(format!("path {path} leaves the trie at depth {b}")))?
            .1;
        nll -= lp;
    }
    Ok(nll)
}
