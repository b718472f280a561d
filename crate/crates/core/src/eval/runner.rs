//! Per-user evaluation drivers: single runs, candidate-width scaling sweeps,
//! and the per-depth ablation grid.
//!
//! Users evaluate independently against shared read-only parameters; with
//! `workers > 1` they run on a rayon pool. Per-user results collect in input
//! order and reduce sequentially, so outputs are identical for any worker
//! count.

use rayon::prelude::*;

use super::flops::{flops_estimate, FlopsBreakdown};
use super::{macro_mean, user_hrecall, user_ndcg_at_k, user_recall_at_k};
use crate::error::{Error, Result};
use crate::model::{ModelParams, PathExample, Session};
use crate::search::{beam_search_prm, beam_search_standard, BeamConfig, ModelSearch};
use crate::tokenizer::{PrefixTrie, SemanticPath};

/// One user's search outcome, kept raw for metric computation and export.
#[derive(Debug, Clone)]
pub struct UserEval {
    pub user_id: u64,
    pub truth: Vec<SemanticPath>,
    /// Final ranking with log-probabilities and optional reward scores.
    pub ranked: Vec<crate::search::ScoredPath>,
    /// Retained beam paths per depth.
    pub snapshots: Vec<Vec<SemanticPath>>,
    pub decode_calls: usize,
    pub prm_paths_scored: usize,
}

/// Aggregated evaluation of one beam configuration.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub users: Vec<UserEval>,
    /// Macro-averaged hierarchical recall per depth, at `k = K′`.
    pub hrecall_by_depth: Vec<f64>,
    pub recall_at: Vec<(usize, f64)>,
    pub ndcg_at: Vec<(usize, f64)>,
    pub skipped_users: usize,
    pub decode_calls: usize,
    pub prm_paths_scored: usize,
    /// Closed-form per-user FLOPs under this configuration (history length
    /// taken as `t_max`).
    pub flops: FlopsBreakdown,
}

fn run_user(
    params: &ModelParams,
    trie: &PrefixTrie,
    beam: &BeamConfig,
    example: &PathExample,
) -> Result<UserEval> {
    let mut session = Session::new(params);
    let enc = session.encode_history(&example.history)?;
    let mut model = ModelSearch {
        session: &mut session,
        enc,
        trie,
    };
    let result = if beam.prm_depths.iter().any(|&f| f) {
        beam_search_prm(&mut model, beam, trie)?
    } else {
        beam_search_standard(&mut model, beam.k_prime, trie, beam.constrained)?
    };
    Ok(UserEval {
        user_id: example.user_id,
        truth: vec![example.target.clone()],
        snapshots: result
            .snapshots
            .iter()
            .map(|snap| snap.iter().map(|s| s.path.clone()).collect())
            .collect(),
        ranked: result.ranked,
        decode_calls: result.decode_calls,
        prm_paths_scored: result.prm_paths_scored,
    })
}

/// Evaluate one beam configuration over a test set.
pub fn evaluate(
    params: &ModelParams,
    trie: &PrefixTrie,
    examples: &[PathExample],
    beam: &BeamConfig,
    ks: &[usize],
    workers: usize,
) -> Result<EvalRun> {
    beam.validate(trie.depth())?;
    let users: Vec<UserEval> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?;
        pool.install(|| {
            examples
                .par_iter()
                .map(|ex| run_user(params, trie, beam, ex))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        examples
            .iter()
            .map(|ex| run_user(params, trie, beam, ex))
            .collect::<Result<Vec<_>>>()?
    };

    let depth = trie.depth();
    let k_retained = beam.k_prime;
    let mut hrecall_by_depth = Vec::with_capacity(depth);
    let mut skipped = 0;
    for b in 1..=depth {
        let per_user: Vec<Option<f64>> = users
            .iter()
            .map(|u| user_hrecall(&u.snapshots, &u.truth, b, k_retained))
            .collect::<Result<Vec<_>>>()?;
        let (mean, sk) = macro_mean(per_user);
        hrecall_by_depth.push(mean);
        if b == 1 {
            skipped = sk;
        }
    }

    let ranked_paths: Vec<Vec<SemanticPath>> = users
        .iter()
        .map(|u| u.ranked.iter().map(|s| s.path.clone()).collect())
        .collect();
    let recall_at = ks
        .iter()
        .map(|&k| {
            let (mean, _) = macro_mean(
                users
                    .iter()
                    .zip(&ranked_paths)
                    .map(|(u, r)| user_recall_at_k(r, &u.truth, k)),
            );
            (k, mean)
        })
        .collect();
    let ndcg_at = ks
        .iter()
        .map(|&k| {
            let (mean, _) = macro_mean(
                users
                    .iter()
                    .zip(&ranked_paths)
                    .map(|(u, r)| user_ndcg_at_k(r, &u.truth, k)),
            );
            (k, mean)
        })
        .collect();

    Ok(EvalRun {
        decode_calls: users.iter().map(|u| u.decode_calls).sum(),
        prm_paths_scored: users.iter().map(|u| u.prm_paths_scored).sum(),
        flops: flops_estimate(&params.config, beam, params.config.t_max),
        users,
        hrecall_by_depth,
        recall_at,
        ndcg_at,
        skipped_users: skipped,
    })
}

/// Test-time scaling sweep: hold `K = K′` fixed and grow the candidate set.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub k_plus_values: Vec<usize>,
    /// Fixed retained width (`K = K′`).
    pub k: usize,
    pub prm_depths: Vec<bool>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_plus_values.is_empty() {
            return Err(Error::config("sweep: no K+ values"));
        }
        if let Some(&min) = self.k_plus_values.iter().min() {
            if self.k > min {
                return Err(Error::config(format!(
                    "sweep: retained width {} exceeds smallest K+ {min}",
                    self.k
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub k_plus: usize,
    pub hrecall_by_depth: Vec<f64>,
    pub decoder_flops: f64,
    pub prm_flops: f64,
    pub decode_calls: usize,
}

pub fn scaling_sweep(
    params: &ModelParams,
    trie: &PrefixTrie,
    examples: &[PathExample],
    spec: &SweepSpec,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.k_plus_values.len());
    for &k_plus in &spec.k_plus_values {
        let beam = BeamConfig {
            beam_size: spec.k,
            k_plus,
            k_prime: spec.k,
            prm_depths: spec.prm_depths.clone(),
            constrained: true,
        };
        let run = evaluate(params, trie, examples, &beam, &[], workers)?;
        rows.push(SweepRow {
            k_plus,
            hrecall_by_depth: run.hrecall_by_depth,
            decoder_flops: run.flops.decoder,
            prm_flops: run.flops.prm_total(),
            decode_calls: run.decode_calls,
        });
    }
    Ok(rows)
}

/// One ablation configuration: which depths get reward selection.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub id: usize,
    pub flags: Vec<bool>,
    pub hrecall_by_depth: Vec<f64>,
}

/// All `2^d` per-depth flag combinations at fixed `K = K′` and `K⁺`.
///
/// For `d = 3` rows follow the conventional presentation order: none, each
/// single depth ascending, each pair keyed by its disabled depth ascending,
/// then all. Other depths fall back to (enabled-count, flags) order.
pub fn ablation_grid(
    params: &ModelParams,
    trie: &PrefixTrie,
    examples: &[PathExample],
    k: usize,
    k_plus: usize,
    workers: usize,
) -> Result<Vec<AblationRow>> {
    let depth = trie.depth();
    let combos: Vec<Vec<bool>> = if depth == 3 {
        vec![
            vec![false, false, false],
            vec![true, false, false],
            vec![false, true, false],
            vec![false, false, true],
            vec![false, true, true],
            vec![true, false, true],
            vec![true, true, false],
            vec![true, true, true],
        ]
    } else {
        let mut all: Vec<Vec<bool>> = (0..1usize << depth)
            .map(|mask| (0..depth).map(|b| mask >> b & 1 == 1).collect())
            .collect();
        all.sort_by_key(|flags| {
            let count = flags.iter().filter(|&&f| f).count();
            let pattern: Vec<bool> = flags.iter().map(|&f| !f).collect();
            (count, pattern)
        });
        all
    };

    let mut rows = Vec::with_capacity(combos.len());
    for (id, flags) in combos.into_iter().enumerate() {
        let beam = BeamConfig {
            beam_size: k,
            k_plus,
            k_prime: k,
            prm_depths: flags.clone(),
            constrained: true,
        };
        let run = evaluate(params, trie, examples, &beam, &[], workers)?;
        rows.push(AblationRow {
            id: id + 1,
            flags,
            hrecall_by_depth: run.hrecall_by_depth,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::seed::SeedTree;

    fn p(tokens: &[u16]) -> SemanticPath {
        SemanticPath::new(tokens.to_vec())
    }

    fn setup() -> (ModelParams, PrefixTrie, Vec<PathExample>) {
        let cfg = ModelConfig {
            d_h: 8,
            blocks: 1,
            prm_blocks: 1,
            heads: 2,
            prm_heads: 1,
            depth: 3,
            codebook_size: 4,
            t_max: 4,
            n_neg: 2,
            ffn_mult: 2,
        };
        let catalog: Vec<SemanticPath> = (0..16u16)
            .map(|i| p(&[i % 4, (i / 4) % 4, (i * 3 + 1) % 4]))
            .collect();
        let trie = PrefixTrie::build(&catalog, 3).unwrap();
        let mut rng = SeedTree::new(3).rng("params");
        let params = ModelParams::init(&cfg, trie.total_valid_paths(), &mut rng).unwrap();
        let examples: Vec<PathExample> = (0..6)
            .map(|u| PathExample {
                user_id: u as u64,
                history: vec![catalog[u].clone(), catalog[u + 3].clone()],
                target: catalog[(u * 5 + 2) % 16].clone(),
            })
            .collect();
        (params, trie, examples)
    }

    #[test]
    fn hit_indicators_are_monotone_in_depth() {
        let (params, trie, examples) = setup();
        let beam = BeamConfig::all_on(3, 6, 3, 3);
        let run = evaluate(&params, &trie, &examples, &beam, &[1, 3], 1).unwrap();
        for user in &run.users {
            let mut previous = true;
            for b in 1..=3 {
                let hit = user_hrecall(&user.snapshots, &user.truth, b, 3)
                    .unwrap()
                    .unwrap()
                    > 0.0;
                assert!(!(hit && !previous), "hit after a miss at depth {b}");
                previous = hit;
            }
        }
    }

    #[test]
    fn hrecall_at_full_depth_equals_recall_at_k_prime() {
        let (params, trie, examples) = setup();
        for beam in [BeamConfig::all_on(3, 6, 3, 3), BeamConfig::all_off(3, 3)] {
            let run = evaluate(&params, &trie, &examples, &beam, &[3], 1).unwrap();
            let recall = run.recall_at.iter().find(|(k, _)| *k == 3).unwrap().1;
            assert_eq!(
                run.hrecall_by_depth[2].to_bits(),
                recall.to_bits(),
                "HRecall@d@K′ must equal Recall@K′"
            );
        }
    }

    #[test]
    fn worker_counts_do_not_change_results() {
        let (params, trie, examples) = setup();
        let beam = BeamConfig::all_on(3, 6, 3, 3);
        let a = evaluate(&params, &trie, &examples, &beam, &[1], 1).unwrap();
        let b = evaluate(&params, &trie, &examples, &beam, &[1], 2).unwrap();
        for (x, y) in a.hrecall_by_depth.iter().zip(&b.hrecall_by_depth) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.decode_calls, b.decode_calls);
    }

    #[test]
    fn sweep_keeps_decoder_work_constant() {
        let (params, trie, examples) = setup();
        let spec = SweepSpec {
            k_plus_values: vec![3, 6, 9],
            k: 3,
            prm_depths: vec![true, true, true],
        };
        let rows = scaling_sweep(&params, &trie, &examples, &spec, 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.windows(2).all(|w| {
            w[0].decode_calls == w[1].decode_calls
                && w[0].decoder_flops == w[1].decoder_flops
        }));
        assert!(rows[1].prm_flops > rows[0].prm_flops);
        // Degenerate K⁺ = K′ row matches plain beam search.
        let standard = evaluate(
            &params,
            &trie,
            &examples,
            &BeamConfig::all_off(3, 3),
            &[],
            1,
        )
        .unwrap();
        for (a, b) in rows[0]
            .hrecall_by_depth
            .iter()
            .zip(&standard.hrecall_by_depth)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sweep_rejects_k_above_smallest_k_plus() {
        let spec = SweepSpec {
            k_plus_values: vec![4, 8],
            k: 6,
            prm_depths: vec![true; 3],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn ablation_emits_all_rows_in_conventional_order() {
        let (params, trie, examples) = setup();
        let rows = ablation_grid(&params, &trie, &examples, 3, 6, 1).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].flags, vec![false, false, false]);
        assert_eq!(rows[1].flags, vec![true, false, false]);
        assert_eq!(rows[4].flags, vec![false, true, true]);
        assert_eq!(rows[7].flags, vec![true, true, true]);
        // All-off row equals the plain-beam baseline.
        let standard = evaluate(
            &params,
            &trie,
            &examples,
            &BeamConfig::all_off(3, 3),
            &[],
            1,
        )
        .unwrap();
        for (a, b) in rows[0]
            .hrecall_by_depth
            .iter()
            .zip(&standard.hrecall_by_depth)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Depth-1-only flags leave deeper selection by log-probability: the
        // row still reports all depths.
        assert_eq!(rows[1].hrecall_by_depth.len(), 3);
    }
}
