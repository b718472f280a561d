//! Retrieval metrics and experiment drivers.
//!
//! Metrics are computed per user and macro-averaged (every user weighs 1);
//! users with an empty ground-truth set are skipped and counted. All metrics
//! operate on paths: items colliding onto one Semantic ID collapse together.

mod flops;
mod report;
mod runner;

pub use flops::{decoder_call_flops, encoder_flops, flops_estimate, FlopsBreakdown};
pub use report::{
    write_ablation_csv, write_metric_rows_csv, write_retrieval_csv, write_sweep_csv,
    write_sweep_plot_data, MetricRow,
};
pub use runner::{
    ablation_grid, evaluate, scaling_sweep, AblationRow, EvalRun, SweepRow, SweepSpec, UserEval,
};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tokenizer::SemanticPath;

fn truth_set(truth: &[SemanticPath]) -> HashSet<&SemanticPath> {
    truth.iter().collect()
}

fn hit_count<'a>(
    paths: impl Iterator<Item = &'a SemanticPath>,
    set: &HashSet<&SemanticPath>,
) -> usize {
    paths.filter(|p| set.contains(*p)).count()
}

/// `|top-k ∩ S| / |S|` for one user; `None` when `S` is empty (the user is
/// skipped and counted by the caller).
pub fn user_recall_at_k(
    ranked: &[SemanticPath],
    truth: &[SemanticPath],
    k: usize,
) -> Option<f64> {
    let set = truth_set(truth);
    if set.is_empty() {
        return None;
    }
    let hits = hit_count(ranked.iter().take(k), &set);
    Some(hits as f64 / set.len() as f64)
}

/// Binary-gain NDCG: each ground-truth hit at 1-indexed position `p` gains
/// `1/log2(p+1)`; the ideal places `min(|S|, k)` hits on top.
pub fn user_ndcg_at_k(ranked: &[SemanticPath], truth: &[SemanticPath], k: usize) -> Option<f64> {
    let set = truth_set(truth);
    if set.is_empty() {
        return None;
    }
    let discount = |p: usize| 1.0 / ((p + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, path)| set.contains(path))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal_hits = set.len().min(k);
    let idcg: f64 = (1..=ideal_hits).map(discount).sum();
    Some(dcg / idcg)
}

/// Hierarchical recall at depth `b`: the fraction of ground-truth length-`b`
/// prefixes present among the (at most `k`) paths the beam retained at that
/// depth.
pub fn user_hrecall(
    snapshots: &[Vec<SemanticPath>],
    truth: &[SemanticPath],
    b: usize,
    k: usize,
) -> Result<Option<f64>> {
    let beam = snapshots.get(b.wrapping_sub(1)).ok_or_else(|| {
        Error::usage(format!(
            "missing beam snapshot for depth {b} (have {})",
            snapshots.len()
        ))
    })?;
    let prefixes: Vec<SemanticPath> = truth.iter().map(|s| s.prefix(b)).collect();
    let set = truth_set(&prefixes);
    if set.is_empty() {
        return Ok(None);
    }
    let hits = hit_count(beam.iter().take(k), &set);
    Ok(Some(hits as f64 / set.len() as f64))
}

/// Macro average; returns the mean over present values and the skip count.
pub fn macro_mean(values: impl IntoIterator<Item = Option<f64>>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    let mean = if n > 0 { sum / n as f64 } else { f64::NAN };
    (mean, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(tokens: &[u16]) -> SemanticPath {
        SemanticPath::new(tokens.to_vec())
    }

    #[test]
    fn recall_hits_and_misses() {
        let ranked = vec![p(&[1, 1]), p(&[2, 2]), p(&[3, 3])];
        assert_eq!(user_recall_at_k(&ranked, &[p(&[1, 1])], 5), Some(1.0));
        assert_eq!(user_recall_at_k(&ranked, &[p(&[9, 9])], 3), Some(0.0));
        // |S| = 2 with one member ranked -> 0.5.
        assert_eq!(
            user_recall_at_k(&ranked, &[p(&[2, 2]), p(&[8, 8])], 3),
            Some(0.5)
        );
        assert_eq!(user_recall_at_k(&ranked, &[], 3), None);
    }

    #[test]
    fn ndcg_positions_discount() {
        let ranked = vec![p(&[1]), p(&[2]), p(&[3]), p(&[4])];
        assert_eq!(user_ndcg_at_k(&ranked, &[p(&[1])], 4), Some(1.0));
        // Single target at rank 3: 1/log2(4) = 0.5.
        assert_eq!(user_ndcg_at_k(&ranked, &[p(&[3])], 4), Some(0.5));
        assert_eq!(user_ndcg_at_k(&ranked, &[p(&[9])], 4), Some(0.0));
    }

    #[test]
    fn hrecall_prefix_containment_and_drift() {
        // Target [0,1,2]; the beam holds its prefix at depth 1, loses it at
        // depths 2 and 3: 1.0 then 0.0 then 0.0.
        let truth = vec![p(&[0, 1, 2])];
        let snapshots = vec![
            vec![p(&[0]), p(&[3])],
            vec![p(&[3, 0]), p(&[3, 1])],
            vec![p(&[3, 0, 0]), p(&[3, 1, 1])],
        ];
        assert_eq!(user_hrecall(&snapshots, &truth, 1, 2).unwrap(), Some(1.0));
        assert_eq!(user_hrecall(&snapshots, &truth, 2, 2).unwrap(), Some(0.0));
        assert_eq!(user_hrecall(&snapshots, &truth, 3, 2).unwrap(), Some(0.0));
        assert!(user_hrecall(&snapshots, &truth, 4, 2).is_err());
    }

    #[test]
    fn hrecall_full_path_in_final_beam_hits_every_depth() {
        let truth = vec![p(&[0, 1, 2])];
        let snapshots = vec![
            vec![p(&[0])],
            vec![p(&[0, 1])],
            vec![p(&[0, 1, 2])],
        ];
        for b in 1..=3 {
            assert_eq!(user_hrecall(&snapshots, &truth, b, 1).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn hrecall_at_full_depth_equals_recall_bit_exactly() {
        let ranked = vec![p(&[0, 1]), p(&[2, 2]), p(&[4, 0])];
        let snapshots = vec![vec![p(&[0]), p(&[2]), p(&[4])], ranked.clone()];
        for truth in [
            vec![p(&[2, 2])],
            vec![p(&[0, 1]), p(&[9, 9])],
            vec![p(&[4, 0]), p(&[0, 1]), p(&[2, 2])],
        ] {
            let r = user_recall_at_k(&ranked, &truth, 3).unwrap();
            let h = user_hrecall(&snapshots, &truth, 2, 3).unwrap().unwrap();
            assert_eq!(r.to_bits(), h.to_bits());
        }
    }

    #[test]
    fn macro_mean_counts_skips() {
        let (mean, skipped) = macro_mean([Some(1.0), None, Some(0.0)]);
        assert_eq!(mean, 0.5);
        assert_eq!(skipped, 1);
        let (empty_mean, _) = macro_mean([None]);
        assert!(empty_mean.is_nan());
    }
}
