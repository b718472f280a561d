//! Training objectives: next-token prediction over the target path, and the
//! per-depth contrastive loss on reward-model scores, summed and averaged
//! over a batch.

use rand_chacha::ChaCha8Rng;

use super::net::{decoder_states, level_logits, prm_scores, ModelVars};
use super::{ModelConfig, PathExample};
use crate::error::Result;
use crate::tensor::{logsumexp, Tape, Var};
use crate::tokenizer::{PrefixTrie, SemanticPath};

/// Negative log-likelihood of the target path under teacher forcing:
/// `-Σ_b log p(s_b | s_<b, history)`, softmax over the full codebook.
pub fn ntp_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    enc: Var,
    target: &SemanticPath,
) -> Result<Var> {
    debug_assert_eq!(target.len(), cfg.depth, "ntp target must be a full path");
    let states = decoder_states(tape, vars, cfg, enc, &target.tokens()[..cfg.depth - 1])?;
    let mut total: Option<Var> = None;
    for level in 0..cfg.depth {
        let state = tape.gather_rows(states, &[level])?;
        let logits = level_logits(tape, vars, level, state)?;
        let logp = tape.log_softmax_rows(logits)?;
        let picked = tape.select_per_row(logp, &[target.tokens()[level] as usize])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, picked)?,
            None => picked,
        });
    }
    tape.scale(total.expect("depth >= 1"), -1.0)
}

/// Contrastive loss over a score column whose first row is the positive:
/// `-log( exp(pos) / (exp(pos) + Σ exp(neg)) )`, in log-sum-exp form.
pub fn infonce(tape: &mut Tape, scores: Var) -> Result<Var> {
    let row = tape.transpose(scores)?;
    let lse = tape.logsumexp_rows(row)?;
    let pos = tape.gather_rows(scores, &[0])?;
    tape.sub(lse, pos)
}

/// Scalar-form contrastive loss for oracles and reports.
pub fn infonce_scalar(pos: f64, negs: &[f64]) -> f64 {
    let mut all = Vec::with_capacity(negs.len() + 1);
    all.push(pos);
    all.extend_from_slice(negs);
    logsumexp(&all) - pos
}

/// Per-term loss values of a batch, for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub ntp: f64,
    pub infonce: f64,
    pub total: f64,
}

/// Joint loss over a batch: mean of `ntp + Σ_b infonce_b`, with `n_neg`
/// fresh uniform negatives per depth drawn from the valid-path sets.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    trie: &PrefixTrie,
    batch: &[PathExample],
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossTerms)> {
    let mut total: Option<Var> = None;
    let mut ntp_sum = 0.0;
    let mut info_sum = 0.0;
    for example in batch {
        let enc = super::net::encode_history(tape, vars, cfg, &example.history)?;
        let ntp = ntp_loss(tape, vars, cfg, enc, &example.target)?;
        ntp_sum += tape.value(ntp).item();
        let mut example_total = ntp;
        for b in 1..=cfg.depth {
            let positive = example.target.prefix(b);
            let negatives = trie.sample_negatives(&positive, cfg.n_neg, rng);
            if negatives.paths.is_empty() {
                continue;
            }
            let mut paths = Vec::with_capacity(1 + negatives.paths.len());
            paths.push(positive);
            paths.extend(negatives.paths);
            let scores = prm_scores(tape, vars, cfg, enc, &paths, trie)?;
            let contrast = infonce(tape, scores)?;
            info_sum += tape.value(contrast).item();
            example_total = tape.add(example_total, contrast)?;
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, example_total)?,
            None => example_total,
        });
    }
    let total = total.ok_or_else(|| crate::error::Error::usage("batch_loss: empty batch"))?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    let n = batch.len() as f64;
    Ok((
        mean,
        LossTerms {
            ntp: ntp_sum / n,
            infonce: info_sum / n,
            total: tape.value(mean).item(),
        },
    ))
}
