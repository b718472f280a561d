//! Joint end-to-end training with Adam, per-epoch validation recall, early
//! stopping, and best-checkpoint retention.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::batch_loss;
use super::net::ModelVars;
use super::{ModelConfig, ModelParams, PathExample};
use crate::error::{Error, Result};
use crate::search::{beam_search_standard, ModelSearch};
use crate::seed::SeedTree;
use crate::tensor::{adam_step, AdamHyper, AdamState, Tape};
use crate::tokenizer::PrefixTrie;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    /// Validation Recall@k (also the validation beam width).
    pub val_k: usize,
    /// Evaluate validation on at most this many examples (all when absent).
    pub val_user_cap: Option<usize>,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop once the epoch-mean NTP loss drops below this (overfit runs).
    pub stop_at_ntp: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            patience: 20,
            val_k: 10,
            val_user_cap: None,
            max_steps: None,
            stop_at_ntp: None,
        }
    }
}

/// One training-log line (one per epoch).
#[derive(Debug, Clone)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub ntp_loss: f64,
    pub infonce_loss: f64,
    pub total_loss: f64,
    pub val_recall: f64,
}

pub struct TrainOutcome {
    /// Best-validation parameters (final parameters when no validation set).
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub best_val_recall: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
}

pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,step,ntp_loss,infonce_loss,total_loss,val_recall@k")?;
    for row in log {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.epoch, row.step, row.ntp_loss, row.infonce_loss, row.total_loss, row.val_recall
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of validation examples whose target path lands in the top-`k`
/// of a standard beam of width `k`.
pub fn validation_recall(
    params: &ModelParams,
    trie: &PrefixTrie,
    examples: &[PathExample],
    k: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0usize;
    for example in examples {
        let mut session = super::Session::new(params);
        let enc = session.encode_history(&example.history)?;
        let mut model = ModelSearch {
            session: &mut session,
            enc,
            trie,
        };
        let result = beam_search_standard(&mut model, k, trie, true)?;
        if result.ranked.iter().any(|s| s.path == example.target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Train from a fresh init. All randomness (init, shuffling, negative
/// sampling) flows from the seed tree.
pub fn train(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    train_examples: &[PathExample],
    val_examples: &[PathExample],
    trie: &PrefixTrie,
    seeds: &SeedTree,
) -> Result<TrainOutcome> {
    if train_examples.is_empty() {
        return Err(Error::config("train: no training examples"));
    }
    let mut init_rng = seeds.rng("model-init");
    let mut params = ModelParams::init(config, trie.total_valid_paths(), &mut init_rng)?;
    let mut neg_rng = seeds.rng("negatives");
    let mut shuffle_rng = seeds.rng("shuffle");

    let hyper = AdamHyper {
        lr: train_cfg.lr,
        ..Default::default()
    };
    let mut adam_states: Vec<AdamState> = {
        let mut sizes = Vec::new();
        params.for_each_tensor(|_, t| sizes.push(t.numel()));
        sizes.into_iter().map(AdamState::new).collect()
    };

    let val_cap = train_cfg.val_user_cap.unwrap_or(usize::MAX);
    let val_slice = &val_examples[..val_examples.len().min(val_cap)];

    let mut log = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params: Option<ModelParams> = None;
    let mut bad_epochs = 0usize;
    let mut step = 0usize;
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train_examples.len()).collect();
    'epochs: for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_ntp = 0.0;
        let mut epoch_infonce = 0.0;
        let mut epoch_total = 0.0;
        let mut seen = 0usize;

        for chunk in order.chunks(train_cfg.batch_size) {
            if let Some(max) = train_cfg.max_steps {
                if step >= max {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            let batch: Vec<PathExample> = chunk
                .iter()
                .map(|&i| train_examples[i].clone())
                .collect();

            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, &params, true);
            let (loss, terms) = batch_loss(&mut tape, &vars, config, trie, &batch, &mut neg_rng)?;
            if !terms.total.is_finite() {
                return Err(Error::numeric(format!(
                    "loss diverged to {} at epoch {epoch} step {step}",
                    terms.total
                )));
            }
            let mut grads = tape.backward(loss)?;
            let ordered = vars.ordered();
            step += 1;

            let mut idx = 0usize;
            let mut apply_err: Option<Error> = None;
            params.for_each_tensor_mut(|_, tensor| {
                if let Some(grad) = grads.take(ordered[idx]) {
                    if let Err(e) =
                        adam_step(tensor, &grad, &mut adam_states[idx], step as u64, &hyper)
                    {
                        apply_err.get_or_insert(e);
                    }
                }
                idx += 1;
            });
            if let Some(e) = apply_err {
                return Err(e);
            }
            if !params.all_finite() {
                return Err(Error::numeric(format!(
                    "parameters became non-finite at epoch {epoch} step {step}"
                )));
            }

            epoch_ntp += terms.ntp * chunk.len() as f64;
            epoch_infonce += terms.infonce * chunk.len() as f64;
            epoch_total += terms.total * chunk.len() as f64;
            seen += chunk.len();
        }

        let denom = seen.max(1) as f64;
        let val_recall = validation_recall(&params, trie, val_slice, train_cfg.val_k)?;
        log.push(LogRow {
            epoch,
            step,
            ntp_loss: epoch_ntp / denom,
            infonce_loss: epoch_infonce / denom,
            total_loss: epoch_total / denom,
            val_recall,
        });

        if !val_slice.is_empty() {
            if val_recall > best_val {
                best_val = val_recall;
                best_params = Some(params.clone());
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs >= train_cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        if let Some(threshold) = train_cfg.stop_at_ntp {
            if epoch_ntp / denom < threshold {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params.unwrap_or(params),
        log,
        best_val_recall: best_val,
        steps_run: step,
        stopped_early,
    })
}
