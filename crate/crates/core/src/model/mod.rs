//! Encoder-decoder generative backbone with a path-level reward model.
//!
//! The encoder reads a user's item history (each item embedded as the sum of
//! its Semantic ID token embeddings plus a position). The decoder generates
//! the target Semantic ID level by level, scoring each level against its own
//! learnable output codebook. The path-level reward head embeds a candidate
//! prefix as a single token, cross-attends into the encoder states, and emits
//! one scalar logit; it trains contrastively against uniformly sampled valid
//! negatives, jointly with next-token prediction.

mod loss;
mod net;
mod train;

pub use loss::{batch_loss, infonce, infonce_scalar, ntp_loss, LossTerms};
pub use net::{
    decode_step, decoder_states, encode_history, level_logits, prm_scores, ModelVars, Session,
    RMS_EPS,
};
pub use train::{train, validation_recall, write_log_csv, LogRow, TrainConfig, TrainOutcome};

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::tensor::{load_tensors, save_tensors, Tensor};
use crate::tokenizer::SemanticPath;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden size.
    pub d_h: usize,
    /// Encoder and decoder block count.
    pub blocks: usize,
    /// Reward-model cross-attention block count.
    pub prm_blocks: usize,
    pub heads: usize,
    /// Reward-model head count; defaults to a quarter of the main heads.
    pub prm_heads: usize,
    /// Semantic ID depth.
    pub depth: usize,
    /// Codebook size per level.
    pub codebook_size: usize,
    /// Maximum encoder history length; older items are truncated.
    pub t_max: usize,
    /// Negatives per depth for contrastive training.
    pub n_neg: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 64,
            blocks: 2,
            prm_blocks: 1,
            heads: 4,
            prm_heads: 1,
            depth: 3,
            codebook_size: 32,
            t_max: 32,
            n_neg: 32,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.blocks == 0 || self.depth == 0 || self.codebook_size == 0 {
            return Err(Error::config("model: sizes must be positive"));
        }
        if self.d_h % self.heads != 0 {
            return Err(Error::config(format!(
                "model: d_h {} not divisible by heads {}",
                self.d_h, self.heads
            )));
        }
        if self.d_h % self.prm_heads != 0 {
            return Err(Error::config(format!(
                "model: d_h {} not divisible by prm_heads {}",
                self.d_h, self.prm_heads
            )));
        }
        if self.t_max == 0 {
            return Err(Error::config("model: t_max must be positive"));
        }
        Ok(())
    }

    /// The default quarter-head rule.
    pub fn default_prm_heads(heads: usize) -> usize {
        (heads / 4).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn_norm: Tensor,
    pub attn: AttentionWeights,
    pub ffn_norm: Tensor,
    pub ffn: FfnWeights,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_norm: Tensor,
    pub self_attn: AttentionWeights,
    pub cross_norm: Tensor,
    pub cross_attn: AttentionWeights,
    pub ffn_norm: Tensor,
    pub ffn: FfnWeights,
}

/// One reward-model block: residual cross-attention on the raw path token,
/// then an RMS-normed FFN residual.
#[derive(Debug, Clone)]
pub struct PrmBlock {
    pub cross_attn: AttentionWeights,
    pub ffn_norm: Tensor,
    pub ffn: FfnWeights,
}

#[derive(Debug, Clone)]
pub struct MlpHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All learnable tensors.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Per-level token input embeddings (`M × d_h` each). An item embeds as
    /// the sum over levels of its token rows; the decoder reuses the level
    /// table of the token it consumes.
    pub token_embed: Vec<Tensor>,
    pub bos_embed: Tensor,
    pub enc_pos: Tensor,
    pub dec_pos: Tensor,
    pub encoder: Vec<EncoderBlock>,
    pub enc_norm: Tensor,
    pub decoder: Vec<DecoderBlock>,
    pub dec_norm: Tensor,
    /// Per-level output projection applied to the decoder state.
    pub out_proj: Vec<Tensor>,
    /// Per-level output codebook embedding matrices (`M × d_h`).
    pub codebook_out: Vec<Tensor>,
    /// One row per valid path across all depths, keyed by the trie's global
    /// path index.
    pub prm_table: Tensor,
    pub prm: Vec<PrmBlock>,
    pub prm_head: MlpHead,
}

const INIT_STD: f64 = 0.02;

fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    Tensor::randn(shape, INIT_STD, rng)
}

fn randn_std<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Init scale of the reward tower.
fn prm_std(d_h: usize) -> f64 {
    1.0 / (d_h as f64).sqrt()
}

fn gain(n: usize) -> Tensor {
    Tensor::full(vec![1, n], 1.0)
}

fn attention<R: Rng>(d_h: usize, rng: &mut R) -> AttentionWeights {
    attention_std(d_h, INIT_STD, rng)
}

fn attention_std<R: Rng>(d_h: usize, std: f64, rng: &mut R) -> AttentionWeights {
    AttentionWeights {
        wq: randn_std(vec![d_h, d_h], std, rng),
        wk: randn_std(vec![d_h, d_h], std, rng),
        wv: randn_std(vec![d_h, d_h], std, rng),
        wo: randn_std(vec![d_h, d_h], std, rng),
    }
}

fn ffn<R: Rng>(d_h: usize, mult: usize, rng: &mut R) -> FfnWeights {
    ffn_std(d_h, mult, INIT_STD, rng)
}

fn ffn_std<R: Rng>(d_h: usize, mult: usize, std: f64, rng: &mut R) -> FfnWeights {
    FfnWeights {
        w1: randn_std(vec![d_h, d_h * mult], std, rng),
        b1: Tensor::zeros(vec![1, d_h * mult]),
        w2: randn_std(vec![d_h * mult, d_h], std, rng),
        b2: Tensor::zeros(vec![1, d_h]),
    }
}

impl ModelParams {
    /// Fresh init: weights and embeddings `Normal(0, 0.02)`, gains one,
    /// biases zero. `prm_rows` is the trie's total valid-path count.
    pub fn init<R: Rng>(config: &ModelConfig, prm_rows: usize, rng: &mut R) -> Result<ModelParams> {
        config.validate()?;
        let d_h = config.d_h;
        let m = config.codebook_size;
        Ok(ModelParams {
            token_embed: (0..config.depth)
                .map(|_| randn(vec![m, d_h], rng))
                .collect(),
            bos_embed: randn(vec![1, d_h], rng),
            enc_pos: randn(vec![config.t_max, d_h], rng),
            dec_pos: randn(vec![config.depth, d_h], rng),
            encoder: (0..config.blocks)
                .map(|_| EncoderBlock {
                    attn_norm: gain(d_h),
                    attn: attention(d_h, rng),
                    ffn_norm: gain(d_h),
                    ffn: ffn(d_h, config.ffn_mult, rng),
                })
                .collect(),
            enc_norm: gain(d_h),
            decoder: (0..config.blocks)
                .map(|_| DecoderBlock {
                    self_norm: gain(d_h),
                    self_attn: attention(d_h, rng),
                    cross_norm: gain(d_h),
                    cross_attn: attention(d_h, rng),
                    ffn_norm: gain(d_h),
                    ffn: ffn(d_h, config.ffn_mult, rng),
                })
                .collect(),
            dec_norm: gain(d_h),
            out_proj: (0..config.depth)
                .map(|_| randn(vec![d_h, d_h], rng))
                .collect(),
            codebook_out: (0..config.depth)
                .map(|_| randn(vec![m, d_h], rng))
                .collect(),
            // The reward tower uses inverse-sqrt scale rather than 0.02: its
            // query is a single small embedding row, and at 0.02 the
            // user-path attention logits start around 1e-3, leaving the
            // contrastive loss stuck at the popularity-only solution for
            // thousands of steps at desk scale.
            prm_table: randn_std(vec![prm_rows, d_h], prm_std(d_h), rng),
            prm: (0..config.prm_blocks)
                .map(|_| PrmBlock {
                    cross_attn: attention_std(d_h, prm_std(d_h), rng),
                    ffn_norm: gain(d_h),
                    ffn: ffn_std(d_h, config.ffn_mult, prm_std(d_h), rng),
                })
                .collect(),
            prm_head: MlpHead {
                w1: randn_std(vec![d_h, d_h], prm_std(d_h), rng),
                b1: Tensor::zeros(vec![1, d_h]),
                w2: randn_std(vec![d_h, 1], prm_std(d_h), rng),
                b2: Tensor::zeros(vec![1, 1]),
            },
            config: config.clone(),
        })
    }

    /// Visit every tensor with its checkpoint name, in a fixed order.
    pub fn for_each_tensor<'s>(&'s self, mut f: impl FnMut(String, &'s Tensor)) {
        self.visit(|name, t| f(name, t));
    }

    fn visit<'s>(&'s self, mut f: impl FnMut(String, &'s Tensor)) {
        for (b, t) in self.token_embed.iter().enumerate() {
            f(format!("encoder.token_embed.{}", b + 1), t);
        }
        f("encoder.pos_embed".into(), &self.enc_pos);
        f("decoder.bos_embed".into(), &self.bos_embed);
        f("decoder.pos_embed".into(), &self.dec_pos);
        for (i, blk) in self.encoder.iter().enumerate() {
            let p = format!("encoder.block{i}");
            f(format!("{p}.attn_norm"), &blk.attn_norm);
            visit_attn(&p, "attn", &blk.attn, &mut f);
            f(format!("{p}.ffn_norm"), &blk.ffn_norm);
            visit_ffn(&p, &blk.ffn, &mut f);
        }
        f("encoder.out_norm".into(), &self.enc_norm);
        for (i, blk) in self.decoder.iter().enumerate() {
            let p = format!("decoder.block{i}");
            f(format!("{p}.self_norm"), &blk.self_norm);
            visit_attn(&p, "self", &blk.self_attn, &mut f);
            f(format!("{p}.cross_norm"), &blk.cross_norm);
            visit_attn(&p, "cross", &blk.cross_attn, &mut f);
            f(format!("{p}.ffn_norm"), &blk.ffn_norm);
            visit_ffn(&p, &blk.ffn, &mut f);
        }
        f("decoder.out_norm".into(), &self.dec_norm);
        for (b, t) in self.out_proj.iter().enumerate() {
            f(format!("decoder.proj.{}", b + 1), t);
        }
        for (b, t) in self.codebook_out.iter().enumerate() {
            f(format!("codebook_out.{}", b + 1), t);
        }
        f("prm.table".into(), &self.prm_table);
        for (i, blk) in self.prm.iter().enumerate() {
            let p = format!("prm.block{i}");
            visit_attn(&p, "cross", &blk.cross_attn, &mut f);
            f(format!("{p}.ffn_norm"), &blk.ffn_norm);
            visit_ffn(&p, &blk.ffn, &mut f);
        }
        f("prm.mlp.w1".into(), &self.prm_head.w1);
        f("prm.mlp.b1".into(), &self.prm_head.b1);
        f("prm.mlp.w2".into(), &self.prm_head.w2);
        f("prm.mlp.b2".into(), &self.prm_head.b2);
    }

    /// Mutable counterpart of [`for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        for (b, t) in self.token_embed.iter_mut().enumerate() {
            f(format!("encoder.token_embed.{}", b + 1), t);
        }
        f("encoder.pos_embed".into(), &mut self.enc_pos);
        f("decoder.bos_embed".into(), &mut self.bos_embed);
        f("decoder.pos_embed".into(), &mut self.dec_pos);
        for (i, blk) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.block{i}");
            f(format!("{p}.attn_norm"), &mut blk.attn_norm);
            visit_attn_mut(&p, "attn", &mut blk.attn, &mut f);
            f(format!("{p}.ffn_norm"), &mut blk.ffn_norm);
            visit_ffn_mut(&p, &mut blk.ffn, &mut f);
        }
        f("encoder.out_norm".into(), &mut self.enc_norm);
        for (i, blk) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.block{i}");
            f(format!("{p}.self_norm"), &mut blk.self_norm);
            visit_attn_mut(&p, "self", &mut blk.self_attn, &mut f);
            f(format!("{p}.cross_norm"), &mut blk.cross_norm);
            visit_attn_mut(&p, "cross", &mut blk.cross_attn, &mut f);
            f(format!("{p}.ffn_norm"), &mut blk.ffn_norm);
            visit_ffn_mut(&p, &mut blk.ffn, &mut f);
        }
        f("decoder.out_norm".into(), &mut self.dec_norm);
        for (b, t) in self.out_proj.iter_mut().enumerate() {
            f(format!("decoder.proj.{}", b + 1), t);
        }
        for (b, t) in self.codebook_out.iter_mut().enumerate() {
            f(format!("codebook_out.{}", b + 1), t);
        }
        f("prm.table".into(), &mut self.prm_table);
        for (i, blk) in self.prm.iter_mut().enumerate() {
            let p = format!("prm.block{i}");
            visit_attn_mut(&p, "cross", &mut blk.cross_attn, &mut f);
            f(format!("{p}.ffn_norm"), &mut blk.ffn_norm);
            visit_ffn_mut(&p, &mut blk.ffn, &mut f);
        }
        f("prm.mlp.w1".into(), &mut self.prm_head.w1);
        f("prm.mlp.b1".into(), &mut self.prm_head.b1);
        f("prm.mlp.w2".into(), &mut self.prm_head.w2);
        f("prm.mlp.b2".into(), &mut self.prm_head.b2);
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.is_finite());
        ok
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        self.for_each_tensor(|name, t| entries.push((name, t)));
        let views: Vec<(&str, &Tensor)> =
            entries.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        save_tensors(path, &views)
    }

    /// Load a checkpoint against a config. The reward-table row count comes
    /// from the file; every shape is validated.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
        let mut by_name: HashMap<String, Tensor> =
            load_tensors(path)?.into_iter().collect();
        let prm_rows = by_name
            .get("prm.table")
            .ok_or_else(|| Error::data("checkpoint is missing prm.table"))?
            .shape()[0];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand_chacha::rand_core::SeedableRng;
        let mut params = ModelParams::init(config, prm_rows, &mut rng)?;
        let mut missing = Vec::new();
        params.for_each_tensor_mut(|name, t| match by_name.remove(&name) {
            Some(loaded) => {
                if loaded.shape() == t.shape() {
                    *t = loaded;
                } else {
                    missing.push(format!(
                        "{name}: shape {:?} in file, {:?} expected",
                        loaded.shape(),
                        t.shape()
                    ));
                }
            }
            None => missing.push(format!("{name}: absent")),
        });
        if !missing.is_empty() {
            return Err(Error::data(format!(
                "checkpoint does not match config: {}",
                missing.join("; ")
            )));
        }
        if !by_name.is_empty() {
            let extra: Vec<String> = by_name.into_keys().collect();
            return Err(Error::data(format!(
                "checkpoint holds unknown tensors: {}",
                extra.join(", ")
            )));
        }
        Ok(params)
    }
}

fn visit_attn<'s>(
    prefix: &str,
    kind: &str,
    w: &'s AttentionWeights,
    f: &mut impl FnMut(String, &'s Tensor),
) {
    f(format!("{prefix}.{kind}.wq"), &w.wq);
    f(format!("{prefix}.{kind}.wk"), &w.wk);
    f(format!("{prefix}.{kind}.wv"), &w.wv);
    f(format!("{prefix}.{kind}.wo"), &w.wo);
}

fn visit_ffn<'s>(prefix: &str, w: &'s FfnWeights, f: &mut impl FnMut(String, &'s Tensor)) {
    f(format!("{prefix}.ffn.w1"), &w.w1);
    f(format!("{prefix}.ffn.b1"), &w.b1);
    f(format!("{prefix}.ffn.w2"), &w.w2);
    f(format!("{prefix}.ffn.b2"), &w.b2);
}

fn visit_attn_mut(
    prefix: &str,
    kind: &str,
    w: &mut AttentionWeights,
    f: &mut impl FnMut(String, &mut Tensor),
) {
    f(format!("{prefix}.{kind}.wq"), &mut w.wq);
    f(format!("{prefix}.{kind}.wk"), &mut w.wk);
    f(format!("{prefix}.{kind}.wv"), &mut w.wv);
    f(format!("{prefix}.{kind}.wo"), &mut w.wo);
}

fn visit_ffn_mut(prefix: &str, w: &mut FfnWeights, f: &mut impl FnMut(String, &mut Tensor)) {
    f(format!("{prefix}.ffn.w1"), &mut w.w1);
    f(format!("{prefix}.ffn.b1"), &mut w.b1);
    f(format!("{prefix}.ffn.w2"), &mut w.w2);
    f(format!("{prefix}.ffn.b2"), &mut w.b2);
}

/// A training/evaluation example with items already mapped to their paths
/// and the history truncated to the most recent `t_max` entries.
#[derive(Debug, Clone)]
pub struct PathExample {
    pub user_id: u64,
    pub history: Vec<SemanticPath>,
    pub target: SemanticPath,
}

/// Map item-id examples onto Semantic ID paths using the catalog.
pub fn to_path_examples(
    examples: &[Example],
    catalog: &[SemanticPath],
    t_max: usize,
) -> Result<Vec<PathExample>> {
    examples
        .iter()
        .map(|ex| {
            let start = ex.history.len().saturating_sub(t_max);
            let history = ex.history[start..]
                .iter()
                .map(|&item| {
                    catalog.get(item).cloned().ok_or_else(|| {
                        Error::data(format!("item {item} has no tokenized path"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let target = catalog
                .get(ex.target)
                .cloned()
                .ok_or_else(|| Error::data(format!("item {} has no tokenized path", ex.target)))?;
            Ok(PathExample {
                user_id: ex.user_id,
                history,
                target,
            })
        })
        .collect()
}
