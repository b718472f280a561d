//! Forward passes, shared between training (trainable leaves) and inference
//! (constant leaves) so both run exactly the same arithmetic.

use super::{
    AttentionWeights, DecoderBlock, EncoderBlock, FfnWeights, ModelConfig, ModelParams, PrmBlock,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{PrefixTrie, SemanticPath};

pub const RMS_EPS: f64 = 1e-6;
/// Additive mask value; exp(-1e30 - max) is exactly zero in f64.
const MASK: f64 = -1e30;

pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct EncoderBlockVars {
    pub attn_norm: Var,
    pub attn: AttnVars,
    pub ffn_norm: Var,
    pub ffn: FfnVars,
}

pub struct DecoderBlockVars {
    pub self_norm: Var,
    pub self_attn: AttnVars,
    pub cross_norm: Var,
    pub cross_attn: AttnVars,
    pub ffn_norm: Var,
    pub ffn: FfnVars,
}

pub struct PrmBlockVars {
    pub cross_attn: AttnVars,
    pub ffn_norm: Var,
    pub ffn: FfnVars,
}

pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for every parameter, registered once per tape.
pub struct ModelVars {
    pub token_embed: Vec<Var>,
    pub bos_embed: Var,
    pub enc_pos: Var,
    pub dec_pos: Var,
    pub encoder: Vec<EncoderBlockVars>,
    pub enc_norm: Var,
    pub decoder: Vec<DecoderBlockVars>,
    pub dec_norm: Var,
    pub out_proj: Vec<Var>,
    pub codebook_out: Vec<Var>,
    pub prm_table: Var,
    pub prm: Vec<PrmBlockVars>,
    pub prm_head: HeadVars,
}

fn reg(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    let mut c = t.clone();
    c.set_requires_grad(trainable);
    tape.leaf(c)
}

fn reg_attn(tape: &mut Tape, w: &AttentionWeights, tr: bool) -> AttnVars {
    AttnVars {
        wq: reg(tape, &w.wq, tr),
        wk: reg(tape, &w.wk, tr),
        wv: reg(tape, &w.wv, tr),
        wo: reg(tape, &w.wo, tr),
    }
}

fn reg_ffn(tape: &mut Tape, w: &FfnWeights, tr: bool) -> FfnVars {
    FfnVars {
        w1: reg(tape, &w.w1, tr),
        b1: reg(tape, &w.b1, tr),
        w2: reg(tape, &w.w2, tr),
        b2: reg(tape, &w.b2, tr),
    }
}

impl ModelVars {
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ModelVars {
        let tr = trainable;
        ModelVars {
            token_embed: params
                .token_embed
                .iter()
                .map(|t| reg(tape, t, tr))
                .collect(),
            bos_embed: reg(tape, &params.bos_embed, tr),
            enc_pos: reg(tape, &params.enc_pos, tr),
            dec_pos: reg(tape, &params.dec_pos, tr),
            encoder: params
                .encoder
                .iter()
                .map(|b: &EncoderBlock| EncoderBlockVars {
                    attn_norm: reg(tape, &b.attn_norm, tr),
                    attn: reg_attn(tape, &b.attn, tr),
                    ffn_norm: reg(tape, &b.ffn_norm, tr),
                    ffn: reg_ffn(tape, &b.ffn, tr),
                })
                .collect(),
            enc_norm: reg(tape, &params.enc_norm, tr),
            decoder: params
                .decoder
                .iter()
                .map(|b: &DecoderBlock| DecoderBlockVars {
                    self_norm: reg(tape, &b.self_norm, tr),
                    self_attn: reg_attn(tape, &b.self_attn, tr),
                    cross_norm: reg(tape, &b.cross_norm, tr),
                    cross_attn: reg_attn(tape, &b.cross_attn, tr),
                    ffn_norm: reg(tape, &b.ffn_norm, tr),
                    ffn: reg_ffn(tape, &b.ffn, tr),
                })
                .collect(),
            dec_norm: reg(tape, &params.dec_norm, tr),
            out_proj: params.out_proj.iter().map(|t| reg(tape, t, tr)).collect(),
            codebook_out: params
                .codebook_out
                .iter()
                .map(|t| reg(tape, t, tr))
                .collect(),
            prm_table: reg(tape, &params.prm_table, tr),
            prm: params
                .prm
                .iter()
                .map(|b: &PrmBlock| PrmBlockVars {
                    cross_attn: reg_attn(tape, &b.cross_attn, tr),
                    ffn_norm: reg(tape, &b.ffn_norm, tr),
                    ffn: reg_ffn(tape, &b.ffn, tr),
                })
                .collect(),
            prm_head: HeadVars {
                w1: reg(tape, &params.prm_head.w1, tr),
                b1: reg(tape, &params.prm_head.b1, tr),
                w2: reg(tape, &params.prm_head.w2, tr),
                b2: reg(tape, &params.prm_head.b2, tr),
            },
        }
    }

    /// Vars in the same order as [`ModelParams::for_each_tensor`], for
    /// pairing gradients with parameters.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend(&self.token_embed);
        out.push(self.enc_pos);
        out.push(self.bos_embed);
        out.push(self.dec_pos);
        for b in &self.encoder {
            out.push(b.attn_norm);
            out.extend([b.attn.wq, b.attn.wk, b.attn.wv, b.attn.wo]);
            out.push(b.ffn_norm);
            out.extend([b.ffn.w1, b.ffn.b1, b.ffn.w2, b.ffn.b2]);
        }
        out.push(self.enc_norm);
        for b in &self.decoder {
            out.push(b.self_norm);
            out.extend([
                b.self_attn.wq,
                b.self_attn.wk,
                b.self_attn.wv,
                b.self_attn.wo,
            ]);
            out.push(b.cross_norm);
            out.extend([
                b.cross_attn.wq,
                b.cross_attn.wk,
                b.cross_attn.wv,
                b.cross_attn.wo,
            ]);
            out.push(b.ffn_norm);
            out.extend([b.ffn.w1, b.ffn.b1, b.ffn.w2, b.ffn.b2]);
        }
        out.push(self.dec_norm);
        out.extend(&self.out_proj);
        out.extend(&self.codebook_out);
        out.push(self.prm_table);
        for b in &self.prm {
            out.extend([
                b.cross_attn.wq,
                b.cross_attn.wk,
                b.cross_attn.wv,
                b.cross_attn.wo,
            ]);
            out.push(b.ffn_norm);
            out.extend([b.ffn.w1, b.ffn.b1, b.ffn.w2, b.ffn.b2]);
        }
        out.extend([
            self.prm_head.w1,
            self.prm_head.b1,
            self.prm_head.w2,
            self.prm_head.b2,
        ]);
        out
    }
}

/// Multi-head attention. Queries come from `xq`, keys and values from `xkv`;
/// an optional additive mask applies to the pre-softmax scores of every head.
fn attention(
    tape: &mut Tape,
    xq: Var,
    xkv: Var,
    w: &AttnVars,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let (_, d_h) = tape.value(xq).dims2()?;
    let dk = d_h / heads;
    let q = tape.matmul(xq, w.wq)?;
    let k = tape.matmul(xkv, w.wk)?;
    let v = tape.matmul(xkv, w.wv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scaled = tape.scale(scores, scale)?;
        if let Some(m) = mask {
            scaled = tape.add(scaled, m)?;
        }
        let attn = tape.softmax_rows(scaled)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.matmul(merged, w.wo)
}

fn feed_forward(tape: &mut Tape, x: Var, w: &FfnVars) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_row_broadcast(h, w.b1)?;
    let h = tape.silu(h)?;
    let h = tape.matmul(h, w.w2)?;
    tape.add_row_broadcast(h, w.b2)
}

fn encoder_block(
    tape: &mut Tape,
    x: Var,
    blk: &EncoderBlockVars,
    heads: usize,
) -> Result<Var> {
    let normed = tape.rmsnorm(x, blk.attn_norm, RMS_EPS)?;
    let attn = attention(tape, normed, normed, &blk.attn, heads, None)?;
    let x = tape.add(x, attn)?;
    let normed = tape.rmsnorm(x, blk.ffn_norm, RMS_EPS)?;
    let ff = feed_forward(tape, normed, &blk.ffn)?;
    tape.add(x, ff)
}

/// Encode a user's item history into hidden states `T × d_h`. Each item is
/// the sum of its per-level token embeddings plus a position; the stack is
/// pre-norm bidirectional self-attention. Histories longer than `t_max` keep
/// their most recent items.
pub fn encode_history(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    history: &[SemanticPath],
) -> Result<Var> {
    if history.is_empty() {
        return Err(Error::usage("encode_history: empty history"));
    }
    let start = history.len().saturating_sub(cfg.t_max);
    let window = &history[start..];
    let t = window.len();

    let mut x = {
        let rows: Vec<usize> = window.iter().map(|p| p.tokens()[0] as usize).collect();
        tape.gather_rows(vars.token_embed[0], &rows)?
    };
    for level in 1..cfg.depth {
        let rows: Vec<usize> = window
            .iter()
            .map(|p| p.tokens()[level] as usize)
            .collect();
        let emb = tape.gather_rows(vars.token_embed[level], &rows)?;
        x = tape.add(x, emb)?;
    }
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.gather_rows(vars.enc_pos, &positions)?;
    x = tape.add(x, pos)?;

    for blk in &vars.encoder {
        x = encoder_block(tape, x, blk, cfg.heads)?;
    }
    tape.rmsnorm(x, vars.enc_norm, RMS_EPS)
}

fn causal_mask(tape: &mut Tape, n: usize) -> Var {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASK;
        }
    }
    tape.constant(Tensor::from_vec(vec![n, n], data).expect("square mask"))
}

/// Run the decoder over `[BOS, s_1, …, s_j]` and return all position states
/// (`(j+1) × d_h`): row `b` is the state that predicts level `b+1`.
pub fn decoder_states(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    enc: Var,
    prefix: &[u16],
) -> Result<Var> {
    if prefix.len() >= cfg.depth {
        return Err(Error::usage(format!(
            "decoder prefix of length {} leaves nothing to predict at depth {}",
            prefix.len(),
            cfg.depth
        )));
    }
    let n = prefix.len() + 1;
    let mut rows = vec![vars.bos_embed];
    for (level, &tok) in prefix.iter().enumerate() {
        rows.push(tape.gather_rows(vars.token_embed[level], &[tok as usize])?);
    }
    let tokens = tape.concat_rows(&rows)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(vars.dec_pos, &positions)?;
    let mut x = tape.add(tokens, pos)?;

    let mask = causal_mask(tape, n);
    for blk in &vars.decoder {
        let normed = tape.rmsnorm(x, blk.self_norm, RMS_EPS)?;
        let self_attn = attention(tape, normed, normed, &blk.self_attn, cfg.heads, Some(mask))?;
        x = tape.add(x, self_attn)?;
        let normed = tape.rmsnorm(x, blk.cross_norm, RMS_EPS)?;
        let cross = attention(tape, normed, enc, &blk.cross_attn, cfg.heads, None)?;
        x = tape.add(x, cross)?;
        let normed = tape.rmsnorm(x, blk.ffn_norm, RMS_EPS)?;
        let ff = feed_forward(tape, normed, &blk.ffn)?;
        x = tape.add(x, ff)?;
    }
    tape.rmsnorm(x, vars.dec_norm, RMS_EPS)
}

/// Project a decoder state through the level's linear head and score it
/// against that level's output codebook: `logits = (h · W_b) · C_bᵀ`.
pub fn level_logits(
    tape: &mut Tape,
    vars: &ModelVars,
    level: usize,
    state: Var,
) -> Result<Var> {
    let projected = tape.matmul(state, vars.out_proj[level])?;
    let cb_t = tape.transpose(vars.codebook_out[level])?;
    tape.matmul(projected, cb_t)
}

/// Next-level logits (`1 × M`) for a decoding prefix.
pub fn decode_step(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    enc: Var,
    prefix: &SemanticPath,
) -> Result<Var> {
    let states = decoder_states(tape, vars, cfg, enc, prefix.tokens())?;
    let last = tape.gather_rows(states, &[prefix.len()])?;
    level_logits(tape, vars, prefix.len(), last)
}

/// Score candidate paths (all the same length) in one batched pass. Each
/// path embeds as a single table row (its global trie index), cross-attends
/// into the encoder states through the reward blocks, and the head emits one
/// scalar per path.
pub fn prm_scores(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    enc: Var,
    paths: &[SemanticPath],
    trie: &PrefixTrie,
) -> Result<Var> {
    if paths.is_empty() {
        return Err(Error::usage("prm_scores: no paths to score"));
    }
    let rows: Vec<usize> = paths
        .iter()
        .map(|p| {
            trie.global_path_index(p).ok_or_else(|| {
                Error::usage(format!("path {p} is not a valid path; cannot be scored"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut p = tape.gather_rows(vars.prm_table, &rows)?;
    for blk in &vars.prm {
        let cross = attention(tape, p, enc, &blk.cross_attn, cfg.prm_heads, None)?;
        let p_mid = tape.add(p, cross)?;
        let normed = tape.rmsnorm(p_mid, blk.ffn_norm, RMS_EPS)?;
        let ff = feed_forward(tape, normed, &blk.ffn)?;
        p = tape.add(p_mid, ff)?;
    }
    let h = tape.matmul(p, vars.prm_head.w1)?;
    let h = tape.add_row_broadcast(h, vars.prm_head.b1)?;
    let h = tape.silu(h)?;
    let h = tape.matmul(h, vars.prm_head.w2)?;
    tape.add_row_broadcast(h, vars.prm_head.b2)
}

/// Inference context: one tape holding the parameters as constants, reused
/// across every forward of a search or evaluation pass.
pub struct Session<'p> {
    pub tape: Tape,
    pub vars: ModelVars,
    pub params: &'p ModelParams,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ModelParams) -> Session<'p> {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, params, false);
        Session { tape, vars, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn encode_history(&mut self, history: &[SemanticPath]) -> Result<Var> {
        encode_history(&mut self.tape, &self.vars, &self.params.config, history)
    }

    /// Raw next-level logits for a prefix.
    pub fn decode_logits(&mut self, enc: Var, prefix: &SemanticPath) -> Result<Vec<f64>> {
        let logits = decode_step(&mut self.tape, &self.vars, &self.params.config, enc, prefix)?;
        Ok(self.tape.value(logits).data().to_vec())
    }

    pub fn prm_scores(
        &mut self,
        enc: Var,
        paths: &[SemanticPath],
        trie: &PrefixTrie,
    ) -> Result<Vec<f64>> {
        let scores = prm_scores(
            &mut self.tape,
            &self.vars,
            &self.params.config,
            enc,
            paths,
            trie,
        )?;
        Ok(self.tape.value(scores).data().to_vec())
    }

    pub fn ntp_loss_value(&mut self, enc: Var, target: &SemanticPath) -> Result<f64> {
        let loss = super::loss::ntp_loss(
            &mut self.tape,
            &self.vars,
            &self.params.config,
            enc,
            target,
        )?;
        Ok(self.tape.value(loss).item())
    }
}
