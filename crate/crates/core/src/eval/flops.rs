//! Closed-form inference FLOPs accounting.
//!
//! Every matrix product `[m×k]·[k×n]` counts `2·m·n·k`; normalization,
//! softmax, and bias additions are omitted as lower-order terms. The
//! formulas mirror the implementation: the decoder recomputes its
//! cross-attention keys/values per call, the reward model projects the
//! encoder states once per scoring batch and pays a per-candidate cost on
//! top.

use crate::model::ModelConfig;
use crate::search::BeamConfig;

/// Per-component FLOPs for one user's retrieval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsBreakdown {
    /// Encoder stack over the history, run once.
    pub encoder: f64,
    /// Decoder stack, summed over every decode call of the beam.
    pub decoder: f64,
    /// Reward-model key/value projections, once per scored depth.
    pub prm_shared: f64,
    /// Reward-model per-candidate cost; exactly linear in `K⁺`.
    pub prm_paths: f64,
}

impl FlopsBreakdown {
    pub fn prm_total(&self) -> f64 {
        self.prm_shared + self.prm_paths
    }

    pub fn total(&self) -> f64 {
        self.encoder + self.decoder + self.prm_shared + self.prm_paths
    }
}

/// Encoder: `L` blocks of self-attention plus FFN over `t` positions.
///
/// Per block: QKVO projections `4·2·t·d_h²`, attention scores and weighted
/// values `2·2·t·t·d_h`, FFN `2·2·t·d_h·(mult·d_h)`.
pub fn encoder_flops(cfg: &ModelConfig, t: usize) -> f64 {
    let d = cfg.d_h as f64;
    let tf = t as f64;
    let per_block = 8.0 * tf * d * d + 4.0 * tf * tf * d + 4.0 * tf * d * (cfg.ffn_mult as f64 * d);
    cfg.blocks as f64 * per_block
}

/// One decoder call over a prefix of length `p` (input length `p+1`),
/// cross-attending into `t` encoder states, plus the output head.
///
/// Per block: self QKVO `4·2·j·d_h²`, self attention `2·2·j·j·d_h`, cross
/// Q and O `2·2·j·d_h²`, cross K and V `2·2·t·d_h²`, cross attention
/// `2·2·j·t·d_h`, FFN `4·j·d_h·(mult·d_h)`. Head: projection `2·d_h²` plus
/// codebook scoring `2·d_h·M` on the final position.
pub fn decoder_call_flops(cfg: &ModelConfig, prefix_len: usize, t: usize) -> f64 {
    let d = cfg.d_h as f64;
    let j = (prefix_len + 1) as f64;
    let tf = t as f64;
    let per_block = 8.0 * j * d * d
        + 4.0 * j * j * d
        + 4.0 * j * d * d
        + 4.0 * tf * d * d
        + 4.0 * j * tf * d
        + 4.0 * j * d * (cfg.ffn_mult as f64 * d);
    cfg.blocks as f64 * per_block + 2.0 * d * d + 2.0 * d * cfg.codebook_size as f64
}

/// Full breakdown for one retrieval under a beam configuration.
///
/// Decode calls per depth follow the retained width: one call at depth 1,
/// `K′` at each deeper depth. Reward cost applies at enabled depths only:
/// shared K/V `F·2·2·t·d_h²` per depth, and per candidate
/// `F·(2·2·d_h² + 2·2·t·d_h + 4·d_h·(mult·d_h))` plus the scalar head
/// `2·d_h² + 2·d_h`, times `K⁺`.
pub fn flops_estimate(cfg: &ModelConfig, beam: &BeamConfig, t: usize) -> FlopsBreakdown {
    let d = cfg.d_h as f64;
    let tf = t as f64;
    let depth = cfg.depth;

    let mut decoder = 0.0;
    for b in 1..=depth {
        let width = if b == 1 { 1.0 } else { beam.k_prime as f64 };
        decoder += width * decoder_call_flops(cfg, b - 1, t);
    }

    let enabled = beam.prm_depths.iter().filter(|&&f| f).count() as f64;
    let f_blocks = cfg.prm_blocks as f64;
    let prm_shared = enabled * f_blocks * 4.0 * tf * d * d;
    let per_path = f_blocks * (4.0 * d * d + 4.0 * tf * d + 4.0 * d * (cfg.ffn_mult as f64 * d))
        + 2.0 * d * d
        + 2.0 * d;
    let prm_paths = enabled * beam.k_plus as f64 * per_path;

    FlopsBreakdown {
        encoder: encoder_flops(cfg, t),
        decoder,
        prm_shared,
        prm_paths,
    }
}
