//! Semantic-ID generative retrieval with process-reward-guided decoding.
//!
//! The pipeline, end to end:
//!
//! 1. [`tokenizer`] — quantize item embeddings into hierarchical Semantic IDs
//!    via residual k-means, and index the catalog's valid paths in a prefix
//!    trie for constrained decoding and negative sampling.
//! 2. [`data`] — synthetic hierarchical-preference datasets, CSV interaction
//!    logs, and the leave-one-out split protocol.
//! 3. [`model`] — an encoder-decoder backbone trained with next-token
//!    prediction, jointly with a lightweight path-level reward model trained
//!    contrastively against sampled valid-path negatives.
//! 4. [`search`] — standard and reward-guided beam search over the trie, an
//!    exhaustive decoding oracle, and a radix top-k kernel.
//! 5. [`eval`] — Recall/NDCG/hierarchical recall, candidate-width scaling
//!    sweeps, per-depth ablation grids, and FLOPs accounting.
//!
//! Everything runs on [`tensor`], a small f64 tensor library with
//! reverse-mode automatic differentiation and Adam. All randomness flows from
//! a single seed through [`seed::SeedTree`].

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod search;
pub mod seed;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use tokenizer::{Codebook, PrefixTrie, SemanticPath};
