//! Declarative run configuration.
//!
//! One TOML file drives every command; sections mirror the library configs.
//! Unknown keys are rejected. `--set section.key=value` overrides any leaf,
//! and the fully resolved config is written next to the outputs before work
//! begins.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sidrec_core::data::SyntheticConfig;
use sidrec_core::error::{Error, Result};
use sidrec_core::model::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Codebook size per level.
    pub m: usize,
    pub depth: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            m: 32,
            depth: 3,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    /// Global beam size `K` (per-parent expansion width).
    pub beam_size: usize,
    pub k_plus: usize,
    pub k_prime: usize,
    /// Per-depth reward flags; padded/truncated to the model depth.
    pub prm_depths: Vec<bool>,
    pub constrained: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            beam_size: 16,
            k_plus: 64,
            k_prime: 16,
            prm_depths: vec![true, true, true],
            constrained: true,
        }
    }
}

impl SearchSection {
    pub fn beam_config(&self, depth: usize) -> sidrec_core::search::BeamConfig {
        let mut flags = self.prm_depths.clone();
        flags.resize(depth, false);
        sidrec_core::search::BeamConfig {
            beam_size: self.beam_size,
            k_plus: self.k_plus,
            k_prime: self.k_prime,
            prm_depths: flags,
            constrained: self.constrained,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Recall/NDCG cutoffs.
    pub ks: Vec<usize>,
    /// Candidate widths for the scaling sweep.
    pub k_plus_list: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![1, 5, 10, 16],
            k_plus_list: vec![16, 32, 64, 128],
        }
    }
}

/// Artifact locations, resolved relative to the output directory unless
/// absolute.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub interactions: PathBuf,
    pub embeddings: PathBuf,
    pub codebook: PathBuf,
    pub item_paths: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            interactions: "interactions.csv".into(),
            embeddings: "embeddings.sids".into(),
            codebook: "codebook.sids".into(),
            item_paths: "item_paths.csv".into(),
            checkpoint: "checkpoint.sids".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub synth: SyntheticConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Load a TOML file (or defaults when absent) and apply dotted-path
    /// overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value: toml::Value = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| Error::config(format!("config parse error: {e}")))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        value
            .try_into()
            .map_err(|e| Error::config(format!("config error: {e}")))
    }

    pub fn resolve(&self, out_dir: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            out_dir.join(path)
        }
    }

    /// Serialize the fully resolved config.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("snapshot: {e}")))
    }
}

/// Apply `section.key=value`, parsing the value as TOML (falling back to a
/// bare string).
fn apply_override(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (key_path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {entry:?} is not key=value")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw_value}")) {
        Ok(toml::Value::Table(t)) => t.get("v").cloned().unwrap_or_else(|| {
            toml::Value::String(raw_value.to_string())
        }),
        _ => toml::Value::String(raw_value.to_string()),
    };
    let mut cursor = root;
    let segments: Vec<&str> = key_path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {entry:?}: {segment} is not a table")))?;
        if i + 1 == segments.len() {
            table.insert(segment.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("loop returns on the final segment")
}
