//! CSV and plot-data emission. Floats print in shortest round-trip form, so
//! identical runs write identical bytes.

use std::io::Write;
use std::path::Path;

use super::runner::{AblationRow, EvalRun, SweepRow, UserEval};
use crate::error::Result;

/// A `metric,b,k,value` row; `b` is empty for non-hierarchical metrics.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub metric: &'static str,
    pub b: Option<usize>,
    pub k: usize,
    pub value: f64,
}

impl EvalRun {
    /// Flatten into report rows: recall/ndcg at the configured cutoffs,
    /// hierarchical recall per depth at the retained width.
    pub fn metric_rows(&self, k_retained: usize) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for &(k, v) in &self.recall_at {
            rows.push(MetricRow {
                metric: "recall",
                b: None,
                k,
                value: v,
            });
        }
        for &(k, v) in &self.ndcg_at {
            rows.push(MetricRow {
                metric: "ndcg",
                b: None,
                k,
                value: v,
            });
        }
        for (i, &v) in self.hrecall_by_depth.iter().enumerate() {
            rows.push(MetricRow {
                metric: "hrecall",
                b: Some(i + 1),
                k: k_retained,
                value: v,
            });
        }
        rows
    }
}

pub fn write_metric_rows_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "metric,b,k,value")?;
    for row in rows {
        let b = row.b.map(|b| b.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", row.metric, b, row.k, row.value)?;
    }
    w.flush()?;
    Ok(())
}

/// Retrieval dump: `user_id,rank,s1..sd,logprob,prm_score` (reward column
/// empty when the search ran without it).
pub fn write_retrieval_csv(path: &Path, users: &[UserEval], depth: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let tokens: Vec<String> = (1..=depth).map(|b| format!("s{b}")).collect();
    writeln!(w, "user_id,rank,{},logprob,prm_score", tokens.join(","))?;
    for user in users {
        for (rank, scored) in user.ranked.iter().enumerate() {
            let toks: Vec<String> = scored
                .path
                .tokens()
                .iter()
                .map(|t| t.to_string())
                .collect();
            let prm = scored
                .prm_score
                .map(|s| s.to_string())
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                user.user_id,
                rank + 1,
                toks.join(","),
                scored.logprob,
                prm
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "k_plus,b,hrecall,decoder_flops,prm_flops,decode_calls")?;
    for row in rows {
        for (i, &h) in row.hrecall_by_depth.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                row.k_plus,
                i + 1,
                h,
                row.decoder_flops,
                row.prm_flops,
                row.decode_calls
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One plain two-column file per depth: `K⁺  HRecall@b`.
pub fn write_sweep_plot_data(dir: &Path, stem: &str, rows: &[SweepRow]) -> Result<Vec<std::path::PathBuf>> {
    let depth = rows.first().map(|r| r.hrecall_by_depth.len()).unwrap_or(0);
    let mut written = Vec::with_capacity(depth);
    for b in 1..=depth {
        let file = dir.join(format!("{stem}_b{b}.dat"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&file)?);
        for row in rows {
            writeln!(w, "{} {}", row.k_plus, row.hrecall_by_depth[b - 1])?;
        }
        w.flush()?;
        written.push(file);
    }
    Ok(written)
}

/// Ablation table: per-depth candidate widths (`-` when the reward model is
/// off at that depth) and per-depth hierarchical recall.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow], k_plus: usize) -> Result<()> {
    let depth = rows.first().map(|r| r.flags.len()).unwrap_or(0);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let flag_cols: Vec<String> = (1..=depth).map(|b| format!("k_plus_{b}")).collect();
    let metric_cols: Vec<String> = (1..=depth).map(|b| format!("hrecall_{b}")).collect();
    writeln!(w, "id,{},{}", flag_cols.join(","), metric_cols.join(","))?;
    for row in rows {
        let flags: Vec<String> = row
            .flags
            .iter()
            .map(|&f| if f { k_plus.to_string() } else { "-".into() })
            .collect();
        let metrics: Vec<String> = row
            .hrecall_by_depth
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{},{},{}", row.id, flags.join(","), metrics.join(","))?;
    }
    w.flush()?;
    Ok(())
}
