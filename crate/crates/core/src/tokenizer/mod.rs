//! Hierarchical Semantic ID tokenization via residual k-means.
//!
//! Level 1 clusters the raw item embeddings; each deeper level clusters the
//! residuals left after subtracting the assigned centroids of the levels
//! above. An item's Semantic ID is the sequence of its per-level centroid
//! indices, coarse to fine.

mod kmeans;
mod trie;

pub use kmeans::{kmeans, KMeansFit};
pub use trie::{NegativeSample, PrefixTrie};

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{load_tensors, save_tensors, Tensor};

/// A length-`b` sequence of codebook token indices, `1 ≤ b ≤ d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticPath {
    tokens: Vec<u16>,
}

impl SemanticPath {
    pub fn new(tokens: Vec<u16>) -> SemanticPath {
        SemanticPath { tokens }
    }

    pub fn empty() -> SemanticPath {
        SemanticPath { tokens: Vec::new() }
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Copy with one more token appended.
    pub fn extended(&self, token: u16) -> SemanticPath {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(token);
        SemanticPath { tokens }
    }

    /// The length-`b` prefix.
    pub fn prefix(&self, b: usize) -> SemanticPath {
        SemanticPath {
            tokens: self.tokens[..b].to_vec(),
        }
    }
}

impl std::fmt::Display for SemanticPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, "]")
    }
}

/// Per-level diagnostics from [`Codebook::fit_residual_kmeans`].
#[derive(Debug, Clone)]
pub struct FitStats {
    /// k-means objective after each assignment step, one trace per level.
    pub objective_traces: Vec<Vec<f64>>,
    /// Mean squared residual norm after quantizing through each level.
    pub level_mse: Vec<f64>,
}

/// A fitted residual quantizer: `d` levels of `M` centroids of dimension
/// `d_h`. This is the tokenizer only — the generative model's output-side
/// codebook embeddings are separate learnable tensors.
pub struct Codebook {
    depth: usize,
    size: usize,
    dim: usize,
    /// One `M × d_h` tensor per level.
    levels: Vec<Tensor>,
}

impl Codebook {
    /// Fit by clustering raw embeddings at level 1, then per-level residuals.
    pub fn fit_residual_kmeans(
        item_embeddings: &Tensor,
        size: usize,
        depth: usize,
        seed: u64,
        max_iters: usize,
        tol: f64,
    ) -> Result<(Codebook, FitStats)> {
        let (n, dim) = item_embeddings.dims2()?;
        if n == 0 {
            return Err(Error::config("residual k-means: empty input"));
        }
        if n < size {
            return Err(Error::config(format!(
                "residual k-means: {n} items cannot fill a codebook of size {size}"
            )));
        }
        if depth == 0 {
            return Err(Error::config("residual k-means: depth must be >= 1"));
        }
        if size > u16::MAX as usize + 1 {
            return Err(Error::config(format!(
                "codebook size {size} exceeds token range"
            )));
        }

        let mut residuals = item_embeddings.data().to_vec();
        let mut levels = Vec::with_capacity(depth);
        let mut objective_traces = Vec::with_capacity(depth);
        let mut level_mse = Vec::with_capacity(depth);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        for _ in 0..depth {
            let fit = kmeans(&residuals, n, dim, size, max_iters, tol, &mut rng)?;
            for w in fit.objective_trace.windows(2) {
                debug_assert!(
                    w[1] <= w[0] * (1.0 + 1e-12) + 1e-12,
                    "k-means objective increased"
                );
            }
            for i in 0..n {
                let c = fit.assignments[i];
                for j in 0..dim {
                    residuals[i * dim + j] -= fit.centroids[c * dim + j];
                }
            }
            let mse = residuals.iter().map(|v| v * v).sum::<f64>() / n as f64;
            if fit.centroids.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("residual k-means produced NaN centroids"));
            }
            levels.push(Tensor::from_vec(vec![size, dim], fit.centroids)?);
            objective_traces.push(fit.objective_trace);
            level_mse.push(mse);
        }

        Ok((
            Codebook {
                depth,
                size,
                dim,
                levels,
            },
            FitStats {
                objective_traces,
                level_mse,
            },
        ))
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, level: usize, token: u16) -> &[f64] {
        self.levels[level].row(token as usize)
    }

    /// Greedy per-level nearest centroid on the running residual. Ties break
    /// to the lowest centroid index.
    pub fn encode(&self, h: &[f64]) -> Result<SemanticPath> {
        if h.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "codebook encode",
                lhs: vec![h.len()],
                rhs: vec![self.dim],
            });
        }
        let mut residual = h.to_vec();
        let mut tokens = Vec::with_capacity(self.depth);
        for level in 0..self.depth {
            let cents = self.levels[level].data();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..self.size {
                let row = &cents[c * self.dim..(c + 1) * self.dim];
                let d: f64 = residual
                    .iter()
                    .zip(row)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            let row = &cents[best * self.dim..(best + 1) * self.dim];
            for (r, c) in residual.iter_mut().zip(row) {
                *r -= c;
            }
            tokens.push(best as u16);
        }
        Ok(SemanticPath::new(tokens))
    }

    /// Sum of the selected centroids over the provided levels (a prefix
    /// reconstructs partially).
    pub fn decode(&self, path: &SemanticPath) -> Result<Vec<f64>> {
        if path.len() > self.depth {
            return Err(Error::usage(format!(
                "path length {} exceeds codebook depth {}",
                path.len(),
                self.depth
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (level, &tok) in path.tokens().iter().enumerate() {
            if tok as usize >= self.size {
                return Err(Error::usage(format!(
                    "token {tok} out of range for codebook size {}",
                    self.size
                )));
            }
            let row = self.centroid(level, tok);
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        Ok(out)
    }

    /// Encode a whole catalog; row `i` of `item_embeddings` becomes path `i`.
    pub fn encode_all(&self, item_embeddings: &Tensor) -> Result<Vec<SemanticPath>> {
        let (n, _) = item_embeddings.dims2()?;
        (0..n).map(|i| self.encode(item_embeddings.row(i))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = (1..=self.depth).map(|b| format!("level_{b}")).collect();
        let entries: Vec<(&str, &Tensor)> = names
            .iter()
            .map(|n| n.as_str())
            .zip(self.levels.iter())
            .collect();
        save_tensors(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Codebook> {
        let tensors = load_tensors(path)?;
        if tensors.is_empty() {
            return Err(Error::data("codebook file holds no tensors"));
        }
        let mut levels = Vec::with_capacity(tensors.len());
        for (b, (name, t)) in tensors.into_iter().enumerate() {
            let expected = format!("level_{}", b + 1);
            if name != expected {
                return Err(Error::data(format!(
                    "codebook tensor {b} named {name:?}, expected {expected:?}"
                )));
            }
            levels.push(t);
        }
        let (size, dim) = levels[0].dims2()?;
        for t in &levels {
            if t.dims2()? != (size, dim) {
                return Err(Error::data("codebook levels disagree on shape"));
            }
        }
        Ok(Codebook {
            depth: levels.len(),
            size,
            dim,
            levels,
        })
    }
}

/// Write the catalog's item→path map: `item_id,s1,...,sd`, item ids being
/// row indices.
pub fn save_item_paths(path: &Path, paths: &[SemanticPath]) -> Result<()> {
    use std::io::Write;
    let depth = paths.first().map(|p| p.len()).unwrap_or(0);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let cols: Vec<String> = (1..=depth).map(|b| format!("s{b}")).collect();
    writeln!(w, "item_id,{}", cols.join(","))?;
    for (item, p) in paths.iter().enumerate() {
        let toks: Vec<String> = p.tokens().iter().map(|t| t.to_string()).collect();
        writeln!(w, "{item},{}", toks.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read an item→path map written by [`save_item_paths`]. Rows must cover
/// item ids `0..n` in order.
pub fn load_item_paths(path: &Path) -> Result<Vec<SemanticPath>> {
    use std::io::BufRead;
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, line)) => line?,
    };
    if !header.starts_with("item_id,s1") {
        return Err(Error::data(format!(
            "line 1: bad item-path header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let item: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::data(format!("line {line_no}: bad item_id")))?;
        if item != out.len() {
            return Err(Error::data(format!(
                "line {line_no}: item ids must be dense and ordered (got {item}, expected {})",
                out.len()
            )));
        }
        let tokens: Vec<u16> = fields
            .map(|f| {
                f.trim()
                    .parse()
                    .map_err(|_| Error::data(format!("line {line_no}: bad token {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SemanticPath::new(tokens));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fit(
        points: Vec<f64>,
        n: usize,
        dim: usize,
        m: usize,
        d: usize,
        seed: u64,
    ) -> (Codebook, FitStats) {
        let t = Tensor::from_vec(vec![n, dim], points).unwrap();
        Codebook::fit_residual_kmeans(&t, m, d, seed, 100, 1e-6).unwrap()
    }

    #[test]
    fn exact_cover_when_points_equal_clusters() {
        let points = vec![0.0, 0.0, 4.0, 0.0, 0.0, 4.0, 4.0, 4.0];
        let (cb, stats) = fit(points.clone(), 4, 2, 4, 1, 3);
        assert!(stats.level_mse[0] < 1e-24);
        for i in 0..4 {
            let path = cb.encode(&points[i * 2..(i + 1) * 2]).unwrap();
            let rec = cb.decode(&path).unwrap();
            assert!((rec[0] - points[i * 2]).abs() < 1e-12);
            assert!((rec[1] - points[i * 2 + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn second_level_shrinks_residual_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 64;
        let dim = 4;
        let points: Vec<f64> = (0..n * dim).map(|_| rng.gen::<f64>() * 3.0).collect();
        let (_, stats) = fit(points, n, dim, 4, 3, 8);
        assert!(stats.level_mse[1] <= stats.level_mse[0]);
        assert!(stats.level_mse[2] <= stats.level_mse[1]);
    }

    #[test]
    fn too_few_items_is_a_config_error() {
        let t = Tensor::zeros(vec![3, 2]);
        assert!(matches!(
            Codebook::fit_residual_kmeans(&t, 4, 1, 0, 10, 1e-6),
            Err(Error::Config(_))
        ));
        let empty = Tensor::zeros(vec![0, 2]);
        assert!(matches!(
            Codebook::fit_residual_kmeans(&empty, 1, 1, 0, 10, 1e-6),
            Err(Error::Config(_))
        ));
    }

    fn hand_codebook(levels: Vec<Vec<f64>>, size: usize, dim: usize) -> Codebook {
        let depth = levels.len();
        Codebook {
            depth,
            size,
            dim,
            levels: levels
                .into_iter()
                .map(|d| Tensor::from_vec(vec![size, dim], d).unwrap())
                .collect(),
        }
    }

    #[test]
    fn encode_follows_residual_greedily() {
        // Level 1: {(0,0),(10,10)}; level 2: {(0,0),(1,1)}; h=(11,11) -> [1,1].
        let cb = hand_codebook(
            vec![vec![0.0, 0.0, 10.0, 10.0], vec![0.0, 0.0, 1.0, 1.0]],
            2,
            2,
        );
        assert_eq!(cb.encode(&[11.0, 11.0]).unwrap(), SemanticPath::new(vec![1, 1]));
    }

    #[test]
    fn encode_tie_breaks_to_lowest_index() {
        let cb = hand_codebook(vec![vec![0.0, 0.0, 2.0, 0.0]], 2, 2);
        // (1, 0) is equidistant from both centroids.
        assert_eq!(cb.encode(&[1.0, 0.0]).unwrap(), SemanticPath::new(vec![0]));
    }

    #[test]
    fn decode_prefix_and_zero_cases() {
        let cb = hand_codebook(
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.5, -0.5, -0.5]],
            2,
            2,
        );
        assert_eq!(cb.decode(&SemanticPath::new(vec![1])).unwrap(), vec![3.0, 4.0]);
        assert_eq!(
            cb.decode(&SemanticPath::new(vec![1, 0])).unwrap(),
            vec![3.5, 4.5]
        );
        let zeros = hand_codebook(vec![vec![0.0; 4]], 2, 2);
        assert_eq!(zeros.decode(&SemanticPath::new(vec![1])).unwrap(), vec![0.0, 0.0]);
        assert!(cb.decode(&SemanticPath::new(vec![5])).is_err());
    }

    #[test]
    fn encode_beats_every_full_path_exhaustively() {
        // M=4, d=2 on hierarchical data (4 well-separated clusters, tight
        // substructure): greedy residual encoding reaches the global minimum
        // reconstruction error over all 16 paths for every catalog item.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 40;
        let dim = 3;
        let centers = [
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, 10.0, 0.0],
            [0.0, 0.0, 10.0],
        ];
        let points: Vec<f64> = (0..n)
            .flat_map(|i| {
                let c = centers[i % 4];
                (0..dim)
                    .map(|j| c[j] + rng.gen::<f64>() - 0.5)
                    .collect::<Vec<_>>()
            })
            .collect();
        let (cb, _) = fit(points.clone(), n, dim, 4, 2, 21);
        for i in 0..n {
            let h = &points[i * dim..(i + 1) * dim];
            let path = cb.encode(h).unwrap();
            let err = |p: &SemanticPath| -> f64 {
                let rec = cb.decode(p).unwrap();
                h.iter().zip(&rec).map(|(x, y)| (x - y) * (x - y)).sum()
            };
            let own = err(&path);
            for a in 0..4u16 {
                for b in 0..4u16 {
                    let other = err(&SemanticPath::new(vec![a, b]));
                    assert!(
                        own <= other + 1e-12,
                        "greedy path {path} ({own}) worse than [{a},{b}] ({other})"
                    );
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("codebook.sids");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points: Vec<f64> = (0..32 * 4).map(|_| rng.gen::<f64>()).collect();
        let (cb, _) = fit(points, 32, 4, 8, 3, 2);
        cb.save(&file).unwrap();
        let loaded = Codebook::load(&file).unwrap();
        assert_eq!(loaded.depth(), 3);
        assert_eq!(loaded.size(), 8);
        for level in 0..3 {
            assert_eq!(loaded.levels[level].data(), cb.levels[level].data());
        }
    }

    #[test]
    fn item_path_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("item_paths.csv");
        let paths: Vec<SemanticPath> = (0..10u16)
            .map(|i| SemanticPath::new(vec![i % 3, i % 5, i % 2]))
            .collect();
        save_item_paths(&file, &paths).unwrap();
        let loaded = load_item_paths(&file).unwrap();
        assert_eq!(loaded, paths);
    }
}
