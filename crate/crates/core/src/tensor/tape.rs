//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, which is a valid topological order;
//! `backward` walks them once in reverse, accumulating gradients only along
//! paths that reach a trainable leaf.

use crate::error::{Error, Result};
use crate::tensor::{
    matmul_at_acc, matmul_bt_acc, matmul_raw, softmax_rows_raw, transpose_raw, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddRowBroadcast { a: usize, bias: usize },
    Silu { a: usize },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    LogSumExpRows { a: usize },
    RmsNorm { a: usize, gain: usize, eps: f64 },
    GatherRows { a: usize, rows: Vec<usize> },
    SelectPerRow { a: usize, cols: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SumAll { a: usize },
    MeanAll { a: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True when a trainable leaf is reachable from this node.
    grad_needed: bool,
}

/// Gradients keyed by tape position, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, grad_needed: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad_needed,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad_needed
    }

    /// Register an input tensor. It is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let trainable = t.requires_grad();
        self.push(Op::Leaf, t, trainable)
    }

    /// Register a non-trainable input (masks, targets, frozen features).
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(Op::Leaf, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, ka, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, value, g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let data = transpose_raw(self.value(a).data(), m, n);
        let value = Tensor::from_vec(vec![n, m], data)?;
        let g = self.needs(a);
        Ok(self.push(Op::Transpose { a: a.0 }, value, g))
    }

    fn zip_elementwise(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, value, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, value, g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let g = self.needs(a);
        Ok(self.push(Op::Scale { a: a.0, c }, value, g))
    }

    /// `a[m×n] + bias[1×n]`, bias added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let (bm, bn) = self.value(bias).dims2()?;
        if bm != 1 || bn != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        let bias_data = self.value(bias).data();
        for r in 0..m {
            for (v, b) in data[r * n..(r + 1) * n].iter_mut().zip(bias_data) {
                *v += b;
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        let g = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Op::AddRowBroadcast {
                a: a.0,
                bias: bias.0,
            },
            value,
            g,
        ))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let g = self.needs(a);
        Ok(self.push(Op::Silu { a: a.0 }, value, g))
    }

    fn check_no_nan(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).data().iter().any(|v| v.is_nan()) {
            return Err(Error::numeric(format!("{op}: NaN input")));
        }
        Ok(())
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_no_nan("softmax_rows", a)?;
        let (m, n) = self.value(a).dims2()?;
        let mut data = self.value(a).data().to_vec();
        softmax_rows_raw(&mut data, m, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        let g = self.needs(a);
        Ok(self.push(Op::SoftmaxRows { a: a.0 }, value, g))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_no_nan("log_softmax_rows", a)?;
        let (m, n) = self.value(a).dims2()?;
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        let g = self.needs(a);
        Ok(self.push(Op::LogSoftmaxRows { a: a.0 }, value, g))
    }

    /// Per-row log(Σ exp); output is `m×1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        self.check_no_nan("logsumexp_rows", a)?;
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m);
        for r in 0..m {
            data.push(crate::tensor::logsumexp(&src[r * n..(r + 1) * n]));
        }
        let value = Tensor::from_vec(vec![m, 1], data)?;
        let g = self.needs(a);
        Ok(self.push(Op::LogSumExpRows { a: a.0 }, value, g))
    }

    /// Per-row RMS normalization scaled by a `1×n` gain.
    pub fn rmsnorm(&mut self, a: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let (gm, gn) = self.value(gain).dims2()?;
        if gm != 1 || gn != n {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let src = self.value(a).data();
        let gain_data = self.value(gain).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..n {
                data[r * n + j] = row[j] * inv * gain_data[j];
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        let g = self.needs(a) || self.needs(gain);
        Ok(self.push(
            Op::RmsNorm {
                a: a.0,
                gain: gain.0,
                eps,
            },
            value,
            g,
        ))
    }

    /// Gather rows by index; the embedding-lookup primitive.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::usage(format!(
                "gather_rows: row index {bad} out of range for {m} rows"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let value = Tensor::from_vec(vec![rows.len(), n], data)?;
        let g = self.needs(a);
        Ok(self.push(
            Op::GatherRows {
                a: a.0,
                rows: rows.to_vec(),
            },
            value,
            g,
        ))
    }

    /// Pick one column per row: output `m×1` with `out[r] = a[r, cols[r]]`.
    pub fn select_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if cols.len() != m {
            return Err(Error::usage(format!(
                "select_per_row: {} column indices for {m} rows",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::usage(format!(
                "select_per_row: column index {bad} out of range for {n} columns"
            )));
        }
        let src = self.value(a).data();
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| src[r * n + c])
            .collect();
        let value = Tensor::from_vec(vec![m, 1], data)?;
        let g = self.needs(a);
        Ok(self.push(
            Op::SelectPerRow {
                a: a.0,
                cols: cols.to_vec(),
            },
            value,
            g,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > n {
            return Err(Error::usage(format!(
                "slice_cols: range {start}..{} out of {n} columns",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let value = Tensor::from_vec(vec![m, len], data)?;
        let g = self.needs(a);
        Ok(self.push(Op::SliceCols { a: a.0, start, len }, value, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat_cols: empty part list"));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let (_, pn) = self.value(p).dims2()?;
                data.extend_from_slice(&self.value(p).data()[r * pn..(r + 1) * pn]);
            }
        }
        let value = Tensor::from_vec(vec![m, total], data)?;
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            value,
            g,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat_rows: empty part list"));
        }
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(vec![rows, n], data)?;
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            value,
            g,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let g = self.needs(a);
        Ok(self.push(Op::SumAll { a: a.0 }, Tensor::scalar(s), g))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s: f64 = self.value(a).data().iter().sum();
        let g = self.needs(a);
        Ok(self.push(Op::MeanAll { a: a.0 }, Tensor::scalar(s / n as f64), g))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node on a
    /// path between the loss and a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].grad_needed {
                continue;
            }
            let grad = grads[idx].take().expect("checked above");
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, grad: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = av.dims2().expect("validated");
                let (_, n) = bv.dims2().expect("validated");
                if self.nodes[*a].grad_needed {
                    let slot = slot(grads, *a, av.shape());
                    matmul_bt_acc(slot.data_mut(), grad.data(), bv.data(), m, n, k);
                }
                if self.nodes[*b].grad_needed {
                    let slot = slot(grads, *b, bv.shape());
                    matmul_at_acc(slot.data_mut(), av.data(), grad.data(), k, m, n);
                }
            }
            Op::Transpose { a } => {
                if self.nodes[*a].grad_needed {
                    let (m, n) = self.nodes[*a].value.dims2().expect("validated");
                    let gt = transpose_raw(grad.data(), n, m);
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    for (s, g) in slot.data_mut().iter_mut().zip(&gt) {
                        *s += g;
                    }
                }
            }
            Op::Add { a, b } => {
                for &inp in [a, b].into_iter() {
                    if self.nodes[inp].grad_needed {
                        let slot = slot(grads, inp, self.nodes[inp].value.shape());
                        for (s, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                            *s += g;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[*a].grad_needed {
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    for (s, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *s += g;
                    }
                }
                if self.nodes[*b].grad_needed {
                    let slot = slot(grads, *b, self.nodes[*b].value.shape());
                    for (s, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *s -= g;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].grad_needed {
                    let other = self.nodes[*b].value.data().to_vec();
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    for ((s, g), o) in slot.data_mut().iter_mut().zip(grad.data()).zip(&other) {
                        *s += g * o;
                    }
                }
                if self.nodes[*b].grad_needed {
                    let other = self.nodes[*a].value.data().to_vec();
                    let slot = slot(grads, *b, self.nodes[*b].value.shape());
                    for ((s, g), o) in slot.data_mut().iter_mut().zip(grad.data()).zip(&other) {
                        *s += g * o;
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[*a].grad_needed {
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    for (s, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *s += g * c;
                    }
                }
            }
            Op::AddRowBroadcast { a, bias } => {
                let (m, n) = self.nodes[*a].value.dims2().expect("validated");
                if self.nodes[*a].grad_needed {
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    for (s, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *s += g;
                    }
                }
                if self.nodes[*bias].grad_needed {
                    let slot = slot(grads, *bias, self.nodes[*bias].value.shape());
                    let sd = slot.data_mut();
                    for r in 0..m {
                        for j in 0..n {
                            sd[j] += grad.data()[r * n + j];
                        }
                    }
                }
            }
            Op::Silu { a } => {
                if self.nodes[*a].grad_needed {
                    let x = self.nodes[*a].value.data().to_vec();
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    for ((s, g), &xv) in slot.data_mut().iter_mut().zip(grad.data()).zip(&x) {
                        let sig = sigmoid(xv);
                        *s += g * sig * (1.0 + xv * (1.0 - sig));
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[*a].grad_needed {
                    let y = node.value.data();
                    let (m, n) = node.value.dims2().expect("validated");
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    let sd = slot.data_mut();
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &grad.data()[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..n {
                            sd[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { a } => {
                if self.nodes[*a].grad_needed {
                    let y = node.value.data();
                    let (m, n) = node.value.dims2().expect("validated");
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    let sd = slot.data_mut();
                    for r in 0..m {
                        let gr = &grad.data()[r * n..(r + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            sd[r * n + j] += gr[j] - y[r * n + j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LogSumExpRows { a } => {
                if self.nodes[*a].grad_needed {
                    let x = self.nodes[*a].value.data().to_vec();
                    let lse = node.value.data().to_vec();
                    let (m, n) = self.nodes[*a].value.dims2().expect("validated");
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    let sd = slot.data_mut();
                    for r in 0..m {
                        let g = grad.data()[r];
                        for j in 0..n {
                            sd[r * n + j] += g * (x[r * n + j] - lse[r]).exp();
                        }
                    }
                }
            }
            Op::RmsNorm { a, gain, eps } => {
                let x = self.nodes[*a].value.data().to_vec();
                let gv = self.nodes[*gain].value.data().to_vec();
                let (m, n) = self.nodes[*a].value.dims2().expect("validated");
                for r in 0..m {
                    let xr = &x[r * n..(r + 1) * n];
                    let gr = &grad.data()[r * n..(r + 1) * n];
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let rms = (ms + eps).sqrt();
                    if self.nodes[*a].grad_needed {
                        // dx_j = g_j dy_j / rms - x_j (Σ_i dy_i g_i x_i) / (n rms³)
                        let dot: f64 = (0..n).map(|i| gr[i] * gv[i] * xr[i]).sum();
                        let slot = slot(grads, *a, self.nodes[*a].value.shape());
                        let sd = slot.data_mut();
                        for j in 0..n {
                            sd[r * n + j] +=
                                gv[j] * gr[j] / rms - xr[j] * dot / (n as f64 * rms * rms * rms);
                        }
                    }
                    if self.nodes[*gain].grad_needed {
                        let slot = slot(grads, *gain, self.nodes[*gain].value.shape());
                        let sd = slot.data_mut();
                        for j in 0..n {
                            sd[j] += gr[j] * xr[j] / rms;
                        }
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                if self.nodes[*a].grad_needed {
                    let (_, n) = self.nodes[*a].value.dims2().expect("validated");
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    let sd = slot.data_mut();
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            sd[r * n + j] += grad.data()[i * n + j];
                        }
                    }
                }
            }
            Op::SelectPerRow { a, cols } => {
                if self.nodes[*a].grad_needed {
                    let (_, n) = self.nodes[*a].value.dims2().expect("validated");
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    let sd = slot.data_mut();
                    for (r, &c) in cols.iter().enumerate() {
                        sd[r * n + c] += grad.data()[r];
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.nodes[*a].grad_needed {
                    let (m, n) = self.nodes[*a].value.dims2().expect("validated");
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    let sd = slot.data_mut();
                    for r in 0..m {
                        for j in 0..*len {
                            sd[r * n + start + j] += grad.data()[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let (m, total) = node.value.dims2().expect("validated");
                let mut offset = 0;
                for &p in parts {
                    let (_, pn) = self.nodes[p].value.dims2().expect("validated");
                    if self.nodes[p].grad_needed {
                        let slot = slot(grads, p, self.nodes[p].value.shape());
                        let sd = slot.data_mut();
                        for r in 0..m {
                            for j in 0..pn {
                                sd[r * pn + j] += grad.data()[r * total + offset + j];
                            }
                        }
                    }
                    offset += pn;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let (pm, pn) = self.nodes[p].value.dims2().expect("validated");
                    if self.nodes[p].grad_needed {
                        let slot = slot(grads, p, self.nodes[p].value.shape());
                        let sd = slot.data_mut();
                        for (s, g) in sd
                            .iter_mut()
                            .zip(&grad.data()[offset..offset + pm * pn])
                        {
                            *s += g;
                        }
                    }
                    offset += pm * pn;
                }
            }
            Op::SumAll { a } => {
                if self.nodes[*a].grad_needed {
                    let g = grad.item();
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    for s in slot.data_mut() {
                        *s += g;
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.nodes[*a].grad_needed {
                    let g = grad.item() / self.nodes[*a].value.numel() as f64;
                    let slot = slot(grads, *a, self.nodes[*a].value.shape());
                    for s in slot.data_mut() {
                        *s += g;
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut Vec<Option<Tensor>>, idx: usize, shape: &[usize]) -> &'g mut Tensor {
    grads[idx].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "index {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut tape = Tape::new();
        let sel = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::from_vec(vec![2, 1], vec![7.0, 9.0]).unwrap());
        let c = tape.matmul(sel, v).unwrap();
        assert_eq!(tape.value(c).data(), &[7.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 4], vec![3.0; 4]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert_close(tape.value(y).data(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn softmax_extreme_gap() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![0.0, 20.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 2.0611536181902037e-9).abs() < 1e-17);
        assert!((v[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 3], vec![0.3, -1.2, 2.5]).unwrap());
        let xs = tape.constant(Tensor::from_vec(vec![1, 3], vec![100.3, 98.8, 102.5]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let ys = tape.softmax_rows(xs).unwrap();
        assert_close(tape.value(y).data(), tape.value(ys).data(), 1e-15);
        let sum: f64 = tape.value(y).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_nan_input_is_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            tape.softmax_rows(x),
            Err(crate::error::Error::Numeric(_))
        ));
    }

    #[test]
    fn rmsnorm_unit_rms() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0; 4]).unwrap());
        let g = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0; 4]).unwrap());
        let y = tape.rmsnorm(x, g, 0.0).unwrap();
        assert_close(tape.value(y).data(), &[1.0; 4], 1e-15);
    }

    #[test]
    fn rmsnorm_hand_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = tape.rmsnorm(x, g, 0.0).unwrap();
        let denom = 12.5f64.sqrt();
        assert_close(tape.value(y).data(), &[3.0 / denom, 4.0 / denom], 1e-15);
    }

    #[test]
    fn rmsnorm_zero_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let g = tape.constant(Tensor::full(vec![1, 3], 1.0));
        let y = tape.rmsnorm(x, g, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]).with_grad());
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::Error::Usage(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5])
                .unwrap()
                .with_grad(),
        );
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_half_sum_of_squares_gives_x() {
        let mut tape = Tape::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(
            Tensor::from_vec(vec![2, 2], data.clone())
                .unwrap()
                .with_grad(),
        );
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_close(grads.get(x).unwrap().data(), &data, 1e-15);
    }

    /// Central finite differences against the analytic gradient for a graph
    /// builder, over every element of every input.
    fn finite_difference_check<F>(build: F, inputs: &[Tensor], tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
            let l = build(&mut t, &vs);
            t.value(l).item()
        };

        let h = 1e-5;
        for (ti, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[ti]).unwrap();
            for e in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "tensor {ti} elem {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradient_check_attention_like_composite() {
        // One full pre-norm attention block with softmax, rmsnorm, silu FFN.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..5u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(977).wrapping_add(13));
            let t = 3;
            let d = 4;
            let x = Tensor::randn(vec![t, d], 0.5, &mut r);
            let wq = Tensor::randn(vec![d, d], 0.5, &mut r);
            let wk = Tensor::randn(vec![d, d], 0.5, &mut r);
            let wv = Tensor::randn(vec![d, d], 0.5, &mut r);
            let gain = Tensor::randn(vec![1, d], 0.3, &mut rng);
            finite_difference_check(
                |tape, vars| {
                    let (x, wq, wk, wv, gain) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
                    let ones = tape.constant(Tensor::full(vec![1, 4], 1.0));
                    let xn = tape.rmsnorm(x, gain, 1e-6).unwrap();
                    let q = tape.matmul(xn, wq).unwrap();
                    let k = tape.matmul(xn, wk).unwrap();
                    let v = tape.matmul(xn, wv).unwrap();
                    let kt = tape.transpose(k).unwrap();
                    let scores = tape.matmul(q, kt).unwrap();
                    let scaled = tape.scale(scores, 0.5).unwrap();
                    let attn = tape.softmax_rows(scaled).unwrap();
                    let out = tape.matmul(attn, v).unwrap();
                    let res = tape.add(out, x).unwrap();
                    let act = tape.silu(res).unwrap();
                    let normed = tape.rmsnorm(act, ones, 1e-6).unwrap();
                    tape.sum_all(normed).unwrap()
                },
                &[x, wq, wk, wv, gain],
                1e-4,
            );
        }
    }

    #[test]
    fn gradient_check_log_ops_and_gather() {
        for seed in 0..5u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
            let table = Tensor::randn(vec![5, 3], 0.8, &mut r);
            let x = Tensor::randn(vec![2, 4], 0.8, &mut r);
            finite_difference_check(
                |tape, vars| {
                    let (table, x) = (vars[0], vars[1]);
                    let picked = tape.gather_rows(table, &[4, 0, 2]).unwrap();
                    let lse = tape.logsumexp_rows(picked).unwrap();
                    let lsm = tape.log_softmax_rows(x).unwrap();
                    let sel = tape.select_per_row(lsm, &[1, 3]).unwrap();
                    let a = tape.sum_all(lse).unwrap();
                    let b = tape.sum_all(sel).unwrap();
                    tape.sub(a, b).unwrap()
                },
                &[table, x],
                1e-4,
            );
        }
    }

    #[test]
    fn gradient_check_slice_concat_broadcast() {
        for seed in 0..5u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(53).wrapping_add(3));
            let x = Tensor::randn(vec![3, 4], 0.7, &mut r);
            let bias = Tensor::randn(vec![1, 4], 0.7, &mut r);
            finite_difference_check(
                |tape, vars| {
                    let (x, bias) = (vars[0], vars[1]);
                    let shifted = tape.add_row_broadcast(x, bias).unwrap();
                    let left = tape.slice_cols(shifted, 0, 2).unwrap();
                    let right = tape.slice_cols(shifted, 2, 2).unwrap();
                    let swapped = tape.concat_cols(&[right, left]).unwrap();
                    let doubled = tape.concat_rows(&[swapped, x]).unwrap();
                    let squared = tape.mul(doubled, doubled).unwrap();
                    tape.mean_all(squared).unwrap()
                },
                &[x, bias],
                1e-4,
            );
        }
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        let run = || -> Vec<f64> {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::randn(vec![4, 4], 1.0, &mut r).with_grad());
            let w = tape.leaf(Tensor::randn(vec![4, 4], 1.0, &mut r).with_grad());
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax_rows(y).unwrap();
            tape.value(s).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must be bit-identical");
    }
}
