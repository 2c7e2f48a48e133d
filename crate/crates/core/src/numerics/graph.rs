//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its output value. Nodes whose inputs do
//! not require gradients are recorded as constants, so frozen sub-graphs
//! cost nothing at backward time.

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive bias applied to masked attention keys before the softmax.
pub const ATTENTION_MASK_BIAS: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a batched self-attention call: `batch` sequences of `len`
/// positions stacked into `(batch·len) × dim` matrices, split into `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
}

/// Which backward rule to sabotage (only reachable with the
/// `fault-injection` feature).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the right-hand gradient of every matmul by 1.5.
    MatMulRhs,
    /// Drops the centering term of the layer-norm backward.
    LayerNormCentering,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Contrastive {
        scores: Var,
        include_positive: bool,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        layout: AttentionLayout,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Contrastive { .. } => "contrastive",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    #[cfg(feature = "fault-injection")]
    fault: Option<Fault>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[cfg(feature = "fault-injection")]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    #[cfg(feature = "fault-injection")]
    fn has_fault(&self, fault: Fault) -> bool {
        self.fault == Some(fault)
    }

    #[cfg(not(feature = "fault-injection"))]
    #[inline(always)]
    fn has_fault(&self, _fault: Fault) -> bool {
        false
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} × {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add(a, b), &[a, b])
    }

    /// Broadcasts a length-`n` vector over every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {} vs cols {}", self.value(bias).len(), n),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddRowBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("mul", "operand shapes differ".into()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Scale(x, s), &[x])
    }

    /// `x + c` for an untracked tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(shape_err("add_const", "operand shapes differ".into()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = c.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddConst(x), &[x])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Plain logistic function. Losses should use [`Graph::bce_with_logits`].
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), &[x])
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes each last-dimension vector, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", "gain/bias length must equal last dim".into()));
        }
        let rows = self.value(x).rows();
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2(a);
        let (m2, q) = self.dims2(b);
        if m != m2 {
            return Err(shape_err("concat_cols", format!("rows {m} vs {m2}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&ad[i * p..(i + 1) * p]);
            out.extend_from_slice(&bd[i * q..(i + 1) * q]);
        }
        self.push(Tensor::new(vec![m, p + q], out)?, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let (k, n2) = self.dims2(b);
        if n != n2 {
            return Err(shape_err("concat_rows", format!("cols {n} vs {n2}")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        self.push(Tensor::new(vec![m + k, n], out)?, Op::ConcatRows(a, b), &[a, b])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows table".into(),
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let src = self.value(x).data();
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[i] = norm;
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::L2NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Sigmoid + binary cross-entropy fused in log-sum-exp form.
    ///
    /// Per-row losses are summed over columns, then averaged over rows.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.value(logits).shape() != targets.shape() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.value(logits).shape(), targets.shape()),
            ));
        }
        let rows = self.value(logits).rows();
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| bce_logit(z, y))
            .sum();
        self.push(
            Tensor::scalar(total / rows as f64),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        )
    }

    /// In-batch contrastive loss over a `B×B` score matrix whose diagonal holds
    /// the positive pairs:
    /// `-(1/B) Σ_i [ s_ii − log Σ_j exp s_ij ]`, where the inner sum skips `j = i`
    /// unless `include_positive` is set.
    pub fn contrastive(&mut self, scores: Var, include_positive: bool) -> Result<Var> {
        let (b, b2) = self.dims2(scores);
        if b != b2 || b < 2 {
            return Err(shape_err("contrastive", format!("need square B×B with B ≥ 2, got {b}×{b2}")));
        }
        let s = self.value(scores).data();
        let mut probs = vec![0.0; b * b];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &s[i * b..(i + 1) * b];
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| include_positive || j != i)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..b {
                if include_positive || j != i {
                    let e = (row[j] - max).exp();
                    probs[i * b + j] = e;
                    z += e;
                }
            }
            for j in 0..b {
                probs[i * b + j] /= z;
            }
            loss -= row[i] - (max + z.ln());
        }
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::Contrastive {
                scores,
                include_positive,
                probs,
            },
            &[scores],
        )
    }

    /// Batched multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `(batch·len) × dim`; head `a` uses columns
    /// `a·dim/heads .. (a+1)·dim/heads`. Scores are scaled by the inverse square
    /// root of the head width. Keys with `key_mask[i] == false` receive an
    /// additive [`ATTENTION_MASK_BIAS`] before the softmax. Output is the
    /// concatenation of the heads, `(batch·len) × dim`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        layout: AttentionLayout,
    ) -> Result<Var> {
        let AttentionLayout { batch, len, heads } = layout;
        let (n, dim) = self.dims2(q);
        if n != batch * len
            || self.dims2(k) != (n, dim)
            || self.dims2(v) != (n, dim)
            || key_mask.len() != n
            || heads == 0
            || dim % heads != 0
        {
            return Err(shape_err(
                "attention",
                format!("q {:?}, layout {:?}, mask {}", self.value(q).shape(), layout, key_mask.len()),
            ));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut out = vec![0.0; n * dim];
        let mut scores = vec![0.0; len];
        for b in 0..batch {
            let base = b * len;
            for a in 0..heads {
                let off = a * dh;
                for i in 0..len {
                    let qi = &qd[(base + i) * dim + off..(base + i) * dim + off + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(base + j) * dim + off..(base + j) * dim + off + dh];
                        let mut dot = 0.0;
                        for (x, y) in qi.iter().zip(kj) {
                            dot += x * y;
                        }
                        *s = dot * scale;
                        if !key_mask[base + j] {
                            *s += ATTENTION_MASK_BIAS;
                        }
                    }
                    softmax_in_place(&mut scores);
                    let p_off = ((b * heads + a) * len + i) * len;
                    probs[p_off..p_off + len].copy_from_slice(&scores);
                    let o = &mut out[(base + i) * dim + off..(base + i) * dim + off + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vd[(base + j) * dim + off..(base + j) * dim + off + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += p * vv;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![n, dim], out)?,
            Op::Attention {
                q,
                k,
                v,
                probs,
                layout,
            },
            &[q, k, v],
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates d`loss`/d(node) into every node that requires a gradient.
    /// `loss` must be a single-element tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "loss must be a scalar".into()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contributions = self.backward_op(i, &op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
            for (target, g) in contributions {
                self.accumulate(target, g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, g: Vec<f64>) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, idx: usize, op: &Op, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::with_capacity(3);
        let y = self.nodes[idx].value.data();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a);
                let n = self.value(b).cols();
                if self.tracked(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_acc(dy, self.value(b).data(), m, n, k, &mut da);
                    out.push((a, da));
                }
                if self.tracked(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(self.value(a).data(), dy, m, k, n, &mut db);
                    if self.has_fault(Fault::MatMulRhs) {
                        db.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    out.push((b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((a, dy.to_vec()));
                out.push((b, dy.to_vec()));
            }
            Op::AddRowBias(x, bias) => {
                out.push((x, dy.to_vec()));
                if self.tracked(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for row in dy.chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out.push((bias, db));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                out.push((a, dy.iter().zip(bd).map(|(g, v)| g * v).collect()));
                out.push((b, dy.iter().zip(ad).map(|(g, v)| g * v).collect()));
            }
            Op::Scale(x, s) => out.push((x, dy.iter().map(|g| g * s).collect())),
            Op::AddConst(x) => out.push((x, dy.to_vec())),
            Op::Relu(x) => {
                let xd = self.value(x).data();
                out.push((x, dy.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(x) => out.push((x, dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect())),
            Op::Exp(x) => out.push((x, dy.iter().zip(y).map(|(g, e)| g * e).collect())),
            Op::Log(x) => {
                let xd = self.value(x).data();
                out.push((x, dy.iter().zip(xd).map(|(g, v)| g / v).collect()));
            }
            Op::Sum(x) => out.push((x, vec![dy[0]; self.value(x).len()])),
            Op::Mean(x) => {
                let n = self.value(x).len();
                out.push((x, vec![dy[0] / n as f64; n]));
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims2(x);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = dy[j * m + i];
                    }
                }
                out.push((x, dx));
            }
            Op::SoftmaxRows(x) => {
                let n = self.value(x).cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                ref xhat,
                ref inv_std,
            } => {
                let c = self.value(gain).len();
                let g = self.value(gain).data();
                let centering = !self.has_fault(Fault::LayerNormCentering);
                if self.tracked(x) {
                    let mut dx = vec![0.0; dy.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &dy[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * g[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        if !centering {
                            mean_d = 0.0;
                        }
                        for j in 0..c {
                            dx[r * c + j] = is * (gr[j] * g[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    out.push((x, dx));
                }
                if self.tracked(gain) || self.tracked(bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, hr) in dy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    out.push((gain, dg));
                    out.push((bias, db));
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = self.dims2(a);
                let q = self.value(b).cols();
                let mut da = Vec::with_capacity(m * p);
                let mut db = Vec::with_capacity(m * q);
                for row in dy.chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                out.push((a, da));
                out.push((b, db));
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(a).len();
                out.push((a, dy[..na].to_vec()));
                out.push((b, dy[na..].to_vec()));
            }
            Op::GatherRows { table, ref ids } => {
                let c = self.value(table).cols();
                let mut dt = vec![0.0; self.value(table).len()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += dy[i * c + j];
                    }
                }
                out.push((table, dt));
            }
            Op::L2NormalizeRows { x, ref norms } => {
                let n = self.value(x).cols();
                let mut dx = vec![0.0; y.len()];
                for (i, norm) in norms.iter().enumerate() {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &dy[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                out.push((x, dx));
            }
            Op::BceWithLogits { logits, ref targets } => {
                let rows = self.value(logits).rows() as f64;
                let z = self.value(logits).data();
                let scale = dy[0] / rows;
                out.push((
                    logits,
                    z.iter()
                        .zip(targets)
                        .map(|(&zz, &t)| scale * (sigmoid(zz) - t))
                        .collect(),
                ));
            }
            Op::Contrastive {
                scores,
                include_positive,
                ref probs,
            } => {
                let b = self.value(scores).rows();
                let scale = dy[0] / b as f64;
                let mut ds = vec![0.0; b * b];
                for i in 0..b {
                    for j in 0..b {
                        let mut d = 0.0;
                        if include_positive || j != i {
                            d += probs[i * b + j];
                        }
                        if j == i {
                            d -= 1.0;
                        }
                        ds[i * b + j] = scale * d;
                    }
                }
                out.push((scores, ds));
            }
            Op::Attention {
                q,
                k,
                v,
                ref probs,
                layout,
            } => {
                let AttentionLayout { batch, len, heads } = layout;
                let dim = self.value(q).cols();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; len];
                for bb in 0..batch {
                    let base = bb * len;
                    for a in 0..heads {
                        let off = a * dh;
                        for i in 0..len {
                            let p_off = ((bb * heads + a) * len + i) * len;
                            let p = &probs[p_off..p_off + len];
                            let gi = &dy[(base + i) * dim + off..(base + i) * dim + off + dh];
                            let mut dot = 0.0;
                            for j in 0..len {
                                let vj = &vd[(base + j) * dim + off..(base + j) * dim + off + dh];
                                let mut s = 0.0;
                                for (x, y) in gi.iter().zip(vj) {
                                    s += x * y;
                                }
                                dp[j] = s;
                                dot += p[j] * s;
                                if p[j] != 0.0 {
                                    let dvj = &mut dv[(base + j) * dim + off..(base + j) * dim + off + dh];
                                    for (d, g) in dvj.iter_mut().zip(gi) {
                                        *d += p[j] * g;
                                    }
                                }
                            }
                            let qi_start = (base + i) * dim + off;
                            for j in 0..len {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj_start = (base + j) * dim + off;
                                for d in 0..dh {
                                    dq[qi_start + d] += ds * kd[kj_start + d];
                                    dk[kj_start + d] += ds * qd[qi_start + d];
                                }
                            }
                        }
                    }
                }
                out.push((q, dq));
                out.push((k, dk));
                out.push((v, dv));
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−[y·log σ(z) + (1−y)·log(1−σ(z))]` without forming `σ(z)`.
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
