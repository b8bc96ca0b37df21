use rand::Rng;

use super::kernels::{self, axpy, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleByElement { x: Var, s: Var, idx: usize },
    AddRowBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Softmax(Var),
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    SelectRows { x: Var, rows: Vec<usize> },
    MeanRows { x: Var, lo: usize, hi: usize },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only operation tape. Node insertion order is a topological order.
///
/// One graph per forward pass; call [`Graph::reset`] (or build a new one)
/// between training steps. The graph is single-threaded; independent graphs
/// can be driven from different threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if `backward` has reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Accumulated gradient as a tensor, zeros when nothing flowed here.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        t.as_matrix_dims()
            .ok_or_else(|| Error::dim(op, t.shape(), &[]))
    }

    // ---- forward operations -------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`, i.e. applying a `[out×in]` weight to row vectors.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt")?;
        let (n, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).scaled(s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// `x * s[idx]` where `s` is a recorded vector (e.g. a gate).
    pub fn scale_by_element(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = self.value(s);
        if idx >= sv.numel() {
            return Err(Error::contract(format!(
                "element index {idx} out of range for shape {:?}",
                sv.shape()
            )));
        }
        let t = self.value(x).scaled(sv.data()[idx]);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::ScaleByElement { x, s, idx }, rg))
    }

    /// Adds a rank-1 bias `b[n]` to every row of `x[m×n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "add_row_bias")?;
        let bt = self.value(b);
        if bt.numel() != n {
            return Err(Error::dim("add_row_bias", self.value(x).shape(), bt.shape()));
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            axpy(1.0, bt.data(), &mut data[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRowBias(x, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim("layer_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Gathers rows of `table[V×d]` for each id, producing `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("token id {bad} out of range for vocabulary {v}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Inverted dropout with keep-mask drawn from `rng`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Softmax over the last dimension (each row of a matrix, or a vector).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "softmax")?;
        let tx = self.value(x);
        if !tx.all_finite() {
            return Err(Error::NumericDomain("softmax input is not finite".into()));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            kernels::softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Multi-head causal self-attention over `q, k, v` of shape `[T×D]`,
    /// heads split along columns. Returns the concatenated head outputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.causal_attention_biased(q, k, v, &vec![0.0; heads])
    }

    /// Causal attention with a linear distance penalty: head `h` subtracts
    /// `slopes[h] * (i - j)` from the score of query `i` against key `j`.
    pub fn causal_attention_biased(&mut self, q: Var, k: Var, v: Var, slopes: &[f64]) -> Result<Var> {
        let heads = slopes.len();
        let (t, d) = self.dims(q, "causal_attention")?;
        for other in [k, v] {
            if self.dims(other, "causal_attention")? != (t, d) {
                return Err(Error::dim("causal_attention", self.value(q).shape(), self.value(other).shape()));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("{d} columns not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    p[j] = kernels::dot(qi, &kd[j * d + off..j * d + off + dh]) * scale - slopes[h] * (i - j) as f64;
                }
                kernels::softmax_in_place(&mut p[..=i]);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    axpy(p[j], &vd[j * d + off..j * d + off + dh], oi);
                }
            }
        }
        let tensor = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(tensor, Op::CausalAttention { q, k, v, heads, probs }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::contract(format!("row {bad} out of range for {m} rows")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xd[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// Mean of rows `lo..hi` as a vector; the zero vector when the range is empty.
    pub fn mean_rows(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "mean_rows")?;
        if lo > hi || hi > m {
            return Err(Error::contract(format!("row range {lo}..{hi} invalid for {m} rows")));
        }
        let mut out = vec![0.0; n];
        if hi > lo {
            let xd = self.value(x).data();
            for r in lo..hi {
                axpy(1.0, &xd[r * n..(r + 1) * n], &mut out);
            }
            let inv = 1.0 / (hi - lo) as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = hi > lo && self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows { x, lo, hi }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean token cross-entropy of `logits[m×V]` against `targets[m]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        if m == 0 {
            return Err(Error::EmptyCollection("cross-entropy targets"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!("target {bad} out of range for vocabulary {v}")));
        }
        let ld = self.value(logits).data();
        if !ld.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericDomain("logits are not finite".into()));
        }
        let mut probs = ld.to_vec();
        let mut loss = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[tgt];
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires grad.
    /// Calling it again without [`Graph::zero_grad`] adds to existing grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => axpy(1.0, &g, acc),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Lazily allocated adjoint buffer for an input.
        fn slot(adj: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).as_matrix_dims().unwrap();
                let n = val(*b).cols();
                if wants(*a) {
                    // dA = dC · Bᵀ
                    gemm_nt(g, val(*b).data(), slot(adj, *a, m * k), m, n, k);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    gemm_tn(val(*a).data(), g, slot(adj, *b, k * n), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).as_matrix_dims().unwrap();
                let n = val(*b).rows();
                if wants(*a) {
                    // dA = dC · B
                    gemm_nn(g, val(*b).data(), slot(adj, *a, m * k), m, n, k);
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    gemm_tn(g, val(*a).data(), slot(adj, *b, n * k), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(1.0, g, slot(adj, v, g.len()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let s = slot(adj, *a, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * db[i];
                    }
                }
                if wants(*b) {
                    let s = slot(adj, *b, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * da[i];
                    }
                }
            }
            Op::Scale(x, c) => axpy(*c, g, slot(adj, *x, g.len())),
            Op::ScaleByElement { x, s, idx } => {
                let sv = val(*s);
                if wants(*x) {
                    axpy(sv.data()[*idx], g, slot(adj, *x, g.len()));
                }
                if wants(*s) {
                    let d = kernels::dot(g, val(*x).data());
                    slot(adj, *s, sv.numel())[*idx] += d;
                }
            }
            Op::AddRowBias(x, b) => {
                if wants(*x) {
                    axpy(1.0, g, slot(adj, *x, g.len()));
                }
                if wants(*b) {
                    let n = val(*b).numel();
                    let s = slot(adj, *b, n);
                    for row in g.chunks_exact(n) {
                        axpy(1.0, row, s);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                let s = slot(adj, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                let s = slot(adj, *x, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * kernels::gelu_grad(xd[i]);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = val(*gamma).numel();
                let m = rstd.len();
                let gam = val(*gamma).data();
                if wants(*gamma) {
                    let s = slot(adj, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            s[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if wants(*beta) {
                    let s = slot(adj, *beta, n);
                    for row in g.chunks_exact(n) {
                        axpy(1.0, row, s);
                    }
                }
                if wants(*x) {
                    let s = slot(adj, *x, m * n);
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let xh = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g[i * n + j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = kernels::dot(&dxhat, xh) / n as f64;
                        for j in 0..n {
                            s[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (rows, d) = val(*table).as_matrix_dims().unwrap();
                let s = slot(adj, *table, rows * d);
                for (t, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[t * d..(t + 1) * d], &mut s[id * d..(id + 1) * d]);
                }
            }
            Op::Dropout { x, mask } => {
                let s = slot(adj, *x, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * mask[i];
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let s = slot(adj, *x, g.len());
                for (i, (yr, gr)) in y.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                    let inner = kernels::dot(yr, gr);
                    for j in 0..n {
                        s[i * n + j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, adj);
            }
            Op::SelectRows { x, rows } => {
                let (m, n) = val(*x).as_matrix_dims().unwrap();
                let s = slot(adj, *x, m * n);
                for (i, &r) in rows.iter().enumerate() {
                    axpy(1.0, &g[i * n..(i + 1) * n], &mut s[r * n..(r + 1) * n]);
                }
            }
            Op::MeanRows { x, lo, hi } => {
                let (m, n) = val(*x).as_matrix_dims().unwrap();
                let inv = 1.0 / (hi - lo) as f64;
                let s = slot(adj, *x, m * n);
                for r in *lo..*hi {
                    axpy(inv, g, &mut s[r * n..(r + 1) * n]);
                }
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                let s = slot(adj, *x, n);
                s.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = val(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let s = slot(adj, *logits, probs.len());
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        s[i * v + j] += scale * probs[i * v + j];
                    }
                    s[i * v + t] -= scale;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let (t, d) = self.nodes[q.0].value.as_matrix_dims().unwrap();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                let gi = &g[i * d + off..i * d + off + dh];
                // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                for j in 0..=i {
                    axpy(p[j], gi, &mut dv[j * d + off..j * d + off + dh]);
                    dp[j] = kernels::dot(gi, &vd[j * d + off..j * d + off + dh]);
                }
                let inner = kernels::dot(p, &dp[..=i]);
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds != 0.0 {
                        axpy(ds, &kd[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                        axpy(ds, &qd[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let s = adj[var.0].get_or_insert_with(|| vec![0.0; t * d]);
                axpy(1.0, &buf, s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
    }

    /// Central-difference check of every input gradient of `f`.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.backward(loss).unwrap();
        let eps = 1e-5;
        for (vi, t) in inputs.iter().enumerate() {
            let analytic = g.grad_tensor(vars[vi]);
            for e in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut gg = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, tt)| {
                            let mut tt = tt.clone();
                            if j == vi {
                                tt.data_mut()[e] += delta;
                            }
                            gg.constant(tt)
                        })
                        .collect();
                    let l = f(&mut gg, &vs);
                    gg.value(l).data()[0]
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[e];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {vi} elem {e}: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // Second call without reset accumulates.
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn disconnected_node_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 4.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad_tensor(unused).data(), &[0.0, 0.0]);
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![rand_t(&[3, 4], &mut rng), rand_t(&[4, 2], &mut rng)], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            let c2 = g.mul(c, c).unwrap();
            g.sum(c2)
        });
        check(vec![rand_t(&[3, 4], &mut rng), rand_t(&[5, 4], &mut rng)], |g, v| {
            let c = g.matmul_nt(v[0], v[1]).unwrap();
            let c2 = g.gelu(c);
            g.sum(c2)
        });
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![rand_t(&[2, 3], &mut rng), rand_t(&[2, 3], &mut rng), rand_t(&[3], &mut rng)],
            |g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let m = g.mul(a, v[0]).unwrap();
                let b = g.add_row_bias(m, v[2]).unwrap();
                let r = g.relu(b);
                let s = g.scale(r, 1.7);
                let w = g.mul(s, v[1]).unwrap();
                g.sum(w)
            },
        );
    }

    #[test]
    fn layer_norm_and_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![
                rand_t(&[3, 5], &mut rng),
                rand_t(&[5], &mut rng),
                rand_t(&[5], &mut rng),
                rand_t(&[3, 5], &mut rng),
            ],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let p = g.softmax(y).unwrap();
                let w = g.mul(p, v[3]).unwrap();
                g.sum(w)
            },
        );
    }

    #[test]
    fn gather_and_pooling_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![rand_t(&[6, 3], &mut rng), rand_t(&[3], &mut rng)], |g, v| {
            let e = g.embedding(v[0], &[2, 0, 2, 5]).unwrap();
            let sel = g.select_rows(e, &[3, 1, 1]).unwrap();
            let pooled = g.mean_rows(e, 1, 3).unwrap();
            let pw = g.mul(pooled, v[1]).unwrap();
            let a = g.sum(sel);
            let sq = g.mul(sel, sel).unwrap();
            let b = g.sum(sq);
            let c = g.sum(pw);
            let ab = g.add(a, b).unwrap();
            g.add(ab, c).unwrap()
        });
    }

    #[test]
    fn scale_by_element_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![rand_t(&[2, 3], &mut rng), rand_t(&[3], &mut rng)], |g, v| {
            let p = g.softmax(v[1]).unwrap();
            let a = g.scale_by_element(v[0], p, 2).unwrap();
            let b = g.scale_by_element(v[0], p, 0).unwrap();
            let ab = g.mul(a, b).unwrap();
            g.sum(ab)
        });
    }

    #[test]
    fn attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(
            vec![
                rand_t(&[4, 6], &mut rng),
                rand_t(&[4, 6], &mut rng),
                rand_t(&[4, 6], &mut rng),
                rand_t(&[4, 6], &mut rng),
            ],
            |g, v| {
                let o = g.causal_attention(v[0], v[1], v[2], 2).unwrap();
                let w = g.mul(o, v[3]).unwrap();
                g.sum(w)
            },
        );
    }

    #[test]
    fn cross_entropy_grads_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check(vec![rand_t(&[3, 4], &mut rng)], |g, v| g.cross_entropy(v[0], &[1, 3, 0]).unwrap());

        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![2, 1], vec![3.0, -7.0]).unwrap());
        let ce = g.cross_entropy(l, &[0, 0]).unwrap();
        assert_eq!(g.value(ce).data(), &[0.0]);
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_t(&[5, 4], &mut rng);
        let k = rand_t(&[5, 4], &mut rng);
        let v = rand_t(&[5, 4], &mut rng);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let full = g.causal_attention(qv, kv, vv, 2).unwrap();
        // Perturbing the last position must leave earlier outputs untouched.
        let mut v2 = v.clone();
        v2.data_mut()[4 * 4..].iter_mut().for_each(|x| *x += 10.0);
        let vv2 = g.constant(v2);
        let pert = g.causal_attention(qv, kv, vv2, 2).unwrap();
        assert_eq!(g.value(full).data()[..16], g.value(pert).data()[..16]);
        assert_ne!(g.value(full).data()[16..], g.value(pert).data()[16..]);
    }

    #[test]
    fn dropout_is_seeded_and_scaled() {
        let x = Tensor::vector(vec![1.0; 200]);
        let run = |seed| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = g.dropout(v, 0.25, &mut rng).unwrap();
            g.value(d).clone()
        };
        let a = run(9);
        assert_eq!(a, run(9));
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let zeros = a.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 20 && zeros < 80);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        let bad = g.constant(Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(g.softmax(bad), Err(Error::NumericDomain(_))));
    }
}
