use super::{gemm_nn, gemm_nt, gemm_tn, NumericsError, Real, Result, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var, cols: usize },
    Scale { x: Var, factor: T },
    Softmax { x: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    MaskedMean { x: Var, mask: Vec<bool>, seq_len: usize, counts: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<T> },
    Cosine { a: Var, b: Var, norms_a: Vec<T>, norms_b: Vec<T> },
    Concat { parts: Vec<(Var, usize)> },
    AbsDiff { a: Var, b: Var },
    SelectRows { x: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T>, cols: usize },
    Sum { x: Var },
    Attention(Box<AttentionCtx<T>>),
}

#[derive(Debug)]
struct AttentionCtx<T> {
    q: Var,
    k: Var,
    v: Var,
    key_mask: Vec<bool>,
    seq_len: usize,
    heads: usize,
    probs: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers and a reverse sweep is a valid topological order.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name, node });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(node))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(NumericsError::Shape { op, detail: format!("expected a 2-D tensor, got {s:?}") }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(NumericsError::Shape { op: "matmul", detail: format!("[{m}, {k}] @ [{k2}, {n}]") });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `a[m,k] @ b[n,k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_t", a)?;
        let (n, k2) = self.dims2("matmul_t", b)?;
        if k != k2 {
            return Err(NumericsError::Shape { op: "matmul_t", detail: format!("[{m}, {k}] @ [{n}, {k2}]^T") });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul_t", value, Op::MatMulT { a, b, m, k, n }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    /// Adds `bias[n]` to every row of `x[m,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims2("add_bias", x)?;
        if self.shape(bias) != [cols] {
            return Err(NumericsError::Shape {
                op: "add_bias",
                detail: format!("{:?} + bias {:?}", self.shape(x), self.shape(bias)),
            });
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(cols).flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias { x, bias, cols }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("softmax", value, Op::Softmax { x, cols }, &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.dims2("layer_norm", x)?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(NumericsError::Shape {
                op: "layer_norm",
                detail: format!("{:?} with gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            });
        }
        let n = T::c(cols as f64);
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.value(x).data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + bta[j]);
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, cols, xhat, rstd }, &[x, gamma, beta])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_fwd);
        self.push("gelu", value, Op::Gelu { x }, &[x])
    }

    /// Gathers rows of `table[V,d]` by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], table_name: &str) -> Result<Var> {
        let (rows, dim) = self.dims2("embedding", table)?;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::Index { op: "embedding", table: table_name.to_string(), index: id, size: rows });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        self.push("embedding", value, Op::Embedding { table, ids: ids.to_vec(), dim }, &[table])
    }

    /// Mean over the sequence axis of `x[B*L, d]` restricted to rows whose
    /// `mask` entry is set, giving `[B, d]`. Rows outside the mask are never read.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool], seq_len: usize) -> Result<Var> {
        let (rows, dim) = self.dims2("masked_mean", x)?;
        if seq_len == 0 || rows % seq_len != 0 || mask.len() != rows {
            return Err(NumericsError::Shape {
                op: "masked_mean",
                detail: format!("input {:?}, mask length {}, sequence length {seq_len}", self.shape(x), mask.len()),
            });
        }
        let batch = rows / seq_len;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); batch * dim];
        let mut counts = Vec::with_capacity(batch);
        for b in 0..batch {
            let acc = &mut out[b * dim..(b + 1) * dim];
            let mut count = 0usize;
            for t in 0..seq_len {
                let r = b * seq_len + t;
                if mask[r] {
                    count += 1;
                    for (a, &v) in acc.iter_mut().zip(&src[r * dim..(r + 1) * dim]) {
                        *a = *a + v;
                    }
                }
            }
            if count == 0 {
                return Err(NumericsError::Degenerate { op: "masked_mean", detail: format!("mask row {b} is empty") });
            }
            let inv = T::one() / T::c(count as f64);
            acc.iter_mut().for_each(|a| *a = *a * inv);
            counts.push(count);
        }
        let value = Tensor::new(vec![batch, dim], out)?;
        self.push("masked_mean", value, Op::MaskedMean { x, mask: mask.to_vec(), seq_len, counts }, &[x])
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / cols.max(1));
        for (i, row) in data.chunks_mut(cols).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(NumericsError::Degenerate { op: "l2_normalize", detail: format!("row {i} has zero norm") });
            }
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, norms }, &[x])
    }

    /// Row-wise cosine similarity of two equally shaped tensors, giving `[rows]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let cols = self.value(a).cols();
        let rows = self.value(a).numel() / cols.max(1);
        let mut out = Vec::with_capacity(rows);
        let mut norms_a = Vec::with_capacity(rows);
        let mut norms_b = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (self.value(a).row(r), self.value(b).row(r));
            let na = ra.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = rb.iter().map(|&v| v * v).sum::<T>().sqrt();
            if na <= T::zero() || nb <= T::zero() {
                return Err(NumericsError::Degenerate { op: "cosine", detail: format!("row {r} has zero norm") });
            }
            let dot = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<T>();
            out.push(dot / (na * nb));
            norms_a.push(na);
            norms_b.push(nb);
        }
        let value = Tensor::new(vec![rows], out)?;
        self.push("cosine", value, Op::Cosine { a, b, norms_a, norms_b }, &[a, b])
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| NumericsError::Shape { op: "concat", detail: "no inputs".into() })?;
        let (rows, _) = self.dims2("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat", p)?;
            if r != rows {
                return Err(NumericsError::Shape { op: "concat", detail: format!("row counts {rows} vs {r}") });
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|&(_, c)| c).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, _) in &widths {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push("concat", value, Op::Concat { parts: widths }, parts)
    }

    /// Elementwise `|a - b|`.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("abs_diff", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y).abs()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("abs_diff", value, Op::AbsDiff { a, b }, &[a, b])
    }

    /// Gathers rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("select_rows", x)?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(NumericsError::Index { op: "select_rows", table: "input".into(), index: i, size: rows });
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        self.push("select_rows", value, Op::SelectRows { x, indices: indices.to_vec() }, &[x])
    }

    /// Mean softmax cross-entropy of `logits[m,C]` against integer labels.
    ///
    /// Entries flagged in `exclude` (row-major, same size as `logits`) are
    /// dropped from the partition function, as if their logit were -inf.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], exclude: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.dims2("cross_entropy", logits)?;
        if labels.len() != rows || exclude.is_some_and(|e| e.len() != rows * cols) {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                detail: format!("logits {:?} with {} labels", self.shape(logits), labels.len()),
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            let y = labels[r];
            let excluded = |j: usize| exclude.is_some_and(|e| e[r * cols + j]);
            if y >= cols || excluded(y) {
                return Err(NumericsError::Index { op: "cross_entropy", table: "classes".into(), index: y, size: cols });
            }
            let row = &src[r * cols..(r + 1) * cols];
            let max = (0..cols).filter(|&j| !excluded(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..cols {
                if !excluded(j) {
                    let e = (row[j] - max).exp();
                    probs[r * cols + j] = e;
                    z = z + e;
                }
            }
            probs[r * cols..(r + 1) * cols].iter_mut().for_each(|p| *p = *p / z);
            total = total + (z.ln() + max - row[y]);
        }
        let value = Tensor::scalar(total / T::c(rows as f64));
        self.push("cross_entropy", value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs, cols }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    /// Multi-head scaled dot-product attention over `[B*L, d]` projections.
    ///
    /// Keys whose `key_mask` entry is unset get probability exactly zero from
    /// every query (the `-inf` logit convention without storing infinities).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], seq_len: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, dim) = self.dims2("attention", q)?;
        if seq_len == 0 || rows % seq_len != 0 || key_mask.len() != rows || heads == 0 || dim % heads != 0 {
            return Err(NumericsError::Shape {
                op: "attention",
                detail: format!("input {:?}, mask {}, seq_len {seq_len}, heads {heads}", self.shape(q), key_mask.len()),
            });
        }
        let batch = rows / seq_len;
        let dh = dim / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let l = seq_len;
        let mut probs = vec![T::zero(); batch * heads * l * l];
        let mut out = vec![T::zero(); rows * dim];
        let mut scores = vec![T::zero(); l];
        for b in 0..batch {
            let keys: Vec<usize> = (0..l).filter(|&j| key_mask[b * l + j]).collect();
            if keys.is_empty() {
                return Err(NumericsError::Degenerate { op: "attention", detail: format!("sequence {b} has no unmasked keys") });
            }
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let qi = &qd[(b * l + i) * dim + off..(b * l + i) * dim + off + dh];
                    let mut max = T::neg_infinity();
                    for &j in &keys {
                        let kj = &kd[(b * l + j) * dim + off..(b * l + j) * dim + off + dh];
                        let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let p = &mut probs[((b * heads + h) * l + i) * l..((b * heads + h) * l + i + 1) * l];
                    let mut z = T::zero();
                    for &j in &keys {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        z = z + e;
                    }
                    let o = &mut out[(b * l + i) * dim + off..(b * l + i) * dim + off + dh];
                    for &j in &keys {
                        p[j] = p[j] / z;
                        let vj = &vd[(b * l + j) * dim + off..(b * l + j) * dim + off + dh];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov = *ov + p[j] * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, dim], out)?;
        let ctx = AttentionCtx { q, k, v, key_mask: key_mask.to_vec(), seq_len, heads, probs };
        self.push("attention", value, Op::Attention(Box::new(ctx)), &[q, k, v])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Afterwards every `requires_grad` node has a gradient; leaves that did not
    /// contribute to `loss` get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            let shape = self.nodes[loss.0].value.shape().to_vec();
            self.grads[loss.0] = Some(Tensor::ones(shape));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, g.data());
            self.grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if matches!(node.op, Op::Leaf) && self.grads[i].as_ref().is_some_and(|g| !g.is_finite()) {
                return Err(NumericsError::NonFinite { op: "backward", node: i });
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(contribution).for_each(|(a, c)| *a = *a + c),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contribution).expect("gradient matches value shape"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Temporarily detach the op so the match can borrow node values freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.value(a).data(), g, &mut db, m, k, n);
                    self.accumulate(b, db);
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(g, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(g, self.value(a).data(), &mut db, m, n, k);
                    self.accumulate(b, db);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            &Op::Mul { a, b } => {
                let da = g.iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
                let db = g.iter().zip(self.value(a).data()).map(|(&x, &y)| x * y).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::AddBias { x, bias, cols } => {
                self.accumulate(x, g.to_vec());
                if self.wants(bias) {
                    let mut db = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    self.accumulate(bias, db);
                }
            }
            &Op::Scale { x, factor } => {
                self.accumulate(x, g.iter().map(|&v| v * factor).collect());
            }
            &Op::Softmax { x, cols } => {
                let y = self.nodes[i].value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                self.accumulate(x, dx);
            }
            Op::LayerNorm { x, gamma, beta, cols, xhat, rstd } => {
                let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
                let n = T::c(cols as f64);
                let gm = self.value(gamma).data().to_vec();
                if self.wants(x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), &r) in g.chunks(cols).zip(xhat.chunks(cols)).zip(rstd) {
                        let dh: Vec<T> = gr.iter().zip(&gm).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        dx.extend(dh.iter().zip(hr).map(|(&d, &h)| r * (d - mean_dh - h * mean_dh_h)));
                    }
                    self.accumulate(x, dx);
                }
                if self.wants(gamma) || self.wants(beta) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] = dg[j] + gr[j] * hr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    self.accumulate(gamma, dg);
                    self.accumulate(beta, db);
                }
            }
            &Op::Gelu { x } => {
                let dx = g.iter().zip(self.value(x).data()).map(|(&d, &v)| d * gelu_grad(v)).collect();
                self.accumulate(x, dx);
            }
            Op::Embedding { table, ids, dim } => {
                let (table, dim) = (*table, *dim);
                if self.wants(table) {
                    let mut dt = vec![T::zero(); self.value(table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * dim..(id + 1) * dim];
                        dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]).for_each(|(a, &b)| *a = *a + b);
                    }
                    self.accumulate(table, dt);
                }
            }
            Op::MaskedMean { x, mask, seq_len, counts } => {
                let x = *x;
                let dim = self.value(x).cols();
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (b, &count) in counts.iter().enumerate() {
                    let inv = T::one() / T::c(count as f64);
                    for t in 0..*seq_len {
                        let r = b * seq_len + t;
                        if mask[r] {
                            for (d, &gv) in dx[r * dim..(r + 1) * dim].iter_mut().zip(&g[b * dim..(b + 1) * dim]) {
                                *d = gv * inv;
                            }
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let x = *x;
                let y = self.nodes[i].value.data();
                let cols = self.nodes[i].value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &nrm) in y.chunks(cols).zip(g.chunks(cols)).zip(norms) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| (b - a * dot) / nrm));
                }
                self.accumulate(x, dx);
            }
            Op::Cosine { a, b, norms_a, norms_b } => {
                let (a, b) = (*a, *b);
                let cols = self.value(a).cols();
                let c = self.nodes[i].value.data();
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let mut da = Vec::with_capacity(ad.len());
                let mut db = Vec::with_capacity(bd.len());
                for r in 0..c.len() {
                    let (na, nb) = (norms_a[r], norms_b[r]);
                    for j in 0..cols {
                        let (av, bv) = (ad[r * cols + j], bd[r * cols + j]);
                        da.push(g[r] * (bv / (na * nb) - c[r] * av / (na * na)));
                        db.push(g[r] * (av / (na * nb) - c[r] * bv / (nb * nb)));
                    }
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &(p, width) in parts {
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + width]);
                        }
                        self.accumulate(p, dp);
                    }
                    offset += width;
                }
            }
            &Op::AbsDiff { a, b } => {
                let sign: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| if x > y { T::one() } else if x < y { -T::one() } else { T::zero() })
                    .collect();
                let da = g.iter().zip(&sign).map(|(&d, &s)| d * s).collect();
                let db = g.iter().zip(&sign).map(|(&d, &s)| -(d * s)).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::SelectRows { x, indices } => {
                let x = *x;
                let cols = self.value(x).cols();
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (r, &src) in indices.iter().enumerate() {
                    for (d, &gv) in dx[src * cols..(src + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d = *d + gv;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::CrossEntropy { logits, labels, probs, cols } => {
                let rows = labels.len();
                let scale = g[0] / T::c(rows as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * cols + y] = dl[r * cols + y] - scale;
                }
                self.accumulate(*logits, dl);
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Attention(ctx) => self.attention_backward(ctx, g),
        }
        self.nodes[i].op = op;
    }

    fn attention_backward(&mut self, ctx: &AttentionCtx<T>, g: &[T]) {
        let AttentionCtx { q, k, v, key_mask, seq_len, heads, probs } = ctx;
        let (q, k, v, l, heads) = (*q, *k, *v, *seq_len, *heads);
        let dim = self.value(q).cols();
        let rows = self.value(q).rows();
        let batch = rows / l;
        let dh = dim / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); rows * dim];
        let mut dk = vec![T::zero(); rows * dim];
        let mut dv = vec![T::zero(); rows * dim];
        let mut dp = vec![T::zero(); l];
        for b in 0..batch {
            let keys: Vec<usize> = (0..l).filter(|&j| key_mask[b * l + j]).collect();
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let p = &probs[((b * heads + h) * l + i) * l..((b * heads + h) * l + i + 1) * l];
                    let go = &g[(b * l + i) * dim + off..(b * l + i) * dim + off + dh];
                    let mut dot = T::zero();
                    for &j in &keys {
                        let vj = &vd[(b * l + j) * dim + off..(b * l + j) * dim + off + dh];
                        dp[j] = go.iter().zip(vj).map(|(&x, &y)| x * y).sum::<T>();
                        dot = dot + p[j] * dp[j];
                        let dvj = &mut dv[(b * l + j) * dim + off..(b * l + j) * dim + off + dh];
                        dvj.iter_mut().zip(go).for_each(|(d, &x)| *d = *d + p[j] * x);
                    }
                    let qi_base = (b * l + i) * dim + off;
                    for &j in &keys {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj_base = (b * l + j) * dim + off;
                        for t in 0..dh {
                            dq[qi_base + t] = dq[qi_base + t] + ds * kd[kj_base + t];
                            dk[kj_base + t] = dk[kj_base + t] + ds * qd[qi_base + t];
                        }
                    }
                }
            }
        }
        self.accumulate(q, dq);
        self.accumulate(k, dk);
        self.accumulate(v, dv);
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / z);
}

const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::c(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(t(&[1, 3], &[0.3, -2.0, 5.5]));
        let c = tape.cosine(v, v).unwrap();
        assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_mean_skips_masked_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[2.0, 2.0, 4.0, 4.0]));
        let m = tape.masked_mean(x, &[true, false], 2).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 2.0]);
    }

    #[test]
    fn masked_mean_rejects_empty_mask_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1.0; 4]));
        let err = tape.masked_mean(x, &[false, false], 2).unwrap_err();
        assert!(matches!(err, NumericsError::Degenerate { op: "masked_mean", .. }));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![3, 4]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_leaves_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.constant(t(&[2], &[4.0, 5.0]));
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn cosine_gradient_for_orthogonal_unit_vectors() {
        // d cos(a, b) / da = b when a, b are orthonormal.
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let b = tape.constant(t(&[1, 3], &[0.0, 0.6, 0.8]));
        let c = tape.cosine(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap().data();
        for (x, y) in ga.iter().zip([0.0, 0.6, 0.8]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_index_error_names_table() {
        let mut tape = Tape::<f32>::new();
        let table = tape.param(Tensor::zeros(vec![4, 2]));
        let err = tape.embedding(table, &[1, 4], "token_embedding").unwrap_err();
        assert!(err.to_string().contains("token_embedding"));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(tape.cross_entropy(logits, &[3], None).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 3]));
        let loss = tape.cross_entropy(logits, &[0, 2], None).unwrap();
        assert!((tape.value(loss).item().unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_with_single_token_copies_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(t(&[1, 4], &[0.1, 0.2, 0.3, 0.4]));
        let k = tape.constant(t(&[1, 4], &[0.5, -0.2, 0.3, 0.9]));
        let v = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.attention(q, k, v, &[true], 1, 2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![f32::MAX, 1.0]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { op: "scale", .. }));
    }
}
