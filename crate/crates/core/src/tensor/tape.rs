use super::{matmul_raw, matmul_t_raw, t_matmul_raw, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
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
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order, which is a topological order by
/// construction: an operation can only reference values already on the tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not
    /// influence the loss or was not tracked.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(TensorError::Contract(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )))
    }
}

fn require_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    match t.data().iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(TensorError::Numeric {
            op,
            detail: format!("input[{i}] = {}", t.data()[i]),
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v` as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul_t", ta)?;
        require_matrix("matmul_t", tb)?;
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let data = matmul_t_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        require_matrix("transpose", ta)?;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds the `1 × n` row `r` to every row of the `m × n` matrix `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(r));
        require_matrix("add_row", ta)?;
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % n])
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, r]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, r), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| x * s).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Elementwise `max(0, x)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| if *x > 0.0 { *x } else { 0.0 }).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        require_matrix("softmax_rows", ta)?;
        require_finite("softmax_rows", ta)?;
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise `(x − μ)/√(σ² + eps)·γ + β` with the population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        require_matrix("layer_norm", tx)?;
        require_finite("layer_norm", tx)?;
        let n = tx.cols();
        if tg.numel() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != n {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let m = tx.rows();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        require_matrix("slice_cols", ta)?;
        let (m, n) = (ta.rows(), ta.cols());
        if len == 0 || start + len > n {
            return Err(TensorError::Contract(format!(
                "slice_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&ta.data()[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        require_matrix("slice_rows", ta)?;
        let (m, n) = (ta.rows(), ta.cols());
        if len == 0 || start + len > m {
            return Err(TensorError::Contract(format!(
                "slice_rows {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let data = ta.data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(len, n, data)?, Op::SliceRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let m = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            require_matrix("concat_cols", t)?;
            if t.rows() != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            require_matrix("concat_rows", t)?;
            if t.cols() != n {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, n, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Scales each row to unit Euclidean norm; an all-zero row is an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        require_matrix("normalize_rows", ta)?;
        require_finite("normalize_rows", ta)?;
        let n = ta.cols();
        let mut norms = Vec::with_capacity(ta.rows());
        let mut data = ta.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::Numeric {
                    op: "normalize_rows",
                    detail: format!("row {r} has zero norm"),
                });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::NormalizeRows(a, norms), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Mean over rows of `−ln softmax(logits[i, k≠i])[targets[i]]`.
    ///
    /// The diagonal entry of each row is excluded from the normalization,
    /// which is the contrastive setting where an example is never its own
    /// candidate. Rows are stabilized by subtracting their off-diagonal max.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        require_matrix("masked_cross_entropy", tl)?;
        require_finite("masked_cross_entropy", tl)?;
        let (m, n) = (tl.rows(), tl.cols());
        if m != n {
            return Err(TensorError::Contract(format!(
                "masked_cross_entropy needs square logits, got {:?}",
                tl.shape()
            )));
        }
        if targets.len() != m {
            return Err(TensorError::Contract(format!("{} targets for {m} rows", targets.len())));
        }
        if n < 2 {
            return Err(TensorError::Contract("need at least two candidates per row".into()));
        }
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n || t == i {
                return Err(TensorError::Contract(format!("row {i} has invalid target {t}")));
            }
            let row = tl.row_slice(i);
            let max = row
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    let e = (row[k] - max).exp();
                    probs[i * n + k] = e;
                    denom += e;
                }
            }
            for k in 0..n {
                probs[i * n + k] /= denom;
            }
            total += denom.ln() + max - row[t];
        }
        let loss = total / m as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: &[f64]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => {
                    for (b, d) in buf.iter_mut().zip(delta) {
                        *b += d;
                    }
                }
                slot @ None => *slot = Some(delta.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].requires_grad {
                    acc(*a, &matmul_t_raw(g, tb.data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, &t_matmul_raw(ta.data(), g, m, k, n));
                }
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.nodes[a.0].requires_grad {
                    acc(*a, &matmul_raw(g, tb.data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, &t_matmul_raw(g, ta.data(), m, n, k));
                }
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                acc(*a, &d);
            }
            Op::Add(a, b) => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::AddRow(a, r) => {
                acc(*a, g);
                let n = self.value(*r).cols();
                let mut d = vec![0.0; n];
                for row in g.chunks(n) {
                    for (x, y) in d.iter_mut().zip(row) {
                        *x += y;
                    }
                }
                acc(*r, &d);
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|x| x * s).collect();
                acc(*a, &d);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d: Vec<f64> = g
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*a, &d);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        drow[k] = yrow[k] * (grow[k] - dot);
                    }
                }
                acc(*a, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let tg = self.value(*gamma).data();
                if self.nodes[x.0].requires_grad {
                    let mut d = vec![0.0; xhat.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            let dh = gr[c] * tg[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        for c in 0..n {
                            let dh = gr[c] * tg[c];
                            d[r * n + c] = rs / n as f64 * (n as f64 * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    acc(*x, &d);
                }
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        dg[c] += grow[c] * hrow[c];
                        db[c] += grow[c];
                    }
                }
                acc(*gamma, &dg);
                acc(*beta, &db);
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let len = node.value.cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*a, &d);
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut d = vec![0.0; ta.numel()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                acc(*a, &d);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(*p, &d);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    acc(*p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::NormalizeRows(a, norms) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                acc(*a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).numel()];
                acc(*a, &d);
            }
            Op::MaskedCrossEntropy { logits, targets, probs } => {
                let n = self.value(*logits).cols();
                let m = targets.len();
                let scale = g[0] / m as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * n + t] -= scale;
                }
                acc(*logits, &d);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(Tensor::identity(2));
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ones = tape.constant(m(2, 1, &[1.0, 1.0]));
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(m(3, 2, &[0.0, 0.0, 1.0f64.ln(), 3.0f64.ln(), 1000.0, 1000.0]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 0.25).abs() < 1e-15 && (v[3] - 0.75).abs() < 1e-15);
        assert_eq!(&v[4..6], &[0.5, 0.5]);
        for row in v.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(m(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax_rows(x), Err(TensorError::Numeric { .. })));
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(m(2, 2, &[5.0, 5.0, -1.0, 1.0]));
        let g = tape.constant(Tensor::row(&[1.0, 1.0]));
        let b0 = tape.constant(Tensor::row(&[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b0, 1e-5).unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(&v[0..2], &[0.0, 0.0]);
        // var = 1, so the output is ±1/√(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[2] + expect).abs() < 1e-15 && (v[3] - expect).abs() < 1e-15);
        assert!((v[3] - 1.0).abs() < 1e-5);
        let b2 = tape.constant(Tensor::row(&[2.0, 2.0]));
        let y2 = tape.layer_norm(x, g, b2, 1e-5).unwrap();
        for (a, b) in tape.value(y2).data().iter().zip(&v) {
            assert_eq!(*a, b + 2.0);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_product() {
        // loss = Σ (A·B): dA[i][k] = Σ_j B[k][j], dB[k][j] = Σ_i A[i][k]
        let mut tape = Tape::new();
        let a = tape.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(m(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.get(b).data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn detached_and_unused_inputs_get_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(1, 2, &[1.0, 2.0]));
        let unused = tape.leaf(m(1, 2, &[3.0, 4.0]));
        let d = tape.detach(a);
        let both = tape.add(a, d).unwrap();
        let s = tape.sum(both);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[1.0, 1.0]);
        assert_eq!(g.get(d).data(), &[0.0, 0.0]);
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(TensorError::Contract(_))));
    }

    #[test]
    fn normalize_rows_rejects_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(m(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert!(tape.normalize_rows(a).is_err());
    }
}
