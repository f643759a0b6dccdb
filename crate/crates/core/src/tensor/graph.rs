use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `allowed[r * cols + c]` means query `r` may see key `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    GatherRows { src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    MaskedSoftmax(Var),
    Rope { x: Var, head_dim: usize, cos: Vec<f64>, sin: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, so every op's
/// inputs precede it and a single reverse sweep is a valid backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose strided extents cover m×k, k×n and m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (k2, n) = as_matrix(self.value(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            gemm(m, k, n, (av, k as isize, 1), (bv, n as isize, 1), &mut out, 0.0);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_rows(m, n, out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (n, k2) = as_matrix(self.value(b));
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            gemm(m, k, n, (av, k as isize, 1), (bv, 1, k as isize), &mut out, 0.0);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_rows(m, n, out)?,
            Op::MatMulNt { a, b, m, k, n },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(x));
        if self.value(bias).numel() != cols {
            return Err(TensorError::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..rows {
            for (v, bb) in data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *v += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, c), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Silu(a), rg))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(x));
        if self.value(gain).numel() != cols {
            return Err(TensorError::Shape {
                op: "rms_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![0.0; rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for c in 0..cols {
                out[r * cols + c] = row[c] * inv * g[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    /// Selects rows of a matrix (duplicates allowed).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        self.gather_named("gather_rows", src, idx)
    }

    /// Row lookup into an embedding table; ids outside the table are an index error.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_named("embedding", table, ids)
    }

    fn gather_named(&mut self, op: &'static str, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(src));
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index {
                    op,
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(self.value(src).row(i));
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::from_rows(idx.len(), cols, data)?,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| TensorError::Config("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_rows(rows, cols, data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(src));
        if start + len > cols {
            return Err(TensorError::Shape {
                op: "slice_cols",
                left: self.shape(src).to_vec(),
                right: vec![start, len],
            });
        }
        let sv = self.value(src).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&sv[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::from_rows(rows, len, data)?,
            Op::SliceCols { src, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| TensorError::Config("concat_cols of nothing".into()))?;
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += self.value(p).cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_rows(rows, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(a));
        let av = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = av[r * cols + c];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_rows(cols, rows, data)?, Op::Transpose(a), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(x));
        self.masked_softmax(x, &AttentionMask::full(rows, cols))
    }

    /// Row-wise softmax where disallowed entries get probability exactly 0.
    /// A row with no allowed entry becomes all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(x));
        if mask.rows != rows || mask.cols != cols {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                left: self.shape(x).to_vec(),
                right: vec![mask.rows, mask.cols],
            });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let allow = &mask.allowed[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (v, &a) in row.iter().zip(allow) {
                if a && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for c in 0..cols {
                if allow[c] {
                    let e = (row[c] - max).exp();
                    o[c] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_rows(rows, cols, out)?, Op::MaskedSoftmax(x), rg))
    }

    /// Rotary position embedding applied independently to each `head_dim`-wide
    /// block of columns. Pair `(2i, 2i+1)` of a head rotates by
    /// `pos · theta^(-2i / head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64, head_dim: usize) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(x));
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(TensorError::Config(format!(
                "rotary embedding needs an even head dimension, got {head_dim}"
            )));
        }
        if cols % head_dim != 0 || positions.len() != rows {
            return Err(TensorError::Shape {
                op: "rope",
                left: self.shape(x).to_vec(),
                right: vec![positions.len(), head_dim],
            });
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for h in 0..cols / head_dim {
                for i in 0..half {
                    let c0 = r * cols + h * head_dim + 2 * i;
                    let (co, si) = (cos[r * half + i], sin[r * half + i]);
                    let (a, b) = (xv[c0], xv[c0 + 1]);
                    out[c0] = a * co - b * si;
                    out[c0 + 1] = a * si + b * co;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_rows(rows, cols, out)?,
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    /// Positions whose target equals `ignore_index` do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (rows, vocab) = as_matrix(self.value(logits));
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; rows * vocab];
        let mut tg = Vec::with_capacity(rows);
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..rows {
            let t = targets[r];
            if t == ignore_index {
                tg.push(None);
                continue;
            }
            if t >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    len: vocab,
                });
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut sum = 0.0;
            for (o, &v) in p.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in p.iter_mut() {
                *o /= sum;
            }
            total += -(row[t] - max - sum.ln());
            count += 1;
            tg.push(Some(t));
        }
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] returns the
    /// gradient of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(nodes, grads, $v)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    let bv = nodes[b.0].value.data();
                    let ga = acc!(a);
                    gemm(m, n, k, (dy, n as isize, 1), (bv, 1, n as isize), ga, 1.0);
                }
                if needs(b) {
                    let av = nodes[a.0].value.data();
                    let gb = acc!(b);
                    gemm(k, m, n, (av, 1, k as isize), (dy, n as isize, 1), gb, 1.0);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if needs(a) {
                    let bv = nodes[b.0].value.data();
                    let ga = acc!(a);
                    gemm(m, n, k, (dy, n as isize, 1), (bv, k as isize, 1), ga, 1.0);
                }
                if needs(b) {
                    let av = nodes[a.0].value.data();
                    let gb = acc!(b);
                    gemm(n, m, k, (dy, 1, n as isize), (av, k as isize, 1), gb, 1.0);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        let g = acc!(v);
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if needs(x) {
                    let g = acc!(x);
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if needs(bias) {
                    let cols = nodes[bias.0].value.numel();
                    let g = acc!(bias);
                    for row in dy.chunks(cols) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let bv = nodes[b.0].value.data();
                    let g = acc!(a);
                    for j in 0..g.len() {
                        g[j] += dy[j] * bv[j];
                    }
                }
                if needs(b) {
                    let av = nodes[a.0].value.data();
                    let g = acc!(b);
                    for j in 0..g.len() {
                        g[j] += dy[j] * av[j];
                    }
                }
            }
            &Op::Scale(a, c) => {
                let g = acc!(a);
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * c);
            }
            &Op::Silu(a) => {
                let av = nodes[a.0].value.data();
                let g = acc!(a);
                for j in 0..g.len() {
                    let s = 1.0 / (1.0 + (-av[j]).exp());
                    g[j] += dy[j] * s * (1.0 + av[j] * (1.0 - s));
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data();
                let cols = gv.len();
                if needs(x) {
                    let g = acc!(x);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let dr = &dy[r * cols..(r + 1) * cols];
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += dr[c] * gv[c] * xr[c] * inv;
                        }
                        dot /= cols as f64;
                        for c in 0..cols {
                            let yhat = xr[c] * inv;
                            g[r * cols + c] += inv * (dr[c] * gv[c] - yhat * dot);
                        }
                    }
                }
                if needs(gain) {
                    let g = acc!(gain);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for c in 0..cols {
                            g[c] += dy[r * cols + c] * xv[r * cols + c] * inv;
                        }
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let cols = nodes[src.0].value.cols();
                let g = acc!(*src);
                for (o, &r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        g[r * cols + c] += dy[o * cols + c];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if needs(p) {
                        let g = acc!(p);
                        g.iter_mut().zip(&dy[off..off + n]).for_each(|(g, d)| *g += d);
                    }
                    off += n;
                }
            }
            &Op::SliceCols { src, start } => {
                let cols = nodes[src.0].value.cols();
                let len = nodes[i].value.cols();
                let g = acc!(src);
                for (r, row) in dy.chunks(len).enumerate() {
                    for c in 0..len {
                        g[r * cols + start + c] += row[c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if needs(p) {
                        let g = acc!(p);
                        for (r, row) in g.chunks_mut(c).enumerate() {
                            for j in 0..c {
                                row[j] += dy[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            &Op::Transpose(a) => {
                let (rows, cols) = as_matrix(&nodes[a.0].value);
                let g = acc!(a);
                for r in 0..rows {
                    for c in 0..cols {
                        g[r * cols + c] += dy[c * rows + r];
                    }
                }
            }
            &Op::MaskedSoftmax(x) => {
                let y = nodes[i].value.data();
                let cols = nodes[i].value.cols();
                let g = acc!(x);
                for r in 0..nodes[i].value.rows() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dr = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        g[r * cols + c] += yr[c] * (dr[c] - dot);
                    }
                }
            }
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            } => {
                let cols = nodes[i].value.cols();
                let half = head_dim / 2;
                let g = acc!(*x);
                for r in 0..nodes[i].value.rows() {
                    for h in 0..cols / head_dim {
                        for k in 0..half {
                            let c0 = r * cols + h * head_dim + 2 * k;
                            let (co, si) = (cos[r * half + k], sin[r * half + k]);
                            let (d0, d1) = (dy[c0], dy[c0 + 1]);
                            g[c0] += d0 * co + d1 * si;
                            g[c0 + 1] += -d0 * si + d1 * co;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = nodes[logits.0].value.cols();
                let scale = dy[0] / *count as f64;
                let g = acc!(*logits);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for c in 0..vocab {
                            g[r * vocab + c] += probs[r * vocab + c] * scale;
                        }
                        g[r * vocab + t] -= scale;
                    }
                }
            }
            &Op::Sum(a) => {
                let g = acc!(a);
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
            &Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                let g = acc!(a);
                g.iter_mut().for_each(|g| *g += dy[0] / n);
            }
        }
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}
