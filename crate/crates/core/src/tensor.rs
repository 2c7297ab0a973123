//! Dense 64-bit tensors with a define-by-run reverse-mode tape.
//!
//! Values live on a [`Tape`] and are addressed by [`Var`] handles. A tape is
//! built fresh for every forward pass; [`Tape::backward`] walks it in reverse
//! and returns a [`Gradients`] table indexed by the same handles.
//!
//! Binary elementwise ops broadcast their right operand: its element count
//! must divide the left operand's and its shape must be a suffix of the left
//! shape (or a single element). This covers scalar gates, per-column masks
//! and per-row gains, which is all the transformer needs.

use thiserror::Error;

mod adam;
mod gemm;

pub use adam::{AdamConfig, AdamState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor shape {shape:?} does not match data length {len}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("{op}: empty rows")]
    EmptyRows { op: &'static str },
    #[error("token id {id} out of range for table with {rows} rows")]
    TokenOutOfRange { id: usize, rows: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross entropy has no scored positions")]
    NoTargets,
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A standalone dense tensor, used for parameters and results that outlive a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(vec![1], value)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "set_grad",
                left: self.shape.clone(),
                right: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp01(Var),
    Sum(Var),
    SelectRow(Var, usize),
    RepeatEach(Var, usize),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
        denom: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended as ops run, so
/// every node's inputs precede it.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(shape, value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push_checked("leaf", t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push_checked("param", t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(TensorError::BadShape {
                shape,
                len: data.len(),
            });
        }
        self.push_checked("constant", shape, data, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (rows, k, cols) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; rows * cols];
        gemm::gemm(
            rows,
            k,
            cols,
            1.0,
            gemm::View::row_major(self.value(a), 0, k),
            gemm::View::row_major(self.value(b), 0, cols),
            0.0,
            gemm::ViewMut::row_major(&mut out, 0, cols),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", vec![rows, cols], out, Op::MatMul(a, b), rg)
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb = numel(sb);
        let ok = nb == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !ok || nb == 0 {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_broadcast(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let nb = vb.len();
        let out: Vec<f64> = va
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % nb]))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(name, shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push_checked(name, shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_const", a, |x| x + c, Op::AddConst(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::LogDomain(bad));
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn clamp01(&mut self, a: Var) -> Result<Var> {
        self.unary("clamp01", a, clamp01, Op::Clamp01(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum", vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Row `i` of a 2-D tensor, or element `i` (as shape `[1]`) of a vector.
    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = match shape.as_slice() {
            [r] => (*r, 1),
            [r, c] => (*r, *c),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "select_row",
                    left: shape,
                    right: vec![i],
                })
            }
        };
        if i >= rows {
            return Err(TensorError::ShapeMismatch {
                op: "select_row",
                left: shape,
                right: vec![i],
            });
        }
        let out = self.value(a)[i * cols..(i + 1) * cols].to_vec();
        let rg = self.rg(a);
        self.push(vec![cols], out, Op::SelectRow(a, i), rg);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Repeats each element of a vector `k` times: `[a, b]` -> `[a, a, b, b]` for `k = 2`.
    pub fn repeat_each(&mut self, a: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(TensorError::Invalid("repeat_each with k = 0".into()));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .flat_map(|&x| std::iter::repeat(x).take(k))
            .collect();
        let n = out.len();
        let rg = self.rg(a);
        Ok(self.push(vec![n], out, Op::RepeatEach(a, k), rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if cols == 0 {
            return Err(TensorError::EmptyRows { op: "softmax_rows" });
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push_checked("softmax_rows", shape, out, Op::SoftmaxRows(a), rg)
    }

    /// RMS normalisation over the last dimension followed by a per-column gain.
    ///
    /// `denom` is the number of entries the mean square is taken over. It equals
    /// the row width for a plain model; a hidden-masked model passes the number of
    /// live hidden dimensions, so zeroed columns do not dilute the statistic.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64, denom: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if cols == 0 {
            return Err(TensorError::EmptyRows { op: "rms_norm" });
        }
        if self.shape(gain) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                left: shape,
                right: self.shape(gain).to_vec(),
            });
        }
        if denom == 0 {
            return Err(TensorError::Invalid("rms_norm denominator is zero".into()));
        }
        let denom = denom as f64;
        let g = self.value(gain);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(xv.len() / cols);
        for (row, o) in xv.chunks(cols).zip(out.chunks_mut(cols)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / denom;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for j in 0..cols {
                o[j] = row[j] * r * g[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        self.push_checked(
            "rms_norm",
            shape,
            out,
            Op::RmsNorm {
                x,
                gain,
                inv_rms,
                denom,
            },
            rg,
        )
    }

    /// Gathers rows of `table` (shape `[rows, width]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                left: shape,
                right: vec![],
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::TokenOutOfRange { id, rows });
            }
            out.extend_from_slice(&tv[id * width..(id + 1) * width]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), width],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Positions with `None` targets are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len()],
            });
        }
        let vocab = shape[1];
        if vocab == 0 {
            return Err(TensorError::EmptyRows { op: "cross_entropy" });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, t) in probs.chunks_mut(vocab).zip(targets) {
            let lse = log_sum_exp(row);
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(TensorError::TokenOutOfRange { id: t, rows: vocab });
                }
                total += lse - row[t];
                count += 1;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        if count == 0 {
            return Err(TensorError::NoTargets);
        }
        let loss = total / count as f64;
        let rg = self.rg(logits);
        self.push_checked(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[n, heads * head_dim]` with `n` a multiple of
    /// `seq_len`; each block of `seq_len` rows is an independent sequence.
    /// Output has the same layout, head `h` occupying columns
    /// `h * head_dim .. (h + 1) * head_dim`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice()
        {
            return Err(TensorError::ShapeMismatch {
                op: "causal_attention",
                left: shape,
                right: self.shape(k).to_vec(),
            });
        }
        let (n, width) = (shape[0], shape[1]);
        if heads == 0 || width % heads != 0 || seq_len == 0 || n % seq_len != 0 {
            return Err(TensorError::Invalid(format!(
                "causal_attention: width {width}, heads {heads}, rows {n}, seq_len {seq_len}"
            )));
        }
        let hd = width / heads;
        let t = seq_len;
        let scale = 1.0 / (hd as f64).sqrt();
        let nseq = n / t;
        let mut probs = vec![0.0; nseq * heads * t * t];
        let mut out = vec![0.0; n * width];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for s in 0..nseq {
            for h in 0..heads {
                let off = s * t * width + h * hd;
                let p = &mut probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                gemm::gemm(
                    t,
                    hd,
                    t,
                    scale,
                    gemm::View::new(qv, off, width, 1),
                    gemm::View::new(kv, off, 1, width),
                    0.0,
                    gemm::ViewMut::row_major(p, 0, t),
                );
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    softmax_in_place(&mut row[..=i]);
                    for x in &mut row[i + 1..] {
                        *x = 0.0;
                    }
                }
                gemm::gemm(
                    t,
                    t,
                    hd,
                    1.0,
                    gemm::View::row_major(p, 0, t),
                    gemm::View::new(vv, off, width, 1),
                    0.0,
                    gemm::ViewMut::new(&mut out, off, width, 1),
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push_checked(
            "causal_attention",
            shape,
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! slot {
            ($v:expr) => {
                self.slot($v, grads)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (rows, k, cols) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = slot!(*a) {
                    gemm::gemm(
                        rows,
                        cols,
                        k,
                        1.0,
                        gemm::View::row_major(g, 0, cols),
                        gemm::View::new(self.value(*b), 0, 1, cols),
                        1.0,
                        gemm::ViewMut::row_major(ga, 0, k),
                    );
                }
                if let Some(gb) = slot!(*b) {
                    gemm::gemm(
                        k,
                        rows,
                        cols,
                        1.0,
                        gemm::View::new(self.value(*a), 0, 1, k),
                        gemm::View::row_major(g, 0, cols),
                        1.0,
                        gemm::ViewMut::row_major(gb, 0, cols),
                    );
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = slot!(*a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    let nb = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let nb = vb.len();
                if let Some(ga) = slot!(*a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * vb[i % nb];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += y * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = slot!(*a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(&node.value) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((x, y), e) in ga.iter_mut().zip(g).zip(&node.value) {
                        *x += y * e;
                    }
                }
            }
            Op::Log(a) => {
                let va = self.value(*a);
                if let Some(ga) = slot!(*a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(va) {
                        *x += y / v;
                    }
                }
            }
            Op::Clamp01(a) => {
                let va = self.value(*a);
                if let Some(ga) = slot!(*a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 && *v < 1.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::SelectRow(a, i) => {
                if let Some(ga) = slot!(*a) {
                    let cols = g.len();
                    for (x, y) in ga[i * cols..(i + 1) * cols].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::RepeatEach(a, k) => {
                if let Some(ga) = slot!(*a) {
                    for (x, chunk) in ga.iter_mut().zip(g.chunks(*k)) {
                        *x += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = slot!(*a) {
                    let cols = *node.shape.last().unwrap();
                    for ((gx, gy), p) in ga
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(node.value.chunks(cols))
                    {
                        let dot: f64 = gy.iter().zip(p).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[j] += p[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm {
                x,
                gain,
                inv_rms,
                denom,
            } => {
                let cols = *node.shape.last().unwrap();
                let xv = self.value(*x);
                let gv = self.value(*gain);
                if let Some(gg) = slot!(*gain) {
                    for ((row, gy), r) in xv.chunks(cols).zip(g.chunks(cols)).zip(inv_rms) {
                        for j in 0..cols {
                            gg[j] += gy[j] * row[j] * r;
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    for (((row, gy), r), out) in xv
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(inv_rms)
                        .zip(gx.chunks_mut(cols))
                    {
                        let dot: f64 = (0..cols).map(|j| gy[j] * gv[j] * row[j]).sum();
                        let c = r * r * r * dot / denom;
                        for j in 0..cols {
                            out[j] += gy[j] * gv[j] * r - row[j] * c;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot!(*table) {
                    let width = node.shape[1];
                    for (row, &id) in g.chunks(width).zip(ids) {
                        for (x, y) in gt[id * width..(id + 1) * width].iter_mut().zip(row) {
                            *x += y;
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
                if let Some(gl) = slot!(*logits) {
                    let vocab = self.shape(*logits)[1];
                    let c = g[0] / *count as f64;
                    for ((gx, p), t) in gl.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                        if let Some(t) = *t {
                            for j in 0..vocab {
                                gx[j] += c * p[j];
                            }
                            gx[t] -= c;
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let width = node.shape[1];
                let n = node.shape[0];
                let (heads, t) = (*heads, *seq_len);
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; n * width];
                let mut dk = vec![0.0; n * width];
                let mut dvv = vec![0.0; n * width];
                let mut dp = vec![0.0; t * t];
                for s in 0..n / t {
                    for h in 0..heads {
                        let off = s * t * width + h * hd;
                        let p = &probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                        // dP = dO V^T
                        gemm::gemm(
                            t,
                            hd,
                            t,
                            1.0,
                            gemm::View::new(g, off, width, 1),
                            gemm::View::new(vv, off, 1, width),
                            0.0,
                            gemm::ViewMut::row_major(&mut dp, 0, t),
                        );
                        // dV += P^T dO
                        gemm::gemm(
                            t,
                            t,
                            hd,
                            1.0,
                            gemm::View::new(p, 0, 1, t),
                            gemm::View::new(g, off, width, 1),
                            1.0,
                            gemm::ViewMut::new(&mut dvv, off, width, 1),
                        );
                        // dS = P * (dP - rowsum(dP * P))
                        for i in 0..t {
                            let pr = &p[i * t..(i + 1) * t];
                            let dr = &mut dp[i * t..(i + 1) * t];
                            let dot: f64 = (0..=i).map(|j| pr[j] * dr[j]).sum();
                            for j in 0..t {
                                dr[j] = if j <= i { pr[j] * (dr[j] - dot) } else { 0.0 };
                            }
                        }
                        gemm::gemm(
                            t,
                            t,
                            hd,
                            scale,
                            gemm::View::row_major(&dp, 0, t),
                            gemm::View::new(kv, off, width, 1),
                            1.0,
                            gemm::ViewMut::new(&mut dq, off, width, 1),
                        );
                        gemm::gemm(
                            t,
                            t,
                            hd,
                            scale,
                            gemm::View::new(&dp, 0, 1, t),
                            gemm::View::new(qv, off, width, 1),
                            1.0,
                            gemm::ViewMut::new(&mut dk, off, width, 1),
                        );
                    }
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dvv)] {
                    if let Some(slot) = slot!(var) {
                        for (x, y) in slot.iter_mut().zip(&d) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` with unreachable values reported as zeros of length `len`.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    /// Moves the gradient of `v` into `t.grad`.
    pub fn write_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self.get_or_zeros(v, t.len());
        t.set_grad(g)
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

pub fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests;
