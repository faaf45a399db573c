use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation tag plus whatever the backward rule needs from the forward pass.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// `a·b`, or `a·bᵀ` when `trans_b`.
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale·x + shift`
    Affine { x: Var, scale: f64, shift: f64 },
    /// Elementwise product with a constant of the same length.
    MulConst { x: Var, factors: Vec<f64> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Sum(Var),
    Product(Var),
    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    AddBias { x: Var, bias: Var },
    /// Scales column `j` of an `m×n` matrix by the constant `factors[j]`.
    MulCols { x: Var, factors: Vec<f64> },
    SliceCols { x: Var, start: usize, len: usize },
    SliceRows { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Im2col { x: Var, geom: ConvGeometry, batch: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    /// Mean cross-entropy of row-wise softmax against integer labels.
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    /// `Σ_j z_j·ln(s_j·σ(a_j)) + (1−z_j)·ln(1 − s_j·σ(a_j))` over logits `a`.
    BernoulliLogProb { logits: Var, mask: Vec<f64>, scale: Vec<f64> },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::MulConst { .. } => "mul_const",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Ln(_) => "ln",
            Op::Sum(_) => "sum",
            Op::Product(_) => "product",
            Op::AddBias { .. } => "add_bias",
            Op::MulCols { .. } => "mul_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Reshape(_) => "reshape",
            Op::Im2col { .. } => "im2col",
            Op::MaxPool { .. } => "max_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BernoulliLogProb { .. } => "bernoulli_log_prob",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Affine { x, .. }
            | Op::MulConst { x, .. }
            | Op::MulCols { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Im2col { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Ln(x)
            | Op::Sum(x)
            | Op::Product(x)
            | Op::Reshape(x)
            | Op::SoftmaxCrossEntropy { logits: x, .. }
            | Op::BernoulliLogProb { logits: x, .. } => vec![*x],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
///
/// Every op's inputs are created before the op itself, so node order is a
/// topological order and [`Tape::backward`] can walk it back to front.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_requires_grad(false), false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_requires_grad(true), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let rg = op.inputs().iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(op, value, rg))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        self.record(Op::MatMul { a, b, trans_b }, vec![m, n], out)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op.kind(), self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(op, shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(op, shape, data)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn scale(&mut self, x: Var, by: f64) -> Result<Var> {
        self.affine(x, by, 0.0)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, Op::Affine { x, scale, shift }, |v| scale * v + shift)
    }

    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", self.shape(x), &[factors.len()]));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(v, f)| v * f)
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::MulConst { x, factors }, shape, data)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.record(Op::Sum(x), vec![1], vec![s])
    }

    pub fn product(&mut self, x: Var) -> Result<Var> {
        let p = self.value(x).data().iter().product();
        self.record(Op::Product(x), vec![1], vec![p])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).len() != n {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        self.record(Op::AddBias { x, bias }, vec![m, n], data)
    }

    /// `x·diag(factors)` for an `m×n` matrix `x`.
    pub fn mul_cols(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if factors.len() != n {
            return Err(Error::dim("mul_cols", self.shape(x), &[factors.len()]));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(&factors).for_each(|(v, f)| *v *= f);
        }
        self.record(Op::MulCols { x, factors }, vec![m, n], data)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let data = (0..m)
            .flat_map(|r| src[r * n + start..r * n + start + len].iter().copied())
            .collect();
        self.record(Op::SliceCols { x, start, len }, vec![m, len], data)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.record(Op::SliceRows { x, start, len }, vec![len, n], data)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.record(Op::ConcatCols(parts.to_vec()), vec![m, n], data)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let data = self.value(x).data().to_vec();
        self.record(Op::Reshape(x), shape, data)
    }

    /// Patch matrix of a `[batch, h, w, c]` (or single `[h, w, c]`) input.
    pub fn im2col(&mut self, x: Var, kernel_h: usize, kernel_w: usize, stride: usize) -> Result<Var> {
        let (batch, h, w, c) = match *self.shape(x) {
            [b, h, w, c] => (b, h, w, c),
            [h, w, c] => (1, h, w, c),
            _ => return Err(Error::dim("im2col", self.shape(x), &[kernel_h, kernel_w])),
        };
        let geom = ConvGeometry {
            in_h: h,
            in_w: w,
            in_c: c,
            kernel_h,
            kernel_w,
            stride,
        };
        geom.validate()?;
        let data = kernels::im2col(self.value(x).data(), batch, &geom);
        let shape = vec![batch * geom.patches(), geom.patch_len()];
        self.record(Op::Im2col { x, geom, batch }, shape, data)
    }

    /// 2×2 stride-2 max pooling of a `[batch, h, w, c]` tensor.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, h, w, c] = *self.shape(x) else {
            return Err(Error::dim("max_pool", self.shape(x), &[2, 2]));
        };
        if h < 2 || w < 2 {
            return Err(Error::dim("max_pool", self.shape(x), &[2, 2]));
        }
        let (data, argmax) = kernels::max_pool2(self.value(x).data(), b, h, w, c);
        self.record(Op::MaxPool { x, argmax }, vec![b, h / 2, w / 2, c], data)
    }

    /// Mean softmax cross-entropy of `batch×classes` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, k) = self.dims2(logits)?;
        if labels.len() != m {
            return Err(Error::dim("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; m * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[label];
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.record(op, vec![1], vec![loss / m as f64])
    }

    /// Log-pmf of a binary `mask` under independent Bernoulli units whose
    /// success probabilities are `scale ⊙ sigmoid(logits)`.
    pub fn bernoulli_log_prob(&mut self, logits: Var, mask: Vec<f64>, scale: Vec<f64>) -> Result<Var> {
        let n = self.value(logits).len();
        if mask.len() != n || scale.len() != n {
            return Err(Error::dim("bernoulli_log_prob", self.shape(logits), &[mask.len(), scale.len()]));
        }
        if scale.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Contract("probability scale must lie in (0, 1]".into()));
        }
        let lp = self
            .value(logits)
            .data()
            .iter()
            .zip(mask.iter().zip(&scale))
            .map(|(&a, (&z, &s))| bernoulli_log_pmf(a, z, s))
            .sum();
        self.record(Op::BernoulliLogProb { logits, mask, scale }, vec![1], vec![lp])
    }

    /// Populates gradients of the scalar `loss` with respect to every
    /// recorded value that requires them. Reuse of a value sums its
    /// contributions. Previous gradients on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Tape { nodes, grads } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let n = &nodes[v.0];
                if n.requires_grad {
                    let len = n.value.len();
                    f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b, trans_b } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = out.shape()[1];
                    // y = a·op(b):  da = g·op(b)ᵀ
                    acc(*a, &mut |da| {
                        kernels::gemm(m, n, k, &g, false, bv.data(), !trans_b, da, true)
                    });
                    if *trans_b {
                        // y = a·bᵀ, b is n×k:  db = gᵀ·a
                        acc(*b, &mut |db| {
                            kernels::gemm(n, m, k, &g, true, av.data(), false, db, true)
                        });
                    } else {
                        // db = aᵀ·g
                        acc(*b, &mut |db| {
                            kernels::gemm(k, m, n, av.data(), true, &g, false, db, true)
                        });
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g));
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(*a, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * bv[j];
                        }
                    });
                    acc(*b, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * av[j];
                        }
                    });
                }
                Op::Affine { x, scale, .. } => {
                    acc(*x, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += scale * g));
                }
                Op::MulConst { x, factors } => {
                    acc(*x, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * factors[j];
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let s = out.data();
                    acc(*x, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * s[j] * (1.0 - s[j]);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let t = out.data();
                    acc(*x, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * (1.0 - t[j] * t[j]);
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(*x, &mut |d| {
                        for j in 0..d.len() {
                            if xv[j] > 0.0 {
                                d[j] += g[j];
                            }
                        }
                    });
                }
                Op::Ln(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(*x, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] / xv[j];
                        }
                    });
                }
                Op::Sum(x) => {
                    acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::Product(x) => {
                    let xv = nodes[x.0].value.data();
                    // prefix/suffix products avoid dividing by zero entries
                    let n = xv.len();
                    let mut prefix = vec![1.0; n + 1];
                    for j in 0..n {
                        prefix[j + 1] = prefix[j] * xv[j];
                    }
                    acc(*x, &mut |d| {
                        let mut suffix = 1.0;
                        for j in (0..n).rev() {
                            d[j] += g[0] * prefix[j] * suffix;
                            suffix *= xv[j];
                        }
                    });
                }
                Op::AddBias { x, bias } => {
                    let n = out.shape()[1];
                    acc(*x, &mut |d| add_into(d, &g));
                    acc(*bias, &mut |d| {
                        for row in g.chunks_exact(n) {
                            add_into(d, row);
                        }
                    });
                }
                Op::MulCols { x, factors } => {
                    let n = factors.len();
                    acc(*x, &mut |d| {
                        for (drow, grow) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                            for j in 0..n {
                                drow[j] += grow[j] * factors[j];
                            }
                        }
                    });
                }
                Op::SliceCols { x, start, len } => {
                    let n = nodes[x.0].value.shape()[1];
                    acc(*x, &mut |d| {
                        for (r, grow) in g.chunks_exact(*len).enumerate() {
                            add_into(&mut d[r * n + start..r * n + start + len], grow);
                        }
                    });
                }
                Op::SliceRows { x, start, .. } => {
                    let n = out.shape()[1];
                    acc(*x, &mut |d| add_into(&mut d[start * n..start * n + g.len()], &g));
                }
                Op::ConcatCols(parts) => {
                    let n = out.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        acc(p, &mut |d| {
                            for (r, drow) in d.chunks_exact_mut(w).enumerate() {
                                add_into(drow, &g[r * n + offset..r * n + offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Reshape(x) => {
                    acc(*x, &mut |d| add_into(d, &g));
                }
                Op::Im2col { x, geom, batch } => {
                    acc(*x, &mut |d| kernels::col2im_accumulate(&g, *batch, geom, d));
                }
                Op::MaxPool { x, argmax } => {
                    acc(*x, &mut |d| {
                        for (gv, &src) in g.iter().zip(argmax) {
                            d[src] += gv;
                        }
                    });
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let m = labels.len();
                    let k = probs.len() / m;
                    let s = g[0] / m as f64;
                    acc(*logits, &mut |d| {
                        for (r, &label) in labels.iter().enumerate() {
                            for c in 0..k {
                                let onehot = if c == label { 1.0 } else { 0.0 };
                                d[r * k + c] += s * (probs[r * k + c] - onehot);
                            }
                        }
                    });
                }
                Op::BernoulliLogProb {
                    logits,
                    mask,
                    scale,
                } => {
                    let a = nodes[logits.0].value.data();
                    acc(*logits, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += g[0] * bernoulli_log_pmf_grad(a[j], mask[j], scale[j]);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `ln P(z)` for `z ~ Bernoulli(s·σ(a))`.
fn bernoulli_log_pmf(a: f64, z: f64, s: f64) -> f64 {
    if s == 1.0 {
        // ln σ(a) = −softplus(−a),  ln(1 − σ(a)) = −softplus(a)
        -z * kernels::softplus(-a) - (1.0 - z) * kernels::softplus(a)
    } else {
        let p = kernels::sigmoid(a);
        z * (s.ln() - kernels::softplus(-a)) + (1.0 - z) * (-s * p).ln_1p()
    }
}

fn bernoulli_log_pmf_grad(a: f64, z: f64, s: f64) -> f64 {
    let p = kernels::sigmoid(a);
    if s == 1.0 {
        z - p
    } else {
        z * (1.0 - p) - (1.0 - z) * s * p * (1.0 - p) / (1.0 - s * p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(t(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0]]));
        let b = tape.constant(t(&[vec![3.0], vec![4.0]]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(zero).unwrap();
        let th = tape.tanh(zero).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(th).data(), &[0.0]);

        let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0, 2.0]));
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 2.0, 6.0]);

        let short = tape.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(tape.add(a, short), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2, 3]));
        let l = tape.sum(w).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_accumulates_over_reuse() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(c, w).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_extremes() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 4]));
        let l = tape.softmax_cross_entropy(uniform, &[0, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let sharp = tape.constant(t(&[vec![800.0, 0.0, 0.0]]));
        let l = tape.softmax_cross_entropy(sharp, &[0]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        assert!(matches!(
            tape.softmax_cross_entropy(sharp, &[3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn bernoulli_log_prob_matches_direct_formula() {
        let logits = vec![-1.3, 0.2, 2.5];
        let mask = vec![1.0, 0.0, 1.0];
        let scale = vec![1.0, 0.5, 0.5];
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(logits.clone()));
        let lp = tape.bernoulli_log_prob(a, mask.clone(), scale.clone()).unwrap();
        let want: f64 = (0..3)
            .map(|j| {
                let p = scale[j] * kernels::sigmoid(logits[j]);
                if mask[j] == 1.0 {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            })
            .sum();
        assert!((tape.value(lp).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn ops_are_recorded_in_topological_order() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = tape.param(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sigmoid(y).unwrap();
        for v in [y, s] {
            assert!(tape.op(v).inputs().iter().all(|i| i.id() < v.id()));
        }
        assert_eq!(tape.op(y).kind(), "matmul");
    }
}
