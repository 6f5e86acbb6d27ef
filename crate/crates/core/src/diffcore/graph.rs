//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Nodes are appended in evaluation order, so the tape
//! is already topologically sorted and [`Graph::backward`] walks it once in
//! reverse.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axes a pooling op reduces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Reduce over all cells, one value per channel: `[.., C] -> [1, C]`.
    Spatial,
    /// Reduce over channels, one value per cell: `[.., C] -> [.., 1]`.
    Channel,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Reshape(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, offset: usize },
    SliceCols { x: Var, start: usize, cols: usize },
    Gather { table: Var, idx: Vec<usize> },
    Relu(Var),
    Elu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Dropout { x: Var, mask: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Conv2d { x: Var, kernel: Var, geom: ConvGeom },
    PdcFold { w: Var, taps: Vec<(usize, Option<usize>)>, cout: usize, cin: usize, kk: usize },
    PoolAvg { x: Var, axis: PoolAxis },
    PoolMax { x: Var, argmax: Vec<usize> },
    Softmax(Var),
    PairBilinear { q: Var, k: Var, n: usize, heads: usize, dh: usize, scale: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather_rows",
            Op::Relu(..) => "relu",
            Op::Elu(..) => "elu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Dropout { .. } => "dropout",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::PdcFold { .. } => "pdc_fold",
            Op::PoolAvg { .. } => "avg_pool",
            Op::PoolMax { .. } => "max_pool",
            Op::Softmax(..) => "softmax",
            Op::PairBilinear { .. } => "pair_bilinear",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    track_branches: bool,
    branch_hash: u64,
    check_finite: bool,
    first_nonfinite: Option<&'static str>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track_branches: false,
            branch_hash: FNV_OFFSET,
            check_finite: false,
            first_nonfinite: None,
        }
    }

    /// Graph that fingerprints every branch taken by non-smooth ops and
    /// records the first op that produced a non-finite value. Used by
    /// gradient checking.
    pub fn instrumented() -> Self {
        Graph {
            track_branches: true,
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of the branch pattern (ReLU/ELU sides, pooling argmaxes).
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    pub fn first_nonfinite(&self) -> Option<&'static str> {
        self.first_nonfinite
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shapes are valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len(), "{}", op.name());
        if self.check_finite && self.first_nonfinite.is_none() && data.iter().any(|v| !v.is_finite()) {
            self.first_nonfinite = Some(op.name());
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn mix_branch(&mut self, bits: impl Iterator<Item = u64>) {
        let mut h = self.branch_hash;
        for b in bits {
            h ^= b;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.branch_hash = h;
    }

    /// Inserts a leaf. Gradients flow into it when `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Inserts a trainable `f32` parameter, converting to the graph scalar.
    pub fn param(&mut self, t: &Tensor<f32>) -> Var {
        let data = t.data().iter().map(|&v| T::of(v as f64)).collect();
        self.push(t.shape().to_vec(), data, Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap_or(&1)
    }

    fn binary_same(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Vec<usize>, bool)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok((sa.clone(), self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary_same(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(shape, data, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary_same(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(shape, data, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary_same(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(shape, data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, data, Op::Scale(a, s), rg)
    }

    fn row_broadcast_check(&self, x: Var, r: Var, op: &'static str) -> Result<usize> {
        let c = self.last_dim(x);
        if self.value(r).len() != c {
            return Err(Error::shape(op, self.shape(x), self.shape(r)));
        }
        Ok(c)
    }

    /// `x[.., C] + b[C]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.row_broadcast_check(x, b, "add_row")?;
        let bv = self.value(b);
        let data = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&u, &v)| u + v))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(shape, data, Op::AddRow(x, b), rg))
    }

    /// `x[.., C] * q[C]`, scaling every row channel-wise.
    pub fn mul_row(&mut self, x: Var, q: Var) -> Result<Var> {
        let c = self.row_broadcast_check(x, q, "mul_row")?;
        let qv = self.value(q);
        let data = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(qv).map(|(&u, &v)| u * v))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, q]);
        Ok(self.push(shape, data, Op::MulRow(x, q), rg))
    }

    /// `x[M, C] * s[M]`, scaling every row by its own scalar.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.last_dim(x);
        let rows = self.value(x).len() / c;
        if self.value(s).len() != rows {
            return Err(Error::shape("mul_col", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s);
        let data = self
            .value(x)
            .chunks(c)
            .zip(sv)
            .flat_map(|(row, &w)| row.iter().map(move |&u| u * w))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, s]);
        Ok(self.push(shape, data, Op::MulCol(x, s), rg))
    }

    /// Matrix product over the last two axes. `b` is either a plain `[k, n]`
    /// matrix shared by every leading index of `a`, or carries the same
    /// leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead != &sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch = numel(lead);
        let mut data = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            if shared_b {
                kernels::gemm_acc(av, bv, &mut data, batch * m, k, n);
            } else {
                for t in 0..batch {
                    kernels::gemm_acc(
                        &av[t * m * k..(t + 1) * m * k],
                        &bv[t * k * n..(t + 1) * k * n],
                        &mut data[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, data, Op::MatMul { a, b, batch, m, k, n, shared_b }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len());
        for t in 0..batch {
            data.extend(kernels::transpose(&xv[t * rows * cols..(t + 1) * rows * cols], rows, cols));
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([cols, rows]);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, data, Op::Transpose { x, batch, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    /// Concatenates along the last axis; all leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = numel(&lead);
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let c = self.last_dim(p);
                data.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = self.rg(parts);
        Ok(self.push(shape, data, Op::Concat(parts.to_vec()), rg))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat of nothing"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, data, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(Error::shape("slice_rows", &s, &[start, len]));
        }
        let inner = numel(&s[1..]);
        let data = self.value(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, data, Op::SliceRows { x, offset: start * inner }, rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = self.last_dim(x);
        if start + len > cols || len == 0 {
            return Err(Error::shape("slice_cols", &s, &[start, len]));
        }
        let data = self
            .value(x)
            .chunks(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, data, Op::SliceCols { x, start, cols }, rg))
    }

    /// Row lookup: `table[V, E]` indexed by `idx` gives `[idx.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", &s, &[]));
        }
        let (v, e) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::config(format!("gather index {bad} outside table of {v} rows")));
        }
        if idx.is_empty() {
            return Err(Error::config("gather with no indices"));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * e);
        for &i in idx {
            data.extend_from_slice(&tv[i * e..(i + 1) * e]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![idx.len(), e], data, Op::Gather { table, idx: idx.to_vec() }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        if self.track_branches {
            let bits: Vec<u64> = self.value(x).iter().map(|&v| (v > T::zero()) as u64).collect();
            self.mix_branch(bits.into_iter());
        }
        self.unary(x, data, Op::Relu(x))
    }

    /// ELU with slope `alpha` on the negative side.
    pub fn elu(&mut self, x: Var, alpha: T) -> Var {
        let data: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { alpha * (v.exp() - T::one()) })
            .collect();
        if self.track_branches {
            let bits: Vec<u64> = self.value(x).iter().map(|&v| (v > T::zero()) as u64).collect();
            self.mix_branch(bits.into_iter());
        }
        self.unary(x, data, Op::Elu(x, alpha))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.unary(x, data, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| v.tanh()).collect();
        self.unary(x, data, Op::Tanh(x))
    }

    fn unary(&mut self, x: Var, data: Vec<T>, op: Op<T>) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, data, op, rg)
    }

    /// Inverted dropout. `rng == None` means evaluation mode: the input is
    /// returned untouched.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep_prob: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..=1.0).contains(&keep_prob) {
            return Err(Error::config(format!("dropout keep probability {keep_prob} outside [0,1]")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if keep_prob >= 1.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let scale = if keep_prob > 0.0 { T::of(1.0 / keep_prob) } else { T::zero() };
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep_prob { scale } else { T::zero() })
            .collect();
        let data = zip_map(self.value(x), &mask, |a, m| a * m);
        Ok(self.unary(x, data, Op::Dropout { x, mask }))
    }

    /// Normalizes each last-axis vector to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(T::of(is));
            for (j, v) in row.iter().enumerate() {
                let h = T::of((v.as_f64() - mean) * is);
                xhat.push(h);
                data.push(h * gv[j] + bv[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(shape, data, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// 2D cross-correlation of a channel-last `[H, W, Cin]` grid with a
    /// `[Cout, Cin, k, k]` kernel and `pad` zero cells on every side.
    pub fn conv2d(&mut self, x: Var, kernel: Var, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[2] || sk[2] != sk[3] {
            return Err(Error::shape("conv2d", &sx, &sk));
        }
        let k = sk[2];
        if k.is_multiple_of(2) {
            return Err(Error::config(format!("conv2d kernel size must be odd, got {k}")));
        }
        let geom = ConvGeom { h: sx[0], w: sx[1], cin: sx[2], cout: sk[0], k, pad };
        if sx[0] + 2 * pad < k || sx[1] + 2 * pad < k {
            return Err(Error::shape("conv2d", &sx, &sk));
        }
        let data = kernels::conv2d_forward(self.value(x), self.value(kernel), &geom);
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(vec![geom.out_h(), geom.out_w(), geom.cout], data, Op::Conv2d { x, kernel, geom }, rg))
    }

    /// Folds per-pair weights `[Cout, Cin, m]` into a dense `[Cout, Cin, k, k]`
    /// kernel: pair `t` adds `+w` at tap `taps[t].0` and `-w` at `taps[t].1`.
    pub fn pdc_fold(&mut self, w: Var, taps: &[(usize, Option<usize>)], k: usize) -> Result<Var> {
        let s = self.shape(w).to_vec();
        if s.len() != 3 || s[2] != taps.len() {
            return Err(Error::shape("pdc_fold", &s, &[taps.len()]));
        }
        let kk = k * k;
        if taps.iter().any(|&(a, b)| a >= kk || b.is_some_and(|b| b >= kk)) {
            return Err(Error::config("pdc tap outside kernel window"));
        }
        let (cout, cin, m) = (s[0], s[1], s[2]);
        let wv = self.value(w);
        let mut data = vec![T::zero(); cout * cin * kk];
        for oc in 0..cout * cin {
            let wrow = &wv[oc * m..(oc + 1) * m];
            let krow = &mut data[oc * kk..(oc + 1) * kk];
            for (&(plus, minus), &wt) in taps.iter().zip(wrow) {
                krow[plus] += wt;
                if let Some(mi) = minus {
                    krow[mi] -= wt;
                }
            }
        }
        let rg = self.rg(&[w]);
        Ok(self.push(
            vec![cout, cin, k, k],
            data,
            Op::PdcFold { w, taps: taps.to_vec(), cout, cin, kk },
            rg,
        ))
    }

    pub fn avg_pool(&mut self, x: Var, axis: PoolAxis) -> Var {
        let c = self.last_dim(x);
        let xv = self.value(x);
        let rows = xv.len() / c;
        let (shape, data) = match axis {
            PoolAxis::Spatial => {
                let mut acc = vec![0.0f64; c];
                for row in xv.chunks(c) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
                }
                (vec![1, c], acc.into_iter().map(|a| T::of(a / rows as f64)).collect())
            }
            PoolAxis::Channel => {
                let data = xv
                    .chunks(c)
                    .map(|row| T::of(row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64))
                    .collect();
                (channel_pool_shape(self.shape(x)), data)
            }
        };
        let rg = self.rg(&[x]);
        self.push(shape, data, Op::PoolAvg { x, axis }, rg)
    }

    /// Max pooling; ties resolve to the first maximal element.
    pub fn max_pool(&mut self, x: Var, axis: PoolAxis) -> Var {
        let c = self.last_dim(x);
        let xv = self.value(x);
        let rows = xv.len() / c;
        let (shape, data, argmax) = match axis {
            PoolAxis::Spatial => {
                let mut best: Vec<usize> = (0..c).collect();
                for r in 1..rows {
                    for (ch, b) in best.iter_mut().enumerate() {
                        if xv[r * c + ch] > xv[*b] {
                            *b = r * c + ch;
                        }
                    }
                }
                (vec![1, c], best.iter().map(|&i| xv[i]).collect::<Vec<T>>(), best)
            }
            PoolAxis::Channel => {
                let mut best = Vec::with_capacity(rows);
                for r in 0..rows {
                    let mut b = r * c;
                    for i in r * c + 1..(r + 1) * c {
                        if xv[i] > xv[b] {
                            b = i;
                        }
                    }
                    best.push(b);
                }
                (channel_pool_shape(self.shape(x)), best.iter().map(|&i| xv[i]).collect(), best)
            }
        };
        if self.track_branches {
            let bits: Vec<u64> = argmax.iter().map(|&i| i as u64).collect();
            self.mix_branch(bits.into_iter());
        }
        let rg = self.rg(&[x]);
        self.push(shape, data, Op::PoolMax { x, argmax }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.last_dim(x);
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(c) {
            data.extend(softmax_row(row));
        }
        self.unary(x, data, Op::Softmax(x))
    }

    /// Multi-head bilinear pair scores: for `q, k: [N, heads*dh]` the output
    /// `[N, N, heads]` holds `scale * <q_i^h, k_j^h>` at `(i, j, h)`.
    pub fn pair_bilinear(&mut self, q: Var, k: Var, heads: usize, scale: T) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq.len() != 2 || sq != sk || heads == 0 || sq[1] % heads != 0 {
            return Err(Error::shape("pair_bilinear", &sq, &sk));
        }
        let (n, width) = (sq[0], sq[1]);
        let dh = width / heads;
        let (qv, kv) = (self.value(q), self.value(k));
        let mut data = vec![T::zero(); n * n * heads];
        for i in 0..n {
            for j in 0..n {
                for h in 0..heads {
                    let a = &qv[i * width + h * dh..i * width + (h + 1) * dh];
                    let b = &kv[j * width + h * dh..j * width + (h + 1) * dh];
                    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
                    data[(i * n + j) * heads + h] = dot * scale;
                }
            }
        }
        let rg = self.rg(&[q, k]);
        Ok(self.push(vec![n, n, heads], data, Op::PairBilinear { q, k, n, heads, dh, scale }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` over
    /// the rows where `mask` is set (all rows when `mask` is `None`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let y = self.last_dim(logits);
        let lv = self.value(logits);
        let rows = lv.len() / y;
        if labels.len() != rows || mask.is_some_and(|m| m.len() != rows) {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= y) {
            return Err(Error::config(format!("label {bad} outside {y} classes")));
        }
        let mask: Vec<bool> = mask.map_or_else(|| vec![true; rows], <[bool]>::to_vec);
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0f64;
        let mut count = 0;
        for (r, row) in lv.chunks(y).enumerate() {
            let p = softmax_row(row);
            if mask[r] {
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64();
                let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
                total += lse - row[labels[r]].as_f64();
                count += 1;
            }
            probs.extend(p);
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![T::of(loss)],
            Op::CrossEntropy { logits, labels: labels.to_vec(), mask, probs, count },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.as_f64()).sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![T::of(s)], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].data.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
                }
            }
            Op::AddRow(x, b) => {
                let c = self.value(*b).len();
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                }
            }
            Op::MulRow(x, q) => {
                let qv = self.value(*q);
                let c = qv.len();
                if let Some(d) = self.acc(grads, *x) {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(c)) {
                        for ((dv, &gv), &w) in drow.iter_mut().zip(grow).zip(qv) {
                            *dv += gv * w;
                        }
                    }
                }
                let xv = self.value(*x);
                if let Some(d) = self.acc(grads, *q) {
                    for (xrow, grow) in xv.chunks(c).zip(g.chunks(c)) {
                        for ((dv, &gv), &xv) in d.iter_mut().zip(grow).zip(xrow) {
                            *dv += gv * xv;
                        }
                    }
                }
            }
            Op::MulCol(x, s) => {
                let sv = self.value(*s);
                let c = self.value(*x).len() / sv.len();
                if let Some(d) = self.acc(grads, *x) {
                    for ((drow, grow), &w) in d.chunks_mut(c).zip(g.chunks(c)).zip(sv) {
                        axpy_slice(w, grow, drow);
                    }
                }
                let xv = self.value(*x);
                if let Some(d) = self.acc(grads, *s) {
                    for ((dv, grow), xrow) in d.iter_mut().zip(g.chunks(c)).zip(xv.chunks(c)) {
                        *dv += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if *shared_b {
                    let rows = batch * m;
                    if let Some(d) = self.acc(grads, *a) {
                        let bt = kernels::transpose(bv, k, n);
                        kernels::gemm_acc(g, &bt, d, rows, n, k);
                    }
                    if let Some(d) = self.acc(grads, *b) {
                        let at = kernels::transpose(av, rows, k);
                        kernels::gemm_acc(&at, g, d, k, rows, n);
                    }
                } else {
                    if let Some(d) = self.acc(grads, *a) {
                        for t in 0..batch {
                            let bt = kernels::transpose(&bv[t * k * n..(t + 1) * k * n], k, n);
                            kernels::gemm_acc(
                                &g[t * m * n..(t + 1) * m * n],
                                &bt,
                                &mut d[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    if let Some(d) = self.acc(grads, *b) {
                        for t in 0..batch {
                            let at = kernels::transpose(&av[t * m * k..(t + 1) * m * k], m, k);
                            kernels::gemm_acc(
                                &at,
                                &g[t * m * n..(t + 1) * m * n],
                                &mut d[t * k * n..(t + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Transpose { x, batch, rows, cols } => {
                if let Some(d) = self.acc(grads, *x) {
                    let sz = rows * cols;
                    for t in 0..*batch {
                        let back = kernels::transpose(&g[t * sz..(t + 1) * sz], *cols, *rows);
                        add_into(&mut d[t * sz..(t + 1) * sz], &back);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, g);
                }
            }
            Op::Concat(parts) => {
                let width = *node.shape.last().unwrap();
                let rows = g.len() / width;
                let mut off = 0;
                for &p in parts {
                    let c = self.last_dim(p);
                    if let Some(d) = self.acc(grads, p) {
                        for r in 0..rows {
                            add_into(&mut d[r * c..(r + 1) * c], &g[r * width + off..r * width + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = self.acc(grads, p) {
                        add_into(d, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, offset } => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(&mut d[*offset..*offset + g.len()], g);
                }
            }
            Op::SliceCols { x, start, cols } => {
                let len = *node.shape.last().unwrap();
                if let Some(d) = self.acc(grads, *x) {
                    for (drow, grow) in d.chunks_mut(*cols).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                }
            }
            Op::Gather { table, idx } => {
                let e = self.last_dim(*table);
                if let Some(d) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * e..(i + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Elu(x, alpha) => {
                let xv = self.value(*x);
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), (&v, &o)) in d.iter_mut().zip(g).zip(xv.iter().zip(out)) {
                        // negative side: d/dx alpha(e^x - 1) = out + alpha
                        *d += if v > T::zero() { gv } else { gv * (o + *alpha) };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(out) {
                        *d += gv * o * (T::one() - o);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(out) {
                        *d += gv * (T::one() - o * o);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &m) in d.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let dim = self.value(*gain).len();
                let gv = self.value(*gain);
                if let Some(d) = self.acc(grads, *gain) {
                    for (grow, hrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for ((dv, &a), &h) in d.iter_mut().zip(grow).zip(hrow) {
                            *dv += a * h;
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for grow in g.chunks(dim) {
                        add_into(d, grow);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    for (r, (grow, hrow)) in g.chunks(dim).zip(xhat.chunks(dim)).enumerate() {
                        let dxhat: Vec<f64> = grow.iter().zip(gv).map(|(&a, &w)| (a * w).as_f64()).collect();
                        let m1 = dxhat.iter().sum::<f64>() / dim as f64;
                        let m2 = dxhat.iter().zip(hrow).map(|(a, h)| a * h.as_f64()).sum::<f64>() / dim as f64;
                        let is = inv_std[r].as_f64();
                        for (j, dv) in d[r * dim..(r + 1) * dim].iter_mut().enumerate() {
                            *dv += T::of(is * (dxhat[j] - m1 - hrow[j].as_f64() * m2));
                        }
                    }
                }
            }
            Op::Conv2d { x, kernel, geom } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let need_x = self.nodes[x.0].requires_grad;
                let need_k = self.nodes[kernel.0].requires_grad;
                let mut dx = need_x.then(|| vec![T::zero(); xv.len()]);
                let mut dk = need_k.then(|| vec![T::zero(); kv.len()]);
                kernels::conv2d_backward(xv, kv, g, geom, dx.as_deref_mut(), dk.as_deref_mut());
                if let (Some(d), Some(src)) = (self.acc(grads, *x), dx) {
                    add_into(d, &src);
                }
                if let (Some(d), Some(src)) = (self.acc(grads, *kernel), dk) {
                    add_into(d, &src);
                }
            }
            Op::PdcFold { w, taps, cout, cin, kk } => {
                let m = taps.len();
                if let Some(d) = self.acc(grads, *w) {
                    for oc in 0..cout * cin {
                        let grow = &g[oc * kk..(oc + 1) * kk];
                        for (t, &(plus, minus)) in taps.iter().enumerate() {
                            let mut v = grow[plus];
                            if let Some(mi) = minus {
                                v -= grow[mi];
                            }
                            d[oc * m + t] += v;
                        }
                    }
                }
            }
            Op::PoolAvg { x, axis } => {
                let c = self.last_dim(*x);
                let total = self.value(*x).len();
                if let Some(d) = self.acc(grads, *x) {
                    match axis {
                        PoolAxis::Spatial => {
                            let inv = T::of(c as f64 / total as f64);
                            for drow in d.chunks_mut(c) {
                                drow.iter_mut().zip(g).for_each(|(dv, &gv)| *dv += gv * inv);
                            }
                        }
                        PoolAxis::Channel => {
                            let inv = T::of(1.0 / c as f64);
                            for (drow, &gv) in d.chunks_mut(c).zip(g) {
                                drow.iter_mut().for_each(|dv| *dv += gv * inv);
                            }
                        }
                    }
                }
            }
            Op::PoolMax { x, argmax, .. } => {
                if let Some(d) = self.acc(grads, *x) {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        d[i] += gv;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().unwrap();
                if let Some(d) = self.acc(grads, *x) {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += y * (gv - dot);
                        }
                    }
                }
            }
            Op::PairBilinear { q, k, n, heads, dh, scale } => {
                let (n, heads, dh) = (*n, *heads, *dh);
                let width = heads * dh;
                let (qv, kv) = (self.value(*q), self.value(*k));
                if let Some(d) = self.acc(grads, *q) {
                    for i in 0..n {
                        for j in 0..n {
                            for h in 0..heads {
                                let gv = g[(i * n + j) * heads + h] * *scale;
                                let src = &kv[j * width + h * dh..j * width + (h + 1) * dh];
                                axpy_slice(gv, src, &mut d[i * width + h * dh..i * width + (h + 1) * dh]);
                            }
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *k) {
                    for i in 0..n {
                        for j in 0..n {
                            for h in 0..heads {
                                let gv = g[(i * n + j) * heads + h] * *scale;
                                let src = &qv[i * width + h * dh..i * width + (h + 1) * dh];
                                axpy_slice(gv, src, &mut d[j * width + h * dh..j * width + (h + 1) * dh]);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, mask, probs, count } => {
                if *count == 0 {
                    return;
                }
                let y = self.last_dim(*logits);
                let scale = g[0] / T::of(*count as f64);
                if let Some(d) = self.acc(grads, *logits) {
                    for (r, (&lab, &on)) in labels.iter().zip(mask).enumerate() {
                        if !on {
                            continue;
                        }
                        for c in 0..y {
                            let target = if c == lab { T::one() } else { T::zero() };
                            d[r * y + c] += scale * (probs[r * y + c] - target);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|dv| *dv += g[0]);
                }
            }
        }
    }
}

fn channel_pool_shape(s: &[usize]) -> Vec<usize> {
    let mut shape = s.to_vec();
    *shape.last_mut().unwrap() = 1;
    shape
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
}

fn axpy_slice<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    kernels::axpy(alpha, x, y)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - mx.as_f64()).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::of(e / z)).collect()
}
