//! Reverse-mode differentiation over a per-forward-pass computation graph.
//!
//! A [`Graph`] records every operation applied to its values. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! accumulates `∂root/∂node` into every node that depends on a parameter.
//! The graph is rebuilt for each forward pass and confined to one thread.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Scalar, Tensor, View};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Value and accumulated gradient of one graph node.
#[derive(Clone, Debug)]
pub struct DiffValue<T> {
    pub data: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Contiguous run of rows forming one attention sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    ScaleConst(Var, T),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, Option<Vec<bool>>),
    LogSoftmax(Var, Option<Vec<bool>>),
    SumNormalizeRows(Var),
    L2NormalizeRows(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    GroupMeanRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<Option<usize>>),
    MaskSelect(Var, Vec<bool>),
    MaskScatter(Var, Vec<bool>),
    Reshape(Var),
    Transpose(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, causal: bool, probs: Vec<T> },
}

pub const LOG_FLOOR: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<DiffValue<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].data
    }

    pub fn node(&self, v: Var) -> &DiffValue<T> {
        &self.nodes[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, data: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(DiffValue { data, grad: None, requires_grad });
        self.ops.push(op);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// `op(a) · op(b)` for 2-D operands; `ta`/`tb` transpose the operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let va = self.view(a, ta);
        let vb = self.view(b, tb);
        if va.cols != vb.rows {
            return Err(Error::ShapeMismatch(format!("matmul {}x{} · {}x{}", va.rows, va.cols, vb.rows, vb.cols)));
        }
        let (m, n) = (va.rows, vb.cols);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&mut out, va, vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    fn view(&self, v: Var, t: bool) -> View<'_, T> {
        let view = View::of(self.value(v));
        if t {
            view.t()
        } else {
            view
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, Op::Add(a, b), rg))
    }

    /// Adds a `1×n` row to every row of an `m×n` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.shape2(a);
        if self.value(row).len() != n {
            return Err(Error::ShapeMismatch(format!("add_row: {n} columns vs bias of {}", self.value(row).len())));
        }
        let mut data = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in data.data_mut().chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(&r) {
                *x = *x + b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(data, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if self.value(a).len() != c.len() {
            return Err(Error::ShapeMismatch(format!("mul_const: {:?} vs {:?}", self.value(a).shape(), c.shape())));
        }
        let mut data = self.value(a).clone();
        for (x, &y) in data.data_mut().iter_mut().zip(c.data()) {
            *x = *x * y;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(data, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(data, Op::ScaleConst(a, c), rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch("mul_scalar expects a one-element scale".into()));
        }
        let c = self.value(s).item();
        let data = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a, s]);
        Ok(self.push(data, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(data, Op::Exp(a), rg)
    }

    /// `log(max(x, 1e-12))`.
    pub fn log(&mut self, a: Var) -> Var {
        let floor = T::of(LOG_FLOOR);
        let data = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(data, Op::Log(a), rg)
    }

    fn check_mask(&self, a: Var, mask: &Option<Vec<bool>>) -> Result<()> {
        if let Some(m) = mask {
            if m.len() != self.value(a).len() {
                return Err(Error::ShapeMismatch("mask length differs from tensor".into()));
            }
        }
        Ok(())
    }

    /// Row-wise softmax over the last axis. Masked-out entries (false) are
    /// excluded from the normalizer and output 0 with zero gradient.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        self.check_mask(a, &mask)?;
        let x = self.value(a);
        let n = x.cols();
        let mut out = x.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let m = mask.as_ref().map(|m| &m[r * n..(r + 1) * n]);
            softmax_in_place(row, m);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, mask), rg))
    }

    /// Row-wise log-softmax with the same masking rule as [`Graph::softmax_rows`].
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        self.check_mask(a, &mask)?;
        let x = self.value(a);
        let n = x.cols();
        let mut out = x.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let m = mask.as_ref().map(|m| &m[r * n..(r + 1) * n]);
            let valid = |j: usize| m.map_or(true, |m| m[j]);
            let mx = (0..n).filter(|&j| valid(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                row.iter_mut().for_each(|v| *v = T::zero());
                continue;
            }
            let s: T = (0..n).filter(|&j| valid(j)).map(|j| (row[j] - mx).exp()).sum();
            let lse = mx + s.ln();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if valid(j) { *v - lse } else { T::zero() };
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, mask), rg))
    }

    /// Divides each row by its own sum. Fails with `DegenerateMap` when a row
    /// sum is not strictly positive.
    pub fn sum_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            let s: T = row.iter().copied().sum();
            if s <= T::zero() || !s.is_finite() {
                return Err(Error::DegenerateMap);
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SumNormalizeRows(a), rg))
    }

    /// Scales each row to unit L2 norm. Rows with norm below 1e-12 map to zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for row in out.data_mut().chunks_mut(n) {
            let nrm = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            if nrm > T::of(NORM_FLOOR) {
                row.iter_mut().for_each(|v| *v = *v / nrm);
                norms.push(nrm);
            } else {
                row.iter_mut().for_each(|v| *v = T::zero());
                norms.push(T::zero());
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::L2NormalizeRows(a, norms), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum::<T>() / T::of(x.len().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Averages consecutive groups of `group` rows: `[g·m, n] → [m, n]`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (r, n) = self.shape2(a);
        if group == 0 || r % group != 0 {
            return Err(Error::ShapeMismatch(format!("{r} rows not divisible into groups of {group}")));
        }
        let m = r / group;
        let x = self.value(a);
        let inv = T::of(1.0 / group as f64);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let dst = out.row_mut(i);
            for g in 0..group {
                for (d, &s) in dst.iter_mut().zip(x.row(i * group + g)) {
                    *d = *d + s * inv;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GroupMeanRows(a, group), rg))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.value(p).cols()).ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::ShapeMismatch("concat_rows column mismatch".into()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_vec(&[rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row gather: output row `r` is `a[idx[r]]`, or a zero row for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let (r, n) = self.shape2(a);
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch(format!("gather index {bad} out of {r} rows")));
        }
        let x = self.value(a);
        let mut out = Tensor::zeros(&[idx.len(), n]);
        for (o, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out.row_mut(o).copy_from_slice(x.row(i));
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gather(a, idx), rg))
    }

    /// Flattens the elements where `mask` is true, in row-major order.
    pub fn mask_select(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch("mask_select length mismatch".into()));
        }
        let data: Vec<T> = self.value(a).data().iter().zip(&mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect();
        let n = data.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&[n], data)?, Op::MaskSelect(a, mask), rg))
    }

    /// Inverse of [`Graph::mask_select`]: places the elements of `a` at the true
    /// positions of `mask` in a zero tensor of `shape`.
    pub fn mask_scatter(&mut self, a: Var, mask: Vec<bool>, shape: &[usize]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count != self.value(a).len() || mask.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch("mask_scatter size mismatch".into()));
        }
        let mut out = Tensor::zeros(shape);
        let mut src = self.value(a).data().iter();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            if m {
                *o = *src.next().expect("counted");
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaskScatter(a, mask), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape2(a);
        let x = self.value(a);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = x.data()[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Row-wise layer normalization with learnable gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, n) = self.shape2(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::ShapeMismatch("layer_norm parameter width".into()));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Tensor::zeros(&[r, n]);
        let mut xhat = vec![T::zero(); r * n];
        let mut inv_std = Vec::with_capacity(r);
        let nf = T::of(n as f64);
        for i in 0..r {
            let row = xv.row(i);
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std.push(is);
            let o = out.row_mut(i);
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).map(|x| gelu_fwd(x));
        let rg = self.rg(&[a]);
        self.push(data, Op::Gelu(a), rg)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, d]`; each segment is attended independently
    /// and heads split the feature axis evenly. With `causal`, position `t`
    /// only sees positions `≤ t` of its own segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, causal: bool) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (rows, d) = self.shape2(q);
        if heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch(format!("{d} features not divisible by {heads} heads")));
        }
        if segments.iter().any(|s| s.start + s.len > rows) {
            return Err(Error::ShapeMismatch("attention segment out of range".into()));
        }
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(&[rows, d]);
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads);
        for seg in &segments {
            for h in 0..heads {
                let off = h * hd;
                for t in 0..seg.len {
                    let qi = &qv.row(seg.start + t)[off..off + hd];
                    let upto = if causal { t + 1 } else { seg.len };
                    let base = probs.len();
                    let mut mx = T::neg_infinity();
                    for s in 0..seg.len {
                        let p = if s < upto {
                            let kj = &kv.row(seg.start + s)[off..off + hd];
                            let sc = crate::tensor::dot(qi, kj) * scale;
                            mx = mx.max(sc);
                            sc
                        } else {
                            T::neg_infinity()
                        };
                        probs.push(p);
                    }
                    let mut z = T::zero();
                    for p in &mut probs[base..] {
                        *p = if *p == T::neg_infinity() { T::zero() } else { (*p - mx).exp() };
                        z = z + *p;
                    }
                    let o = &mut out.row_mut(seg.start + t)[off..off + hd];
                    for s in 0..upto {
                        let p = probs[base + s] / z;
                        probs[base + s] = p;
                        let vj = &vv.row(seg.start + s)[off..off + hd];
                        for (oo, &vvv) in o.iter_mut().zip(vj) {
                            *oo = *oo + p * vvv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, segments, heads, causal, probs }, rg))
    }

    /// Accumulates `∂root/∂x` into every node `x` that depends on a parameter.
    /// `root` must hold exactly one element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch("backward needs a scalar root".into()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::from_vec(self.value(root).shape(), vec![T::one()])?;
        accumulate(&mut self.nodes[root.0], &seed);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.ops[id], Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else { continue };
            for (to, grad) in self.local_grads(id, &g)? {
                self.send(to, grad);
            }
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, to: Var, g: Tensor<T>) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut self.nodes[to.0], &g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = &self.nodes[id].data;
        let mut sends = Vec::new();
        match &self.ops[id] {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let gv = View::of(g);
                if self.wants(a) {
                    let (ar, ac) = self.shape2(a);
                    let mut ga = vec![T::zero(); ar * ac];
                    let vb = self.view(b, tb);
                    if ta {
                        gemm_acc(&mut ga, vb, gv.t());
                    } else {
                        gemm_acc(&mut ga, gv, vb.t());
                    }
                    let shape = self.value(a).shape().to_vec();
                    sends.push((a, Tensor::from_vec(&shape, ga)?));
                }
                if self.wants(b) {
                    let (br, bc) = self.shape2(b);
                    let mut gb = vec![T::zero(); br * bc];
                    let va = self.view(a, ta);
                    if tb {
                        gemm_acc(&mut gb, gv.t(), va);
                    } else {
                        gemm_acc(&mut gb, va.t(), gv);
                    }
                    let shape = self.value(b).shape().to_vec();
                    sends.push((b, Tensor::from_vec(&shape, gb)?));
                }
            }
            &Op::Add(a, b) => {
                let g = g.clone();
                sends.push((b, g.clone()));
                sends.push((a, g));
            }
            &Op::AddRow(a, row) => {
                if self.wants(row) {
                    let n = g.cols();
                    let mut gr = vec![T::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (s, &x) in gr.iter_mut().zip(chunk) {
                            *s = *s + x;
                        }
                    }
                    let shape = self.value(row).shape().to_vec();
                    sends.push((row, Tensor::from_vec(&shape, gr)?));
                }
                sends.push((a, g.clone()));
            }
            &Op::Mul(a, b) => {
                let ga = zip_map(g, self.value(b), |x, y| x * y);
                let gb = zip_map(g, self.value(a), |x, y| x * y);
                sends.push((a, ga));
                sends.push((b, gb));
            }
            Op::MulConst(a, c) => {
                let a = *a;
                let mut ga = g.clone();
                for (x, &y) in ga.data_mut().iter_mut().zip(c.data()) {
                    *x = *x * y;
                }
                let shape = self.value(a).shape().to_vec();
                sends.push((a, ga.reshaped(&shape)?));
            }
            &Op::ScaleConst(a, c) => {
                let ga = g.map(|x| x * c);
                sends.push((a, ga));
            }
            &Op::MulScalar(a, s) => {
                let c = self.value(s).item();
                if self.wants(s) {
                    let gs = crate::tensor::dot(g.data(), self.value(a).data());
                    let shape = self.value(s).shape().to_vec();
                    sends.push((s, Tensor::from_vec(&shape, vec![gs])?));
                }
                sends.push((a, g.map(|x| x * c)));
            }
            &Op::Exp(a) => {
                let ga = zip_map(g, out, |x, y| x * y);
                sends.push((a, ga));
            }
            &Op::Log(a) => {
                let floor = T::of(LOG_FLOOR);
                let ga = zip_map(g, self.value(a), |gy, x| if x > floor { gy / x } else { T::zero() });
                sends.push((a, ga));
            }
            Op::Softmax(a, mask) => {
                let a = *a;
                let n = out.cols();
                let mut ga = g.clone();
                for (r, (gr, yr)) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)).enumerate() {
                    let s = crate::tensor::dot(gr, yr);
                    for (j, x) in gr.iter_mut().enumerate() {
                        let valid = mask.as_ref().map_or(true, |m| m[r * n + j]);
                        *x = if valid { yr[j] * (*x - s) } else { T::zero() };
                    }
                }
                sends.push((a, ga));
            }
            Op::LogSoftmax(a, mask) => {
                let a = *a;
                let n = out.cols();
                let mut ga = g.clone();
                for (r, (gr, yr)) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)).enumerate() {
                    let valid = |j: usize| mask.as_ref().map_or(true, |m| m[r * n + j]);
                    let s: T = (0..n).filter(|&j| valid(j)).map(|j| gr[j]).sum();
                    for j in 0..n {
                        gr[j] = if valid(j) { gr[j] - yr[j].exp() * s } else { T::zero() };
                    }
                }
                sends.push((a, ga));
            }
            &Op::SumNormalizeRows(a) => {
                let n = out.cols();
                let x = self.value(a);
                let mut ga = g.clone();
                for ((gr, yr), xr) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)).zip(x.data().chunks(n)) {
                    let s: T = xr.iter().copied().sum();
                    let dy = crate::tensor::dot(gr, yr);
                    gr.iter_mut().for_each(|v| *v = (*v - dy) / s);
                }
                sends.push((a, ga));
            }
            Op::L2NormalizeRows(a, norms) => {
                let a = *a;
                let n = out.cols();
                let mut ga = g.clone();
                for ((gr, yr), &nrm) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)).zip(norms) {
                    if nrm == T::zero() {
                        gr.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let p = crate::tensor::dot(gr, yr);
                    for (v, &y) in gr.iter_mut().zip(yr) {
                        *v = (*v - y * p) / nrm;
                    }
                }
                sends.push((a, ga));
            }
            &Op::Sum(a) => {
                let gv = g.item();
                let shape = self.value(a).shape().to_vec();
                let n = self.value(a).len();
                sends.push((a, Tensor::from_vec(&shape, vec![gv; n])?));
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                let gv = g.item() / T::of(n.max(1) as f64);
                let shape = self.value(a).shape().to_vec();
                sends.push((a, Tensor::from_vec(&shape, vec![gv; n])?));
            }
            &Op::GroupMeanRows(a, group) => {
                let (r, n) = self.shape2(a);
                let inv = T::of(1.0 / group as f64);
                let mut ga = Tensor::zeros(&[r, n]);
                for i in 0..r {
                    let src = g.row(i / group);
                    for (d, &s) in ga.row_mut(i).iter_mut().zip(src) {
                        *d = s * inv;
                    }
                }
                let shape = self.value(a).shape().to_vec();
                sends.push((a, ga.reshaped(&shape)?));
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).len();
                    let shape = self.value(p).shape().to_vec();
                    let slice = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    sends.push((p, Tensor::from_vec(&shape, slice)?));
                }
            }
            Op::Gather(a, idx) => {
                let a = *a;
                if self.wants(a) {
                    let mut ga = Tensor::zeros(self.value(a).shape());
                    for (o, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            for (d, &s) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                                *d = *d + s;
                            }
                        }
                    }
                    sends.push((a, ga));
                }
            }
            Op::MaskSelect(a, mask) => {
                let a = *a;
                let mut ga = Tensor::zeros(self.value(a).shape());
                let mut src = g.data().iter();
                for (o, &m) in ga.data_mut().iter_mut().zip(mask) {
                    if m {
                        *o = *src.next().expect("counted");
                    }
                }
                sends.push((a, ga));
            }
            Op::MaskScatter(a, mask) => {
                let a = *a;
                let data: Vec<T> = g.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect();
                let shape = self.value(a).shape().to_vec();
                sends.push((a, Tensor::from_vec(&shape, data)?));
            }
            &Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                sends.push((a, g.clone().reshaped(&shape)?));
            }
            &Op::Transpose(a) => {
                let (r, c) = self.shape2(a);
                let mut ga = Tensor::zeros(self.value(a).shape());
                for i in 0..r {
                    for j in 0..c {
                        ga.data_mut()[i * c + j] = g.data()[j * r + i];
                    }
                }
                sends.push((a, ga));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let n = g.cols();
                let r = g.rows();
                let gv = self.value(gain).data();
                let nf = T::of(n as f64);
                let mut gx = Tensor::zeros(self.value(x).shape());
                let mut gg = vec![T::zero(); n];
                let mut gb = vec![T::zero(); n];
                for i in 0..r {
                    let gr = g.row(i);
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        m1 = m1 + dh;
                        m2 = m2 + dh * hr[j];
                        gg[j] = gg[j] + gr[j] * hr[j];
                        gb[j] = gb[j] + gr[j];
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    let dst = gx.row_mut(i);
                    for j in 0..n {
                        dst[j] = inv_std[i] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                    }
                }
                let gshape = self.value(gain).shape().to_vec();
                let bshape = self.value(bias).shape().to_vec();
                sends.push((x, gx));
                sends.push((gain, Tensor::from_vec(&gshape, gg)?));
                sends.push((bias, Tensor::from_vec(&bshape, gb)?));
            }
            &Op::Gelu(a) => {
                let ga = zip_map(g, self.value(a), |gy, x| gy * gelu_grad(x));
                sends.push((a, ga));
            }
            Op::Attention { q, k, v, segments, heads, causal, probs } => {
                let (q, k, v, heads, causal) = (*q, *k, *v, *heads, *causal);
                let (_, d) = self.shape2(q);
                let hd = d / heads;
                let scale = T::of(1.0 / (hd as f64).sqrt());
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let mut gq = Tensor::zeros(qv.shape());
                let mut gk = Tensor::zeros(kv.shape());
                let mut gvv = Tensor::zeros(vv.shape());
                let mut base = 0;
                let mut dp = Vec::new();
                for seg in segments {
                    let l = seg.len;
                    for h in 0..heads {
                        let off = h * hd;
                        for t in 0..l {
                            let p = &probs[base + t * l..base + (t + 1) * l];
                            let upto = if causal { t + 1 } else { l };
                            let go = &g.row(seg.start + t)[off..off + hd];
                            dp.clear();
                            for s in 0..upto {
                                let vj = &vv.row(seg.start + s)[off..off + hd];
                                dp.push(crate::tensor::dot(go, vj));
                                let gvr = &mut gvv.row_mut(seg.start + s)[off..off + hd];
                                for (x, &y) in gvr.iter_mut().zip(go) {
                                    *x = *x + p[s] * y;
                                }
                            }
                            let pd: T = (0..upto).map(|s| p[s] * dp[s]).sum();
                            let qi = qv.row(seg.start + t)[off..off + hd].to_vec();
                            for s in 0..upto {
                                let ds = p[s] * (dp[s] - pd) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let kj = &kv.row(seg.start + s)[off..off + hd];
                                let gqr = &mut gq.row_mut(seg.start + t)[off..off + hd];
                                for (x, &y) in gqr.iter_mut().zip(kj) {
                                    *x = *x + ds * y;
                                }
                                let gkr = &mut gk.row_mut(seg.start + s)[off..off + hd];
                                for (x, &y) in gkr.iter_mut().zip(&qi) {
                                    *x = *x + ds * y;
                                }
                            }
                        }
                        base += l * l;
                    }
                }
                sends.push((q, gq));
                sends.push((k, gk));
                sends.push((v, gvv));
            }
        }
        Ok(sends)
    }
}

fn accumulate<T: Scalar>(node: &mut DiffValue<T>, g: &Tensor<T>) {
    match &mut node.grad {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => {
            let shaped = Tensor::from_vec(node.data.shape(), g.data().to_vec()).expect("gradient shape matches value");
            node.grad = Some(shaped);
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same length")
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let valid = |j: usize| mask.map_or(true, |m| m[j]);
    let mx = (0..row.len()).filter(|&j| valid(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut z = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        *v = if valid(j) { (*v - mx).exp() } else { T::zero() };
        z = z + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / z);
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    let th = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * dinner
}
