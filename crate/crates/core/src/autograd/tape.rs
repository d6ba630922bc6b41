use std::collections::HashMap;

use super::conv::{self, ConvGeometry};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::{gemm, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Concat { inputs: Vec<Var>, outer: usize, blocks: Vec<usize> },
    Slice { a: Var, outer: usize, in_block: usize, offset: usize, out_block: usize },
    Reshape(Var),
    Transpose(Var),
    GatherRows { a: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    BceWithLogits { logits: Var, target: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, n: usize, c: usize, o: usize, geom: ConvGeometry, cols: Vec<T> },
    ConvTranspose2d { x: Var, w: Var, b: Var, n: usize, c: usize, o: usize, geom: ConvGeometry, xmat: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Tapes are single-threaded; run independent tapes on separate threads.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::contract(op, format!("incompatible shapes {a:?} and {b:?}"))
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the NaN/Inf check after every forward op.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "forward op #{} produced a non-finite value",
                self.nodes.len()
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a row vector `b` of length `n` to every row of `a` (`[.., n]`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.shape(b) != [n] {
            return Err(shape_err("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.data(b);
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::AddRow(a, b), &[a, b])
    }

    /// Scales row `i` of the 2-D tensor `a` by `s[i]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || self.shape(s) != [sa[0]] {
            return Err(shape_err("mul_col", sa, self.shape(s)));
        }
        let n = sa[1];
        let scale = self.data(s);
        let data = self
            .data(a)
            .chunks(n)
            .zip(scale)
            .flat_map(|(row, &k)| row.iter().map(move |&x| x * k))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::MulCol(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.abs()).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Abs(a), &[a])
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::contract("mean", "empty tensor"));
        }
        let s: T = self.data(a).iter().copied().sum();
        let m = s / T::from_usize(n).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if n == 0 {
            return Err(Error::contract("softmax", "empty axis"));
        }
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(eps);
        let nf = T::from_usize(n).unwrap();
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xs.len() / n.max(1);
        let mut xhat = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(n) {
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// evaluated in the overflow-free log-sum-exp form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        if self.value(logits).numel() != target.len() || target.is_empty() {
            return Err(shape_err("bce_with_logits", self.shape(logits), &[target.len()]));
        }
        let total: T = self
            .data(logits)
            .iter()
            .zip(target)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::from_usize(target.len()).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.to_vec(),
            },
            &[logits],
        )
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a [m, k] x b [k, n]`, or `a x b^T` for `b [n, k]` when `trans_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, T::zero(), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    /// `x [m, k] x w [k, n] + b [n]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::contract("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let t = Tensor::new(&[n, m], transpose(self.data(a), m, n))?;
        self.push(t, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let t = self.value(a).clone().reshaped(shape);
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut blocks = Vec::with_capacity(inputs.len());
        let mut axis_len = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err("concat", &base, s));
            }
            axis_len += s[axis];
            blocks.push(s[axis] * inner);
        }
        let total_block: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * total_block);
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                out.extend_from_slice(&self.data(v)[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let t = Tensor::new(&shape, out)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                blocks,
            },
            inputs,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::contract(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_block = s[axis] * inner;
        let out_block = len * inner;
        let offset = start * inner;
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * out_block);
        for o in 0..outer {
            out.extend_from_slice(&src[o * in_block + offset..o * in_block + offset + out_block]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        self.push(
            t,
            Op::Slice {
                a,
                outer,
                in_block,
                offset,
                out_block,
            },
            &[a],
        )
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::contract("gather_rows", format!("expected 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::contract("gather_rows", format!("row {bad} out of range for {s:?}")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(&[idx.len(), n], out)?;
        self.push(
            t,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    // ---------------------------------------------------------------- convolutions

    /// 2-D convolution: `x [n, c, h, w]`, `w [o, c, k, k]`, `b [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(shape_err("conv2d", &sw, self.shape(b)));
        }
        let (n, c, o) = (sx[0], sx[1], sw[0]);
        let geom = ConvGeometry::forward(sx[2], sx[3], sw[2], stride, pad)
            .ok_or_else(|| shape_err("conv2d", &sx, &sw))?;
        let cols = conv::im2col(self.data(x), n, c, &geom);
        let np = n * geom.out_pixels();
        let ckk = c * geom.patch();
        let mut out = vec![T::zero(); o * np];
        gemm(o, ckk, np, self.data(w), false, &cols, false, T::zero(), &mut out);
        for (row, &bias) in out.chunks_mut(np).zip(self.data(b)) {
            for v in row {
                *v += bias;
            }
        }
        let out = conv::channel_major_to_batch(&out, n, o, geom.out_pixels());
        let t = Tensor::new(&[n, o, geom.out_h, geom.out_w], out)?;
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                n,
                c,
                o,
                geom,
                cols,
            },
            &[x, w, b],
        )
    }

    /// Transposed 2-D convolution: `x [n, c, h, w]`, `w [c, o, k, k]`, `b [o]`.
    /// Output side is `(h - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv_transpose2d", &sx, &sw));
        }
        if self.shape(b) != [sw[1]] {
            return Err(shape_err("conv_transpose2d", &sw, self.shape(b)));
        }
        let (n, c, o) = (sx[0], sx[1], sw[1]);
        let geom = ConvGeometry::transposed(sx[2], sx[3], sw[2], stride, pad, output_pad)
            .ok_or_else(|| shape_err("conv_transpose2d", &sx, &sw))?;
        let small = geom.out_pixels();
        let xmat = conv::batch_to_channel_major(self.data(x), n, c, small);
        let okk = o * geom.patch();
        let mut cols = vec![T::zero(); okk * n * small];
        gemm(okk, c, n * small, self.data(w), true, &xmat, false, T::zero(), &mut cols);
        let mut out = conv::col2im(&cols, n, o, &geom);
        let bias = self.data(b);
        for (plane, chunk) in out.chunks_mut(geom.in_pixels()).enumerate() {
            let bv = bias[plane % o];
            for v in chunk {
                *v += bv;
            }
        }
        let t = Tensor::new(&[n, o, geom.in_h, geom.in_w], out)?;
        self.push(
            t,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                n,
                c,
                o,
                geom,
                xmat,
            },
            &[x, w, b],
        )
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `root`. Gradients accumulate additively
    /// over fan-out.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut d = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MulCol(a, s) => {
                let n = self.shape(*a)[1];
                if self.wants(*a) {
                    let d = g
                        .chunks(n)
                        .zip(self.data(*s))
                        .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
                        .collect();
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*s) {
                    let d = g
                        .chunks(n)
                        .zip(self.data(*a).chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *s, d);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *c).collect());
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = out.len() / m.max(1);
                if self.wants(*a) {
                    let mut d = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, self.data(*b), !*trans_b, T::zero(), &mut d);
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); k * n];
                    if *trans_b {
                        gemm(n, m, k, g, true, self.data(*a), false, T::zero(), &mut d);
                    } else {
                        gemm(k, m, n, self.data(*a), true, g, false, T::zero(), &mut d);
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(out)
                    .map(|(&v, &y)| if y > T::zero() { v } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(out).map(|(&v, &y)| v * y * (T::one() - y)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&v, &x)| {
                        if x > T::zero() {
                            v
                        } else if x < T::zero() {
                            -v
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let n = last_dim(self.shape(*a));
                let mut d = Vec::with_capacity(out.len());
                for (gr, yr) in g.chunks(n).zip(out.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).numel();
                let gam = self.data(*gamma);
                if self.wants(*x) {
                    let nf = T::from_usize(n).unwrap();
                    let mut d = Vec::with_capacity(g.len());
                    for ((gr, hr), &is) in g.chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            d.push(is * (dh - s1 / nf - hr[j] * s2 / nf));
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.wants(*gamma) {
                    let mut d = vec![T::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, d);
                }
                if self.wants(*beta) {
                    let mut d = vec![T::zero(); n];
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            d[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *beta, d);
                }
            }
            Op::BceWithLogits { logits, target } => {
                let scale = g[0] / T::from_usize(target.len()).unwrap();
                let d = self
                    .data(*logits)
                    .iter()
                    .zip(target)
                    .map(|(&x, &t)| (sigmoid(x) - t) * scale)
                    .collect();
                self.accumulate(grads, *logits, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = g[0] / T::from_usize(n).unwrap();
                self.accumulate(grads, *a, vec![v; n]);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, transpose(g, n, m));
            }
            Op::Concat {
                inputs,
                outer,
                blocks,
            } => {
                let total: usize = blocks.iter().sum();
                let mut start = 0;
                for (&v, &blk) in inputs.iter().zip(blocks) {
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * blk);
                        for o in 0..*outer {
                            d.extend_from_slice(&g[o * total + start..o * total + start + blk]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    start += blk;
                }
            }
            Op::Slice {
                a,
                outer,
                in_block,
                offset,
                out_block,
            } => {
                let mut d = vec![T::zero(); outer * in_block];
                for o in 0..*outer {
                    d[o * in_block + offset..o * in_block + offset + out_block]
                        .copy_from_slice(&g[o * out_block..(o + 1) * out_block]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows { a, idx } => {
                let n = self.shape(*a)[1];
                let mut d = vec![T::zero(); self.value(*a).numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[src * n + j] += g[r * n + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d {
                x,
                w,
                b,
                n,
                c,
                o,
                geom,
                cols,
            } => {
                let np = n * geom.out_pixels();
                let ckk = c * geom.patch();
                let gmat = conv::batch_to_channel_major(g, *n, *o, geom.out_pixels());
                if self.wants(*w) {
                    let mut d = vec![T::zero(); o * ckk];
                    gemm(*o, np, ckk, &gmat, false, cols, true, T::zero(), &mut d);
                    self.accumulate(grads, *w, d);
                }
                if self.wants(*b) {
                    let d = gmat.chunks(np).map(|row| row.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, d);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); ckk * np];
                    gemm(ckk, *o, np, self.data(*w), true, &gmat, false, T::zero(), &mut dcols);
                    self.accumulate(grads, *x, conv::col2im(&dcols, *n, *c, geom));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                n,
                c,
                o,
                geom,
                xmat,
            } => {
                let small = n * geom.out_pixels();
                let okk = o * geom.patch();
                let gcols = conv::im2col(g, *n, *o, geom);
                if self.wants(*w) {
                    let mut d = vec![T::zero(); c * okk];
                    gemm(*c, small, okk, xmat, false, &gcols, true, T::zero(), &mut d);
                    self.accumulate(grads, *w, d);
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); *o];
                    for (plane, chunk) in g.chunks(geom.in_pixels()).enumerate() {
                        d[plane % o] += chunk.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, *b, d);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); c * small];
                    gemm(*c, okk, small, self.data(*w), false, &gcols, false, T::zero(), &mut dx);
                    let dx = conv::channel_major_to_batch(&dx, *n, *c, geom.out_pixels());
                    self.accumulate(grads, *x, dx);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn transpose<T: Real>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}
