use super::kernels::{self, matmul_nt_into, matmul_tn_into};
use super::{dims2, numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    L2NormLast(Var),
    CosineRows {
        a: Var,
        b: Var,
        eps: S,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended as operations run; a node only ever references nodes
/// created before it, so iterating indices in reverse is a reverse
/// topological order and backward visits each node exactly once.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and is
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor {
            shape: x.shape().to_vec(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("div", a, b, |p, q| p / q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn row_broadcast(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let n = last_dim(self.shape(x));
        if self.shape(b) != [n] {
            return Err(Error::shape(
                op,
                format!("row vector {:?} against {:?}", self.shape(b), self.shape(x)),
            ));
        }
        Ok(n)
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over leading axes.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.row_broadcast("add_row", x, b)?;
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[..., n] * g[n]`, broadcasting `g` over leading axes.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.row_broadcast("mul_row", x, g)?;
        let gain = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &gv) in row.iter_mut().zip(&gain) {
                *o *= gv;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, Op::MulRow(x, g), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(a))?;
        let src = self.value(a).data();
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = last_dim(x.shape());
        let mut out = Tensor::zeros(x.shape().to_vec());
        for (src, dst) in x.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            kernels::softmax_row(src, dst);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let d = self.row_broadcast("layer_norm", x, gamma)?;
        self.row_broadcast("layer_norm", x, beta)?;
        let xv = self.value(x);
        let rows = xv.len() / d;
        let dn = S::lit(d as f64);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let mean = src.iter().copied().sum::<S>() / dn;
            let mut var = S::zero();
            for &v in src {
                var += (v - mean) * (v - mean);
            }
            var /= dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(src) {
                *h = (v - mean) * inv;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks(d) {
            for ((&h, &gv), &bv) in row.iter().zip(g).zip(b) {
                out.push(h * gv + bv);
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let mut data = Vec::with_capacity(numel(&out_shape));
        let src = self.value(x).data();
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let ln = S::lit(len as f64);
        for v in &mut data {
            *v /= ln;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Mean { x, axis },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<S>() / S::lit(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = last_dim(v.shape());
        let data: Vec<S> = v.data().chunks(n).map(|r| kernels::sum_sq(r).sqrt()).collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::L2NormLast(x), rg)
    }

    /// Cosine similarity between matching rows (last axis), with the
    /// denominator floored at `eps`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: S) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let n = last_dim(self.shape(a));
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<S> = av
            .data()
            .chunks(n)
            .zip(bv.data().chunks(n))
            .map(|(x, y)| kernels::cosine(x, y, eps))
            .collect();
        let mut shape = av.shape().to_vec();
        shape.pop();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::CosineRows { a, b, eps }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        let loss_shape = self.shape(loss);
        if numel(loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape.to_vec(), S::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves that asked for gradients are reported.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(bv) {
                        *x += y * o;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(av) {
                        *x += y * o;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((x, &y), &q) in d.iter_mut().zip(gd).zip(bv) {
                        *x += y / q;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (((x, &y), &p), &q) in d.iter_mut().zip(gd).zip(av).zip(bv) {
                        *x -= y * p / (q * q);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y * *c));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
            }
            Op::AddRow(x, b) => {
                let n = self.shape(*b)[0];
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(p, &q)| *p += q));
                self.accumulate(grads, *b, |d| {
                    for row in gd.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(p, &q)| *p += q);
                    }
                });
            }
            Op::MulRow(x, w) => {
                let n = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(gd.chunks(n)) {
                        for ((p, &q), &s) in drow.iter_mut().zip(grow).zip(wv) {
                            *p += q * s;
                        }
                    }
                });
                self.accumulate(grads, *w, |d| {
                    for (grow, xrow) in gd.chunks(n).zip(xv.chunks(n)) {
                        for ((p, &q), &s) in d.iter_mut().zip(grow).zip(xrow) {
                            *p += q * s;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| matmul_nt_into(gd, bv, d, m, k, n));
                self.accumulate(grads, *b, |d| matmul_tn_into(av, gd, d, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((x, &y), &v) in d.iter_mut().zip(gd).zip(av) {
                        *x += y * kernels::gelu_grad(v);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                self.accumulate(grads, *a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(gd.chunks(n)).zip(y.chunks(n)) {
                        let s = kernels::dot(grow, yrow);
                        for ((p, &q), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *p += yy * (q - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d_model = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                let dn = S::lit(d_model as f64);
                self.accumulate(grads, *gamma, |d| {
                    for (grow, hrow) in gd.chunks(d_model).zip(xhat.chunks(d_model)) {
                        for ((p, &q), &h) in d.iter_mut().zip(grow).zip(hrow) {
                            *p += q * h;
                        }
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for grow in gd.chunks(d_model) {
                        d.iter_mut().zip(grow).for_each(|(p, &q)| *p += q);
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let mut dh = vec![S::zero(); d_model];
                    for (r, ((drow, grow), hrow)) in d
                        .chunks_mut(d_model)
                        .zip(gd.chunks(d_model))
                        .zip(xhat.chunks(d_model))
                        .enumerate()
                    {
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for j in 0..d_model {
                            dh[j] = grow[j] * gv[j];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * hrow[j];
                        }
                        let scale = inv_std[r] / dn;
                        for j in 0..d_model {
                            drow[j] += scale * (dn * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    self.accumulate(grads, v, |d| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(p, &q)| *p += q);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let width = node.value.shape()[*axis];
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        let src = &gd[o * width * inner..(o + 1) * width * inner];
                        d[base..base + width * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, &q)| *p += q);
                    }
                });
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let ln = S::lit(len as f64);
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                d[base + i] += gd[o * inner + i] / ln;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|p| *p += g0));
            }
            Op::MeanAll(x) => {
                let g0 = gd[0] / S::lit(self.value(*x).len() as f64);
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|p| *p += g0));
            }
            Op::L2NormLast(x) => {
                let xv = self.value(*x).data();
                let norms = node.value.data();
                let n = last_dim(self.shape(*x));
                self.accumulate(grads, *x, |d| {
                    for (r, (drow, xrow)) in d.chunks_mut(n).zip(xv.chunks(n)).enumerate() {
                        if norms[r] > S::zero() {
                            let s = gd[r] / norms[r];
                            drow.iter_mut().zip(xrow).for_each(|(p, &q)| *p += s * q);
                        }
                    }
                });
            }
            Op::CosineRows { a, b, eps } => {
                let n = last_dim(self.shape(*a));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let cos = node.value.data();
                // d cos / d self given the other side.
                let side = |this: &[S], other: &[S], d: &mut [S]| {
                    for (r, ((drow, x), y)) in d
                        .chunks_mut(n)
                        .zip(this.chunks(n))
                        .zip(other.chunks(n))
                        .enumerate()
                    {
                        let xx = kernels::sum_sq(x);
                        let yy = kernels::sum_sq(y);
                        let den = (xx * yy).sqrt();
                        if den > *eps {
                            let c = cos[r];
                            for ((p, &xi), &yi) in drow.iter_mut().zip(x).zip(y) {
                                *p += gd[r] * (yi / den - c * xi / xx);
                            }
                        } else {
                            for (p, &yi) in drow.iter_mut().zip(y) {
                                *p += gd[r] * yi / *eps;
                            }
                        }
                    }
                };
                self.accumulate(grads, *a, |d| side(av, bv, d));
                self.accumulate(grads, *b, |d| side(bv, av, d));
            }
        }
    }
}
