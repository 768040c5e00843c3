//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! A [`Graph`] owns every intermediate value. Ops append nodes in evaluation
//! order; [`Graph::backward`] replays them in exact reverse order and
//! accumulates gradients additively into each parent.

use indexmap::IndexMap;
use rand::Rng;

use super::params::ModelParams;
use super::tensor::{
    layer_norm_forward, log_softmax_in_place, matmul_at_acc, matmul_bt_acc, Conv2dGeometry, Real,
    Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Silu(Var),
    Tanh(Var),
    Glu(Var),
    LogSoftmax(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: Conv2dGeometry,
    },
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    MaskRows {
        x: Var,
        emb: Var,
        mask: Vec<bool>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
    OuterAdd(Var, Var),
    /// Scalar-valued op whose input gradient was computed during the forward pass.
    Fused {
        input: Var,
        grad: Tensor<F>,
    },
}

#[derive(Debug)]
struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records the forward computation of one step.
#[derive(Debug, Default)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    bound: IndexMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<F>) -> Tensor<F> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(op, format!("{a:?} vs {b:?}"))
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|&p| self.needs(p));
        self.push(value, op, needs)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Binds a named parameter as a differentiable leaf. Repeated binds of the
    /// same name return the same node.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter {name}")))?;
        let v = self.input(t.cast());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &IndexMap<String, Var> {
        &self.bound
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_check(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let (_, c) = self.value(x).rows_cols();
        if self.value(b).numel() != c {
            return Err(shape_err(op, self.shape(x), self.shape(b)));
        }
        Ok(c)
    }

    /// `x + b` with `b` broadcast along every leading axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.row_check("add_row", x, b)?;
        let mut t = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&bd) {
                *v += bv;
            }
        }
        Ok(self.push_op(t, Op::AddRow(x, b), &[x, b]))
    }

    /// `x ⊙ g` with `g` broadcast along every leading axis.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.row_check("mul_row", x, g)?;
        let mut t = self.value(x).clone();
        let gd = self.value(g).data().to_vec();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &gv) in row.iter_mut().zip(&gd) {
                *v *= gv;
            }
        }
        Ok(self.push_op(t, Op::MulRow(x, g), &[x, g]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push_op(t, Op::Scale(x, c), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` for `x: [..×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = self.value(x).rows_cols();
        let x2 = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, cols])?
        };
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add_row(y, b)?;
        }
        if shape.len() != 2 {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.shape(w)[1];
            y = self.reshape(y, &out_shape)?;
        }
        Ok(y)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push_op(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(F::zero()));
        self.push_op(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push_op(t, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push_op(t, Op::Silu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push_op(t, Op::Tanh(x), &[x])
    }

    /// Gated linear unit over the last axis: first half ⊙ σ(second half).
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (rows, c) = src.rows_cols();
        if c % 2 != 0 {
            return Err(Error::dim("glu", format!("odd last dim {c}")));
        }
        let h = c / 2;
        let mut out = Vec::with_capacity(rows * h);
        for r in 0..rows {
            let row = src.row(r);
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let t = Tensor::from_parts(shape, out);
        Ok(self.push_op(t, Op::Glu(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x).log_softmax();
        self.push_op(t, Op::LogSoftmax(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x).softmax();
        self.push_op(t, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (t, xhat, inv_std) =
            layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: (usize, usize)) -> Result<Var> {
        let geom = Conv2dGeometry::new(self.shape(x), self.shape(kernel), stride)?;
        let t = geom.forward(self.value(x), self.value(kernel));
        Ok(self.push_op(t, Op::Conv2d { x, kernel, geom }, &[x, kernel]))
    }

    /// Same-padded depthwise convolution along time: `x: [T×d]`, `kernel: [K×d]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() != 2 || ks.len() != 2 || xs[1] != ks[1] {
            return Err(shape_err("depthwise_conv1d", xs, ks));
        }
        let (t_len, d, k) = (xs[0], xs[1], ks[0]);
        let pad = (k - 1) / 2;
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![F::zero(); t_len * d];
        for t in 0..t_len {
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                let o = &mut out[t * d..(t + 1) * d];
                for ((ov, &xv), &kw) in o.iter_mut().zip(&xv[src * d..][..d]).zip(&kv[j * d..][..d])
                {
                    *ov += xv * kw;
                }
            }
        }
        let t = Tensor::from_parts(vec![t_len, d], out);
        Ok(self.push_op(t, Op::DepthwiseConv1d { x, kernel }, &[x, kernel]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (rows, c) = src.rows_cols();
        if src.rank() != 2 || start + len > c || len == 0 {
            return Err(Error::dim("slice_cols", format!("{start}+{len} of {c}")));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let t = Tensor::from_parts(vec![rows, len], out);
        Ok(self.push_op(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.shape(xs[0])[0];
        if xs
            .iter()
            .any(|&v| self.value(v).rank() != 2 || self.shape(v)[0] != rows)
        {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let t = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push_op(t, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.value(xs[0]).rows_cols().1;
        if xs.iter().any(|&v| self.value(v).rows_cols().1 != cols) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        let rows = out.len() / cols;
        let t = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push_op(t, Op::ConcatRows(xs.to_vec()), xs))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (rows, c) = src.rows_cols();
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim(
                "gather_rows",
                format!("index out of {rows} rows"),
            ));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), c], out);
        Ok(self.push_op(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Flat element gather; output is a vector of `idx.len()` values.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= src.numel()) {
            return Err(Error::dim("gather", "index out of range"));
        }
        let t = Tensor::from_parts(
            vec![idx.len()],
            idx.iter().map(|&i| src.data()[i]).collect(),
        );
        Ok(self.push_op(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Rows where `mask` is set are replaced by the vector `emb`.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool], emb: Var) -> Result<Var> {
        let (rows, c) = self.value(x).rows_cols();
        if mask.len() != rows || self.value(emb).numel() != c {
            return Err(Error::dim(
                "mask_rows",
                format!(
                    "mask {} rows {rows}, emb {} cols {c}",
                    mask.len(),
                    self.value(emb).numel()
                ),
            ));
        }
        let mut t = self.value(x).clone();
        let e = self.value(emb).data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                t.data_mut()[r * c..(r + 1) * c].copy_from_slice(&e);
            }
        }
        Ok(self.push_op(
            t,
            Op::MaskRows {
                x,
                emb,
                mask: mask.to_vec(),
            },
            &[x, emb],
        ))
    }

    /// Each row divided by `sqrt(|row|² + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: F) -> Var {
        let src = self.value(x);
        let (rows, c) = src.rows_cols();
        let mut out = src.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in out.chunks_mut(c) {
            let n = (row.iter().map(|&v| v * v).sum::<F>() + eps).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        self.push_op(t, Op::L2NormRows { x, norms }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push_op(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let t = Tensor::scalar(src.sum() / F::of(src.numel() as f64));
        self.push_op(t, Op::Mean(x), &[x])
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let mut acc = *it.next().ok_or_else(|| Error::arg("add_all of nothing"))?;
        for &v in it {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// `out[t,u,:] = a[t,:] + b[u,:]`
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("outer_add", ta.shape(), tb.shape()));
        }
        let (n_a, n_b, h) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
        let mut out = Vec::with_capacity(n_a * n_b * h);
        for i in 0..n_a {
            for j in 0..n_b {
                out.extend(ta.row(i).iter().zip(tb.row(j)).map(|(&x, &y)| x + y));
            }
        }
        let t = Tensor::from_parts(vec![n_a, n_b, h], out);
        Ok(self.push_op(t, Op::OuterAdd(a, b), &[a, b]))
    }

    /// Inverted dropout: zero each entry with probability `p`, scale survivors.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::arg("dropout rate must be < 1"));
        }
        let keep = F::of(1.0 / (1.0 - p));
        let shape = self.shape(x).to_vec();
        let n = self.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    /// Records a scalar op whose gradient w.r.t. `input` is already known.
    pub(crate) fn fused_scalar(&mut self, input: Var, value: F, grad: Tensor<F>) -> Var {
        debug_assert_eq!(grad.shape(), self.shape(input));
        self.push_op(Tensor::scalar(value), Op::Fused { input, grad }, &[input])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn backprop(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out = &node.value;
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<F>| Tensor::from_parts(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*b).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc(grads, *a, like(*a, d));
                }
                if self.needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc(grads, *b, like(*b, d));
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.needs(*b) {
                    let c = val(*b).numel();
                    let mut d = vec![F::zero(); c];
                    for row in g.data().chunks(c) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.acc(grads, *b, like(*b, d));
                }
            }
            Op::MulRow(x, s) => {
                let c = val(*s).numel();
                let sd = val(*s).data();
                if self.needs(*x) {
                    let d = g
                        .data()
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(sd).map(|(&gv, &sv)| gv * sv))
                        .collect();
                    self.acc(grads, *x, like(*x, d));
                }
                if self.needs(*s) {
                    let mut d = vec![F::zero(); c];
                    for (grow, xrow) in g.data().chunks(c).zip(val(*x).data().chunks(c)) {
                        for ((acc, &gv), &xv) in d.iter_mut().zip(grow).zip(xrow) {
                            *acc += gv * xv;
                        }
                    }
                    self.acc(grads, *s, like(*s, d));
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.map(|v| v * *c)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut d = vec![F::zero(); m * k];
                    matmul_bt_acc(g.data(), tb.data(), &mut d, m, n, k);
                    self.acc(grads, *a, like(*a, d));
                }
                if self.needs(*b) {
                    let mut d = vec![F::zero(); k * n];
                    matmul_at_acc(ta.data(), g.data(), &mut d, m, k, n);
                    self.acc(grads, *b, like(*b, d));
                }
            }
            Op::Transpose(x) => self.acc(grads, *x, g.transpose().expect("rank 2")),
            Op::Reshape(x) => self.acc(grads, *x, like(*x, g.data().to_vec())),
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                self.acc(grads, *x, like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (F::one() - y))
                    .collect();
                self.acc(grads, *x, like(*x, d));
            }
            Op::Silu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (F::one() + xv * (F::one() - s))
                    })
                    .collect();
                self.acc(grads, *x, like(*x, d));
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (F::one() - y * y))
                    .collect();
                self.acc(grads, *x, like(*x, d));
            }
            Op::Glu(x) => {
                let src = val(*x);
                let (rows, c) = src.rows_cols();
                let h = c / 2;
                let mut d = vec![F::zero(); rows * c];
                for r in 0..rows {
                    let row = src.row(r);
                    for j in 0..h {
                        let gv = g.data()[r * h + j];
                        let s = sigmoid(row[h + j]);
                        d[r * c + j] = gv * s;
                        d[r * c + h + j] = gv * row[j] * s * (F::one() - s);
                    }
                }
                self.acc(grads, *x, like(*x, d));
            }
            Op::LogSoftmax(x) => {
                let (_, c) = out.rows_cols();
                let mut d = Vec::with_capacity(out.numel());
                for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let s: F = grow.iter().copied().sum();
                    d.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * s));
                }
                self.acc(grads, *x, like(*x, d));
            }
            Op::Softmax(x) => {
                let (_, c) = out.rows_cols();
                let mut d = Vec::with_capacity(out.numel());
                for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let s: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    d.extend(grow.iter().zip(yrow).map(|(&gv, &y)| y * (gv - s)));
                }
                self.acc(grads, *x, like(*x, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, c) = out.rows_cols();
                let gd = val(*gain).data();
                if self.needs(*x) {
                    let cf = F::of(c as f64);
                    let mut d = vec![F::zero(); rows * c];
                    for r in 0..rows {
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..c {
                            let dh = gr[j] * gd[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gd[j];
                            d[r * c + j] = inv_std[r] * (dh - s1 / cf - hr[j] * s2 / cf);
                        }
                    }
                    self.acc(grads, *x, like(*x, d));
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![F::zero(); c];
                    let mut db = vec![F::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            let gv = g.data()[r * c + j];
                            dg[j] += gv * xhat[r * c + j];
                            db[j] += gv;
                        }
                    }
                    self.acc(grads, *gain, like(*gain, dg));
                    self.acc(grads, *bias, like(*bias, db));
                }
            }
            Op::Conv2d { x, kernel, geom } => {
                let (gx, gk) = geom.backward(val(*x), val(*kernel), g);
                self.acc(grads, *x, gx);
                self.acc(grads, *kernel, gk);
            }
            Op::DepthwiseConv1d { x, kernel } => {
                let (t_len, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*kernel)[0];
                let pad = (k - 1) / 2;
                let (xv, kv) = (val(*x).data(), val(*kernel).data());
                let mut gx = vec![F::zero(); t_len * d];
                let mut gk = vec![F::zero(); k * d];
                for t in 0..t_len {
                    let go = &g.data()[t * d..(t + 1) * d];
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for c in 0..d {
                            gx[src * d + c] += go[c] * kv[j * d + c];
                            gk[j * d + c] += go[c] * xv[src * d + c];
                        }
                    }
                }
                self.acc(grads, *x, like(*x, gx));
                self.acc(grads, *kernel, like(*kernel, gk));
            }
            Op::SliceCols { x, start } => {
                let (rows, c) = val(*x).rows_cols();
                let len = out.shape()[1];
                let mut d = vec![F::zero(); rows * c];
                for r in 0..rows {
                    d[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, like(*x, d));
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = out.rows_cols();
                let mut off = 0;
                for &v in xs {
                    let w = self.shape(v)[1];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.acc(grads, v, like(v, d));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = val(v).numel();
                    self.acc(grads, v, like(v, g.data()[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let (rows, c) = val(*x).rows_cols();
                let mut d = vec![F::zero(); rows * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[k * c + j];
                    }
                }
                self.acc(grads, *x, like(*x, d));
            }
            Op::Gather { x, idx } => {
                let mut d = vec![F::zero(); val(*x).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    d[i] += g.data()[k];
                }
                self.acc(grads, *x, like(*x, d));
            }
            Op::MaskRows { x, emb, mask } => {
                let (rows, c) = out.rows_cols();
                let mut dx = g.data().to_vec();
                let mut de = vec![F::zero(); c];
                for r in 0..rows {
                    if mask[r] {
                        for j in 0..c {
                            de[j] += dx[r * c + j];
                            dx[r * c + j] = F::zero();
                        }
                    }
                }
                self.acc(grads, *x, like(*x, dx));
                self.acc(grads, *emb, like(*emb, de));
            }
            Op::L2NormRows { x, norms } => {
                let (_, c) = out.rows_cols();
                let mut d = Vec::with_capacity(out.numel());
                for ((grow, yrow), &n) in g.data().chunks(c).zip(out.data().chunks(c)).zip(norms) {
                    let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    d.extend(grow.iter().zip(yrow).map(|(&gv, &y)| (gv - y * dot) / n));
                }
                self.acc(grads, *x, like(*x, d));
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = F::of(val(*x).numel() as f64);
                self.acc(grads, *x, Tensor::full(self.shape(*x), g.item() / n));
            }
            Op::OuterAdd(a, b) => {
                let (n_a, n_b, h) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let mut da = vec![F::zero(); n_a * h];
                let mut db = vec![F::zero(); n_b * h];
                for i in 0..n_a {
                    for j in 0..n_b {
                        let gs = &g.data()[(i * n_b + j) * h..][..h];
                        for k in 0..h {
                            da[i * h + k] += gs[k];
                            db[j * h + k] += gs[k];
                        }
                    }
                }
                self.acc(grads, *a, like(*a, da));
                self.acc(grads, *b, like(*b, db));
            }
            Op::Fused { input, grad } => {
                let mut d = grad.clone();
                d.scale_assign(g.item());
                self.acc(grads, *input, d);
            }
        }
    }
}

/// Row-wise log-softmax helper exposed for the loss kernels.
pub(crate) fn log_softmax_rows<F: Real>(x: &Tensor<F>) -> Vec<f64> {
    let (_, c) = x.rows_cols();
    let mut out: Vec<f64> = x.data().iter().map(|v| v.f64()).collect();
    for row in out.chunks_mut(c) {
        log_softmax_in_place(row);
    }
    out
}
