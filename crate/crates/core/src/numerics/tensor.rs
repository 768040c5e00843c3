use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("zero-sized axis in {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged or empty rows"));
        }
        Ok(Self::from_parts(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        ))
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::of(rng.gen_range(lo..hi))).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Rows and columns of a matrix view (leading axes folded into rows).
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        let (_, c) = self.rows_cols();
        self.data[i * c + j]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| G::of(x.f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, x| m.max(x.abs()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x.f64() * x.f64()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: F) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim(
                "transpose",
                format!("rank-2 expected, got {:?}", self.shape),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn matmul(&self, b: &Self) -> Result<Self> {
        if self.rank() != 2 || b.rank() != 2 || self.shape[1] != b.shape[0] {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape, b.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&self.data, &b.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Log-softmax along the last axis (the only axis the encoder and losses use).
    pub fn log_softmax(&self) -> Self {
        let (_, c) = self.rows_cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        Self::from_parts(self.shape.clone(), out)
    }

    pub fn softmax(&self) -> Self {
        let mut t = self.log_softmax();
        for x in &mut t.data {
            *x = x.exp();
        }
        t
    }

    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: F) -> Result<Self> {
        Ok(layer_norm_forward(self, gain, bias, eps)?.0)
    }

    pub fn conv2d(&self, kernel: &Self, stride: (usize, usize)) -> Result<Self> {
        let geom = Conv2dGeometry::new(self.shape(), kernel.shape(), stride)?;
        Ok(geom.forward(self, kernel))
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_bt_acc<F: Real>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    n: usize,
    k: usize,
) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_acc<F: Real>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn log_softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut s = F::zero();
    for &x in row.iter() {
        s += (x - max).exp();
    }
    let lse = max + s.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Returns the normalized output plus the per-row `x̂` and `1/σ` needed by the backward pass.
pub(crate) fn layer_norm_forward<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    if eps <= F::zero() {
        return Err(Error::arg("layer_norm eps must be positive"));
    }
    let (rows, d) = x.rows_cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "gain/bias length {}/{} vs last dim {d}",
                gain.numel(),
                bias.numel()
            ),
        ));
    }
    let df = F::of(d as f64);
    let mut out = vec![F::zero(); rows * d];
    let mut xhat = vec![F::zero(); rows * d];
    let mut inv_std = vec![F::zero(); rows];
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let mean = xs.iter().copied().sum::<F>() / df;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
        let is = F::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (xs[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), xhat, inv_std))
}

/// Same-padded strided 2-D convolution over a `T×F×C_in` input with a
/// `k_t×k_f×C_in×C_out` kernel. Output length per axis is `ceil(in/stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_t: usize,
    pub in_f: usize,
    pub c_in: usize,
    pub k_t: usize,
    pub k_f: usize,
    pub c_out: usize,
    pub stride: (usize, usize),
    pub out_t: usize,
    pub out_f: usize,
    pub pad_t: usize,
    pub pad_f: usize,
}

pub fn same_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

impl Conv2dGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: (usize, usize)) -> Result<Self> {
        if x.len() != 3 || k.len() != 4 {
            return Err(Error::dim("conv2d", format!("input {x:?} kernel {k:?}")));
        }
        if k.contains(&0) {
            return Err(Error::arg("conv2d kernel has a zero-sized axis"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::arg("conv2d stride must be positive"));
        }
        if k[2] != x[2] {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", k[2], x[2]),
            ));
        }
        let out_t = same_out_len(x[0], stride.0);
        let out_f = same_out_len(x[1], stride.1);
        let pad_total =
            |out: usize, s: usize, kk: usize, inp: usize| ((out - 1) * s + kk).saturating_sub(inp);
        Ok(Self {
            in_t: x[0],
            in_f: x[1],
            c_in: x[2],
            k_t: k[0],
            k_f: k[1],
            c_out: k[3],
            stride,
            out_t,
            out_f,
            pad_t: pad_total(out_t, stride.0, k[0], x[0]) / 2,
            pad_f: pad_total(out_f, stride.1, k[1], x[1]) / 2,
        })
    }

    fn src(&self, o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < len).then_some(p)
    }

    pub fn forward<F: Real>(&self, x: &Tensor<F>, kernel: &Tensor<F>) -> Tensor<F> {
        let (ci, co) = (self.c_in, self.c_out);
        let mut out = vec![F::zero(); self.out_t * self.out_f * co];
        for ot in 0..self.out_t {
            for of in 0..self.out_f {
                let o = &mut out[(ot * self.out_f + of) * co..][..co];
                for i in 0..self.k_t {
                    let Some(t) = self.src(ot, i, self.stride.0, self.pad_t, self.in_t) else {
                        continue;
                    };
                    for j in 0..self.k_f {
                        let Some(f) = self.src(of, j, self.stride.1, self.pad_f, self.in_f) else {
                            continue;
                        };
                        let xs = &x.data()[(t * self.in_f + f) * ci..][..ci];
                        let ks = &kernel.data()[(i * self.k_f + j) * ci * co..][..ci * co];
                        for (c, &xv) in xs.iter().enumerate() {
                            if xv == F::zero() {
                                continue;
                            }
                            for (ov, &kv) in o.iter_mut().zip(&ks[c * co..(c + 1) * co]) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![self.out_t, self.out_f, co], out)
    }

    pub fn backward<F: Real>(
        &self,
        x: &Tensor<F>,
        kernel: &Tensor<F>,
        grad_out: &Tensor<F>,
    ) -> (Tensor<F>, Tensor<F>) {
        let (ci, co) = (self.c_in, self.c_out);
        let mut gx = vec![F::zero(); x.numel()];
        let mut gk = vec![F::zero(); kernel.numel()];
        for ot in 0..self.out_t {
            for of in 0..self.out_f {
                let go = &grad_out.data()[(ot * self.out_f + of) * co..][..co];
                for i in 0..self.k_t {
                    let Some(t) = self.src(ot, i, self.stride.0, self.pad_t, self.in_t) else {
                        continue;
                    };
                    for j in 0..self.k_f {
                        let Some(f) = self.src(of, j, self.stride.1, self.pad_f, self.in_f) else {
                            continue;
                        };
                        let xoff = (t * self.in_f + f) * ci;
                        let koff = (i * self.k_f + j) * ci * co;
                        for c in 0..ci {
                            let xv = x.data()[xoff + c];
                            let krow = &kernel.data()[koff + c * co..][..co];
                            let mut s = F::zero();
                            for (&g, &kv) in go.iter().zip(krow) {
                                s += g * kv;
                            }
                            gx[xoff + c] += s;
                            let gkrow = &mut gk[koff + c * co..][..co];
                            for (gkv, &g) in gkrow.iter_mut().zip(go) {
                                *gkv += xv * g;
                            }
                        }
                    }
                }
            }
        }
        (
            Tensor::from_parts(x.shape().to_vec(), gx),
            Tensor::from_parts(kernel.shape().to_vec(), gk),
        )
    }
}
