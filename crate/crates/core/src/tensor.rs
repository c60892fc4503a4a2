//! Dense row-major tensors and the two bilinear operators offloaded to the
//! untrusted context.
//!
//! Every linear layer in the engine is expressed as a [`BilinearOp`] applied
//! to a weight tensor and an activation. Bilinearity in the activation is
//! what lets blinded inputs be unblinded after the product, so the operators
//! here are plain and exact: no fused activations and no bias terms. Dense
//! layers fold their bias into the weight matrix through an augmented input.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking `product(shape) == data.len()` and that
    /// every scalar is finite. An empty shape is a scalar with one entry.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} scalars, got {}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged matrix rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Entry `(i, j)` of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose needs a rank-2 tensor"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// `Σ coeffs[i] * tensors[i]`; all tensors must share one shape.
    pub fn linear_combination(coeffs: &[f64], tensors: &[&Tensor]) -> Result<Self> {
        if coeffs.len() != tensors.len() || tensors.is_empty() {
            return Err(Error::dim(format!(
                "{} coefficients for {} tensors",
                coeffs.len(),
                tensors.len()
            )));
        }
        let mut acc = Tensor::zeros(tensors[0].shape());
        for (&c, t) in coeffs.iter().zip(tensors) {
            acc.add_scaled(c, t)?;
        }
        check_finite(&acc.data)?;
        Ok(acc)
    }

    /// Max-abs norm.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// SHA-256 over shape and scalar bits. Used as a taint tag: two tensors
    /// share a fingerprint iff they are bit-identical.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// `‖a − b‖∞ / ‖b‖∞`, with an absolute fallback when `b` is all zero.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error on mismatched shapes");
    let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.max_abs();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::param(format!("non-finite scalar at flat index {pos}")));
    }
    Ok(())
}

/// Matrix product `w[m×n] · x[n×p]`.
pub fn matmul(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() != 2 {
        return Err(Error::dim(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let (m, n) = (w.shape[0], w.shape[1]);
    let (n2, p) = (x.shape[0], x.shape[1]);
    if n != n2 {
        return Err(Error::dim(format!("inner dimensions differ: {m}x{n} · {n2}x{p}")));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let a = w.data[i * n + k];
            if a == 0.0 {
                continue;
            }
            let xr = &x.data[k * p..(k + 1) * p];
            for (o, &b) in row.iter_mut().zip(xr) {
                *o += a * b;
            }
        }
    }
    check_finite(&out)?;
    Ok(Tensor { shape: vec![m, p], data: out })
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: (usize, usize), stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::dim(format!("conv input must be [c,h,w], got {input:?}")));
        }
        if stride == 0 {
            return Err(Error::param("conv stride must be >= 1"));
        }
        let (ci, h, w) = (input[0], input[1], input[2]);
        let (kh, kw) = kernel;
        let out_dim = |n: usize, k: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < k {
                return Err(Error::dim(format!("kernel {k} exceeds padded input {padded}")));
            }
            if !(padded - k).is_multiple_of(stride) {
                return Err(Error::dim(format!(
                    "non-integral conv output: ({n}+2*{pad}-{k})/{stride}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let oh = out_dim(h, kh)?;
        let ow = out_dim(w, kw)?;
        Ok(ConvGeom { ci, h, w, kh, kw, stride, pad, oh, ow })
    }

    fn patch_len(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Input coordinate for output `(oy, ox)` and kernel tap `(a, b)`, or
    /// `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, a: usize, b: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + a).checked_sub(self.pad)?;
        let x = (ox * self.stride + b).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Unfolds `x[c,h,w]` into `[(c·kh·kw) × (oh·ow)]` patch columns.
    fn im2col(&self, x: &[f64]) -> Tensor {
        let cols = self.oh * self.ow;
        let mut out = vec![0.0; self.patch_len() * cols];
        for c in 0..self.ci {
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (c * self.kh + a) * self.kw + b;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, xx)) = self.source(oy, ox, a, b) {
                                out[row * cols + oy * self.ow + ox] =
                                    x[(c * self.h + y) * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        Tensor { shape: vec![self.patch_len(), cols], data: out }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters patch columns back onto the input grid.
    fn col2im(&self, cols_t: &Tensor) -> Tensor {
        let cols = self.oh * self.ow;
        let mut out = vec![0.0; self.ci * self.h * self.w];
        for c in 0..self.ci {
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (c * self.kh + a) * self.kw + b;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, xx)) = self.source(oy, ox, a, b) {
                                out[(c * self.h + y) * self.w + xx] +=
                                    cols_t.data[row * cols + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        Tensor { shape: vec![self.ci, self.h, self.w], data: out }
    }
}

fn kernel_dims(w: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *w {
        [co, ci, kh, kw] => Ok((co, ci, kh, kw)),
        _ => Err(Error::dim(format!("conv kernel must be [co,ci,kh,kw], got {w:?}"))),
    }
}

/// 2-D cross-correlation (no kernel flip): `w[co,ci,kh,kw] ⋆ x[ci,h,w] → [co,h',w']`.
pub fn conv2d(w: &Tensor, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (co, ci, kh, kw) = kernel_dims(w.shape())?;
    let g = ConvGeom::new(x.shape(), (kh, kw), stride, padding)?;
    if g.ci != ci {
        return Err(Error::dim(format!("kernel expects {ci} channels, input has {}", g.ci)));
    }
    let wmat = w.reshape(&[co, g.patch_len()])?;
    let out = matmul(&wmat, &g.im2col(x.data()))?;
    out.reshape(&[co, g.oh, g.ow])
}

/// Gradient of `Σ δ ⊙ conv2d(w, x)` with respect to `w`; bilinear in `(δ, x)`.
pub fn conv2d_weight_grad(
    delta: &Tensor,
    x: &Tensor,
    weight_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (co, ci, kh, kw) = kernel_dims(weight_shape)?;
    let g = ConvGeom::new(x.shape(), (kh, kw), stride, padding)?;
    if g.ci != ci || delta.shape() != [co, g.oh, g.ow] {
        return Err(Error::dim(format!(
            "conv weight grad: delta {:?}, input {:?}, kernel {weight_shape:?}",
            delta.shape(),
            x.shape()
        )));
    }
    let dmat = delta.reshape(&[co, g.oh * g.ow])?;
    let cols_t = g.im2col(x.data()).transpose()?;
    matmul(&dmat, &cols_t)?.reshape(weight_shape)
}

/// Gradient of `Σ δ ⊙ conv2d(w, x)` with respect to `x`; linear in `δ`.
pub fn conv2d_input_grad(
    w: &Tensor,
    delta: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (co, ci, kh, kw) = kernel_dims(w.shape())?;
    let g = ConvGeom::new(input_shape, (kh, kw), stride, padding)?;
    if g.ci != ci || delta.shape() != [co, g.oh, g.ow] {
        return Err(Error::dim(format!(
            "conv input grad: delta {:?}, input {input_shape:?}, kernel {:?}",
            delta.shape(),
            w.shape()
        )));
    }
    let wt = w.reshape(&[co, g.patch_len()])?.transpose()?;
    let dmat = delta.reshape(&[co, g.oh * g.ow])?;
    let cols = matmul(&wt, &dmat)?;
    Ok(g.col2im(&cols))
}

/// The bilinear operator `⟨W, x⟩` of a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BilinearOp {
    /// `W · x`. A rank-1 activation is treated as a column vector and the
    /// result is returned as rank-1 again.
    MatMul,
    Conv2D { stride: usize, padding: usize },
}

impl BilinearOp {
    pub fn validate(&self) -> Result<()> {
        match self {
            BilinearOp::Conv2D { stride: 0, .. } => Err(Error::param("conv stride must be >= 1")),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, w: &Tensor, x: &Tensor) -> Result<Tensor> {
        match *self {
            BilinearOp::MatMul => {
                if x.rank() == 1 {
                    let y = matmul(w, &x.reshape(&[x.numel(), 1])?)?;
                    y.reshape(&[y.numel()])
                } else {
                    matmul(w, x)
                }
            }
            BilinearOp::Conv2D { stride, padding } => conv2d(w, x, stride, padding),
        }
    }

    /// `∂/∂W Σ δ ⊙ ⟨W, x⟩`. For `MatMul` this is the outer product `δ·xᵀ`.
    pub fn weight_grad(&self, delta: &Tensor, x: &Tensor, weight_shape: &[usize]) -> Result<Tensor> {
        let g = match *self {
            BilinearOp::MatMul => {
                let d = as_columns(delta)?;
                let xc = as_columns(x)?;
                matmul(&d, &xc.transpose()?)?
            }
            BilinearOp::Conv2D { stride, padding } => {
                conv2d_weight_grad(delta, x, weight_shape, stride, padding)?
            }
        };
        if g.shape() != weight_shape {
            return Err(Error::dim(format!(
                "weight grad has shape {:?}, weights are {weight_shape:?}",
                g.shape()
            )));
        }
        Ok(g)
    }

    /// `∂/∂x Σ δ ⊙ ⟨W, x⟩`, shaped like the input.
    pub fn input_grad(&self, w: &Tensor, delta: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
        match *self {
            BilinearOp::MatMul => {
                let g = matmul(&w.transpose()?, &as_columns(delta)?)?;
                g.reshape(input_shape)
            }
            BilinearOp::Conv2D { stride, padding } => {
                conv2d_input_grad(w, delta, input_shape, stride, padding)
            }
        }
    }
}

fn as_columns(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        1 => t.reshape(&[t.numel(), 1]),
        2 => Ok(t.clone()),
        _ => Err(Error::dim(format!("matmul operand must be rank 1 or 2, got {:?}", t.shape()))),
    }
}
