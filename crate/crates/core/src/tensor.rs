//! Dense row-major `f64` tensors and the small kernel set the simulator needs.
//!
//! Every kernel here is a pure function with a fixed floating-point evaluation
//! order, so two calls on identical inputs give bit-identical outputs.
//!
//! Summation order contract:
//! - `matmul`: each output element starts at `0.0` and accumulates
//!   `a[i][k] * b[k][j]` for `k = 0, 1, ..` in ascending order.
//! - row reductions (softmax denominators, layer-norm moments) accumulate
//!   left to right.
//! - `conv2d`: each output pixel starts at `0.0` and accumulates over
//!   `(c_in, ky, kx)` in lexicographic order, with padded positions
//!   contributing `w * 0.0`.
//!
//! Row-wise kernels therefore compute row `i` of their output identically no
//! matter how many other rows the input carries. The parallel strategies rely
//! on this to stay bit-exact when they shard along the sequence dimension.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Size in bytes of the payload at the given element width.
    pub fn bytes(&self, element_size: usize) -> u64 {
        (self.data.len() * element_size) as u64
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(mismatch("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Invalid {
                op,
                msg: format!("expected a 2-D tensor, got {:?}", self.shape),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            0
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Contiguous row range `[range.start, range.end)` of a 2-D tensor.
    pub fn slice_rows(&self, range: Range<usize>) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![range.len(), c],
            data: self.data[range.start * c..range.end * c].to_vec(),
        }
    }

    /// Rows at the given indices, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Writes `src` row `k` into row `idx[k]` of `self`.
    pub fn scatter_rows(&mut self, idx: &[usize], src: &Tensor) -> Result<()> {
        let c = self.cols();
        if src.cols() != c || src.rows() != idx.len() {
            return Err(mismatch("scatter_rows", &self.shape, &src.shape));
        }
        for (k, &i) in idx.iter().enumerate() {
            self.data[i * c..(i + 1) * c].copy_from_slice(src.row(k));
        }
        Ok(())
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let w = range.len();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + range.start..i * c + range.end]);
        }
        Tensor {
            shape: vec![r, w],
            data,
        }
    }

    pub fn set_cols(&mut self, start: usize, src: &Tensor) -> Result<()> {
        let (r, c) = (self.rows(), self.cols());
        if src.rows() != r || start + src.cols() > c {
            return Err(mismatch("set_cols", &self.shape, &src.shape));
        }
        let w = src.cols();
        for i in 0..r {
            self.data[i * c + start..i * c + start + w].copy_from_slice(src.row(i));
        }
        Ok(())
    }

    /// Slice of a 1-D tensor.
    pub fn slice_vec(&self, range: Range<usize>) -> Tensor {
        Tensor::vector(self.data[range].to_vec())
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.shape.len() != 2 || p.cols() != c {
                return Err(mismatch("concat_rows", &parts[0].shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, c],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let r = parts.first().map_or(0, |t| t.rows());
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut at = 0;
        for p in parts {
            if p.rows() != r {
                return Err(mismatch("concat_cols", &parts[0].shape, &p.shape));
            }
            out.set_cols(at, p)?;
            at += p.cols();
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(mismatch(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(mismatch("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_row_vector")?;
        if v.len() != c {
            return Err(mismatch("add_row_vector", &self.shape, &v.shape));
        }
        let mut out = self.clone();
        for i in 0..r {
            for (o, b) in out.data[i * c..(i + 1) * c].iter_mut().zip(&v.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row_vector(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("mul_row_vector")?;
        if v.len() != c {
            return Err(mismatch("mul_row_vector", &self.shape, &v.shape));
        }
        let mut out = self.clone();
        for i in 0..r {
            for (o, b) in out.data[i * c..(i + 1) * c].iter_mut().zip(&v.data) {
                *o *= b;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(mismatch("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max|self - reference| / max|reference|` (absolute when the reference is zero).
    pub fn rel_err(&self, reference: &Tensor) -> Result<f64> {
        let d = self.max_abs_diff(reference)?;
        let s = reference.max_abs();
        Ok(if s > 0.0 { d / s } else { d })
    }

    pub fn l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bitwise equality (distinguishes `0.0` from `-0.0`, treats NaN payloads exactly).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `a[m,k] · b[k,n]` with k-innermost accumulation in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(mismatch("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    // i-k-j order: every out[i][j] still receives its k terms in ascending k,
    // so the result matches the textbook triple loop bit for bit.
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `x · w + b` (matmul first, bias added afterwards).
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(x, w)?.add_row_vector(b)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2("softmax_rows")?;
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data[i * c..(i + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Online-softmax state for a block of query rows.
///
/// Merging key/value blocks in any order and then finalizing reproduces
/// `softmax(q kᵀ · scale) v` up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxAccumulator {
    pub running_max: Vec<f64>,
    pub running_denominator: Vec<f64>,
    /// `[rows, d]`, unnormalized.
    pub running_numerator: Tensor,
    scale: f64,
}

impl SoftmaxAccumulator {
    pub fn new(rows: usize, d: usize, scale: f64) -> Self {
        Self {
            running_max: vec![f64::NEG_INFINITY; rows],
            running_denominator: vec![0.0; rows],
            running_numerator: Tensor::zeros(&[rows, d]),
            scale,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.running_max.iter().all(|m| *m == f64::NEG_INFINITY)
    }

    pub fn finalize(&self) -> Tensor {
        let mut out = self.running_numerator.clone();
        let d = out.cols();
        for (i, &l) in self.running_denominator.iter().enumerate() {
            for v in &mut out.data[i * d..(i + 1) * d] {
                *v /= l;
            }
        }
        out
    }
}

/// Folds one key/value block into the accumulator.
pub fn streaming_attention_merge(
    mut acc: SoftmaxAccumulator,
    q: &Tensor,
    k_block: &Tensor,
    v_block: &Tensor,
) -> Result<SoftmaxAccumulator> {
    let (rows, d) = q.dims2("streaming_attention_merge")?;
    let (kr, kd) = k_block.dims2("streaming_attention_merge")?;
    let (vr, vd) = v_block.dims2("streaming_attention_merge")?;
    if kd != d || kr != vr || rows != acc.running_max.len() || vd != acc.running_numerator.cols() {
        return Err(mismatch("streaming_attention_merge", &q.shape, &k_block.shape));
    }
    if kr == 0 {
        return Ok(acc);
    }
    let mut s = matmul(q, &k_block.transpose()?)?;
    for v in &mut s.data {
        *v *= acc.scale;
    }
    let first = acc.is_empty();
    let mut block_max = vec![0.0; rows];
    for i in 0..rows {
        let row = &s.data[i * kr..(i + 1) * kr];
        let bm = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        block_max[i] = if first { bm } else { acc.running_max[i].max(bm) };
    }
    let mut l_block = vec![0.0; rows];
    for i in 0..rows {
        let m = block_max[i];
        let row = &mut s.data[i * kr..(i + 1) * kr];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        l_block[i] = sum;
    }
    let pv = matmul(&s, v_block)?;
    if first {
        acc.running_max = block_max;
        acc.running_denominator = l_block;
        acc.running_numerator = pv;
        return Ok(acc);
    }
    for i in 0..rows {
        let alpha = (acc.running_max[i] - block_max[i]).exp();
        acc.running_denominator[i] = acc.running_denominator[i] * alpha + l_block[i];
        let num = &mut acc.running_numerator.data[i * vd..(i + 1) * vd];
        for (n, p) in num.iter_mut().zip(&pv.data[i * vd..(i + 1) * vd]) {
            *n = *n * alpha + p;
        }
        acc.running_max[i] = block_max[i];
    }
    Ok(acc)
}

/// Full (non-causal) scaled dot-product attention.
///
/// Implemented as a single-block streaming pass so that ring attention over a
/// single device reproduces it bit for bit.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    let (rows, d) = q.dims2("attention")?;
    let (kr, kd) = k.dims2("attention")?;
    let (vr, vd) = v.dims2("attention")?;
    if kd != d || kr != vr {
        return Err(mismatch("attention", &q.shape, &k.shape));
    }
    if !(scale > 0.0) {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("scale must be positive, got {scale}"),
        });
    }
    let acc = SoftmaxAccumulator::new(rows, vd, scale);
    Ok(streaming_attention_merge(acc, q, k, v)?.finalize())
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = x.dims2("layer_norm")?;
    if gain.len() != c || bias.len() != c {
        return Err(mismatch("layer_norm", &x.shape, &gain.shape));
    }
    let mut out = x.clone();
    let n = c as f64;
    for i in 0..r {
        let row = &mut out.data[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    Ok(out)
}

/// tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    x.map(|v| 0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh()))
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v / (1.0 + (-v).exp()))
}

fn conv_dims(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (ci, h, w) = match x.shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(mismatch("conv2d", &x.shape, &kernel.shape)),
    };
    let (co, kci, kh, kw) = match kernel.shape.as_slice() {
        [a, b, c, d] => (*a, *b, *c, *d),
        _ => return Err(mismatch("conv2d", &x.shape, &kernel.shape)),
    };
    if kci != ci || kh != kw {
        return Err(mismatch("conv2d", &x.shape, &kernel.shape));
    }
    if kh % 2 == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!("kernel size must be odd, got {kh}"),
        });
    }
    Ok((ci, h, w, co, kh))
}

/// Output rows `out_rows` of a zero-padded "same" convolution.
///
/// `x` holds input rows starting at global row `x_row0`; rows outside
/// `[0, global_h)` are read as zeros. Every row needed inside the padded
/// window must be present in `x` or fall outside the global image.
pub(crate) fn conv2d_rows(
    x: &Tensor,
    x_row0: isize,
    global_h: usize,
    kernel: &Tensor,
    out_rows: Range<usize>,
) -> Result<Tensor> {
    let (ci, xh, w, co, k) = conv_dims(x, kernel)?;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; co * out_rows.len() * w];
    let oh = out_rows.len();
    for o in 0..co {
        for (yy, y) in out_rows.clone().enumerate() {
            for xx in 0..w {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        let gy = y as isize + ky as isize - pad;
                        let local = gy - x_row0;
                        let row_ok = gy >= 0 && (gy as usize) < global_h;
                        if row_ok && (local < 0 || local as usize >= xh) {
                            return Err(TensorError::Invalid {
                                op: "conv2d_rows",
                                msg: format!("input row {gy} not present in band"),
                            });
                        }
                        for kx in 0..k {
                            let gx = xx as isize + kx as isize - pad;
                            let wv = kernel.data[((o * ci + c) * k + ky) * k + kx];
                            let xv = if row_ok && gx >= 0 && (gx as usize) < w {
                                x.data[(c * xh + local as usize) * w + gx as usize]
                            } else {
                                0.0
                            };
                            acc += wv * xv;
                        }
                    }
                }
                out[(o * oh + yy) * w + xx] = acc;
            }
        }
    }
    Ok(Tensor {
        shape: vec![co, oh, w],
        data: out,
    })
}

/// Zero-padded same-size 2-D convolution, `x: [c_in,h,w]`, `kernel: [c_out,c_in,k,k]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (_, h, _, _, _) = conv_dims(x, kernel)?;
    conv2d_rows(x, 0, h, kernel, 0..h)
}
