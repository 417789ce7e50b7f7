//! Dense f32 tensor and the handful of kernels the transformer and the
//! similarity heads are built from.
//!
//! Everything here is a pure function of its inputs. Tensors are row-major
//! with rank at most 4; most callers work with rank-2 `[rows × cols]` data.

use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 4;
pub const DEFAULT_NORM_EPS: f32 = 1e-8;
pub const DEFAULT_LN_EPS: f32 = 1e-5;

/// Dense row-major array of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return shape_err(format!("rank {} not in 1..={MAX_RANK}", shape.len()));
    }
    if shape.contains(&0) {
        return shape_err(format!("zero extent in {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len().max(1);
        let mut data = data;
        data.resize(n, 0.0);
        Self {
            shape: vec![n],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Number of rows of a rank-2 tensor (or 1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.data.len() / self.cols(),
        }
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() != 2 || start >= end || end > self.rows() {
            return shape_err(format!("row slice {start}..{end} of {:?}", self.shape));
        }
        let c = self.cols();
        Self::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("add {:?} + {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("add {:?} + {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `[n × k] · [k × m] → [n × m]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return shape_err(format!("matmul {:?} · {:?}", self.shape, rhs.shape));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b = &rhs.data[p * m..(p + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Self::new(vec![n, m], out)
    }

    /// `x · W + b` with `W: [in × out]`, `b: [out]`.
    pub fn affine(&self, weight: &Tensor, bias: &Tensor) -> Result<Self> {
        let mut y = self.matmul(weight)?;
        if bias.len() != y.cols() {
            return shape_err(format!(
                "bias of length {} for width {}",
                bias.len(),
                y.cols()
            ));
        }
        let c = y.cols();
        for row in y.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return shape_err("transpose needs rank 2");
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Head layout for multi-head attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_k: usize,
}

impl AttentionConfig {
    pub fn new(width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            d_k: width / heads,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.d_k
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn softmax_slice(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.clone();
    let mut buf = vec![0.0f32; n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x.data[(o * n + k) * inner + i];
            }
            softmax_slice(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                out.data[(o * n + k) * inner + i] = *b;
            }
        }
    }
    Ok(out)
}

/// Scales every slice along `axis` to unit L2 norm. Slices whose norm is
/// below `eps` are returned unchanged.
pub fn l2_normalize(x: &Tensor, axis: usize, eps: f32) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let norm = (0..n)
                .map(|k| {
                    let v = x.data[idx(k)];
                    v * v
                })
                .sum::<f32>()
                .sqrt();
            if norm < eps {
                continue;
            }
            for k in 0..n {
                out.data[idx(k)] = x.data[idx(k)] / norm;
            }
        }
    }
    Ok(out)
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two equal-length vectors, clamped to `[-1, 1]`.
/// A zero vector has similarity 0 with everything.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() || a.is_empty() {
        return shape_err(format!("cosine of lengths {} and {}", a.len(), b.len()));
    }
    let denom = norm(a) * norm(b);
    if denom < DEFAULT_NORM_EPS {
        return Ok(0.0);
    }
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

fn attention_impl(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: AttentionConfig,
    causal: bool,
) -> Result<Tensor> {
    let width = cfg.width();
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 2 || t.cols() != width {
            return shape_err(format!(
                "attention {name} has shape {:?}, expected [T × {width}]",
                t.shape()
            ));
        }
    }
    let t = q.rows();
    if k.rows() != t || v.rows() != t {
        return shape_err(format!(
            "attention token counts {} / {} / {}",
            t,
            k.rows(),
            v.rows()
        ));
    }
    let scale = 1.0 / (cfg.d_k as f32).sqrt();
    let mut out = vec![0.0f32; t * width];
    let mut scores = vec![0.0f32; t];
    for h in 0..cfg.heads {
        let lo = h * cfg.d_k;
        let hi = lo + cfg.d_k;
        for i in 0..t {
            let qi = &q.row(i)[lo..hi];
            let visible = if causal { i + 1 } else { t };
            for (j, s) in scores[..visible].iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[lo..hi]) * scale;
            }
            softmax_slice(&mut scores[..visible]);
            let o = &mut out[i * width + lo..i * width + hi];
            for (j, &p) in scores[..visible].iter().enumerate() {
                for (ov, &vv) in o.iter_mut().zip(&v.row(j)[lo..hi]) {
                    *ov += p * vv;
                }
            }
        }
    }
    Tensor::new(vec![t, width], out)
}

/// Multi-head scaled dot-product attention over `[T × C]` inputs.
///
/// Passing the same tensor as `q`, `k` and `v` gives value-value attention.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: AttentionConfig) -> Result<Tensor> {
    attention_impl(q, k, v, cfg, false)
}

/// Attention where token `i` only sees tokens `0..=i`.
pub fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: AttentionConfig,
) -> Result<Tensor> {
    attention_impl(q, k, v, cfg, true)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return shape_err(format!(
            "layer norm width {c} with gamma {} / beta {}",
            gamma.len(),
            beta.len()
        ));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Tanh-approximation GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}
