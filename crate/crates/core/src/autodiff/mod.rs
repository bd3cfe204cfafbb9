//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape and are addressed through copyable [`Var`] handles; parameters are
//! bound from a [`Params`] store as leaves, and [`Tape::backward`] returns their
//! gradients. A tape can be differentiated once.

mod params;

pub use params::{Gradients, Params, Sgd, CHECKPOINT_MAGIC};

use std::cell::Cell;
use std::collections::HashMap;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether tapes created on this thread can be differentiated.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` with gradient recording disabled on this thread. Tapes created
/// inside refuse [`Tape::backward`].
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape was already differentiated; run a fresh forward pass")]
    TapeConsumed,
    #[error("tape was recorded with gradients disabled")]
    GradDisabled,
    #[error("non-finite value produced by {op}")]
    NumericFailure { op: &'static str },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![v] }
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        cols: Vec<Vec<f64>>,
    },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Grl { x: Var, lambda: f64 },
    GlobalAvgPool(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceChannels { x: Var, start: usize },
    SliceBatch { x: Var, start: usize },
    GatherCells { x: Var, index: Vec<(usize, usize)> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    BceLogits { x: Var, labels: Vec<f64>, weights: Option<Vec<f64>> },
    SoftmaxCe { x: Var, targets: Vec<usize>, probs: Vec<f64> },
    L1 { x: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(AutodiffError::NumericFailure { op })
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// `c (m x n) = beta * c + a (m x k, strides rsa/csa) * b (k x n, strides rsb/csb)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides and extents above address only in-bounds elements of
    // `a`, `b` and `c`, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one image `[C, H, W]` into columns `[C*k*k, Ho*Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, out: &mut [f64]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            img[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, img: &mut [f64]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            img[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    /// A fresh tape; differentiable unless created under [`no_grad`].
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: grad_enabled(),
            consumed: false,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        check_finite("constant", &t)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    /// A differentiable leaf not backed by a parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_finite("leaf", &t)?;
        Ok(self.push(t, Op::Leaf, true))
    }

    /// Binds the named parameter as a differentiable leaf; repeated binds of one
    /// name return the same handle.
    pub fn param(&mut self, params: &Params, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = params.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let v = self.push(t.clone(), Op::Leaf, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// 2D convolution. `input [N, C, H, W]`, `kernel [O, C, k, k]`, `bias [O]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 4 || ks.len() != 4 || ks[1] != is[1] || ks[2] != ks[3] || stride == 0 {
            return Err(mismatch("conv2d", &is, &ks));
        }
        if bs != [ks[0]] {
            return Err(mismatch("conv2d bias", &ks, &bs));
        }
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (o, k) = (ks[0], ks[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch("conv2d", &is, &ks));
        }
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
        let plane = ho * wo;
        let ckk = c * k * k;
        let mut out = vec![0.0; n * o * plane];
        let mut cols = Vec::with_capacity(n);
        {
            let x = &self.nodes[input.0].value.data;
            let kern = &self.nodes[kernel.0].value.data;
            let b = &self.nodes[bias.0].value.data;
            for i in 0..n {
                let mut col = vec![0.0; ckk * plane];
                im2col(&x[i * c * h * w..(i + 1) * c * h * w], c, h, w, k, stride, pad, &mut col);
                let dst = &mut out[i * o * plane..(i + 1) * o * plane];
                for (oc, row) in dst.chunks_mut(plane).enumerate() {
                    row.fill(b[oc]);
                }
                gemm(o, ckk, plane, kern, ckk, 1, &col, plane, 1, 1.0, dst);
                cols.push(col);
            }
        }
        let value = Tensor::new(&[n, o, ho, wo], out)?;
        check_finite("conv2d", &value)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, stride, pad, cols }, rg))
    }

    /// `x [M, in] * w^T + b` with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(mismatch("linear", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(mismatch("linear bias", &ws, &bs));
        }
        let (m, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; m * dout];
        {
            let bv = &self.nodes[b.0].value.data;
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            gemm(m, din, dout, xv, din, 1, wv, 1, din, 1.0, &mut out);
        }
        let value = Tensor::new(&[m, dout], out)?;
        check_finite("linear", &value)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        check_finite(name, &value)?;
        let rg = self.rg(x);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    /// Gradient reversal: identity forward, gradient multiplied by `-lambda` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(value, Op::Grl { x, lambda }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("add", sa, sb));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor { shape: sa.to_vec(), data };
        check_finite("add", &value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("mul", sa, sb));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor { shape: sa.to_vec(), data };
        check_finite("mul", &value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.nodes[x.0].value.data.iter().sum());
        check_finite("sum", &value)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    /// `[N, C, H, W] -> [N, C]` mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("global_avg_pool", &s, &[0, 0, 0, 0]));
        }
        let plane = s[2] * s[3];
        let data = self.nodes[x.0]
            .value
            .data
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor { shape: vec![s[0], s[1]], data };
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Concatenates `[M, D_i]` matrices along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let m = first[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != m {
                return Err(mismatch("concat", &first, s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&x, &wd) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[x.0].value.data[r * wd..(r + 1) * wd]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor { shape: vec![m, total], data }, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Columns `start..start+len` of a `[M, D]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(mismatch("slice_cols", &s, &[start, len]));
        }
        let d = s[1];
        let src = &self.nodes[x.0].value.data;
        let data = (0..s[0]).flat_map(|r| src[r * d + start..r * d + start + len].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![s[0], len], data }, Op::SliceCols { x, start }, rg))
    }

    /// Channels `start..start+len` of a `[N, C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || start + len > s[1] {
            return Err(mismatch("slice_channels", &s, &[start, len]));
        }
        let plane = s[2] * s[3];
        let src = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(s[0] * len * plane);
        for n in 0..s[0] {
            let base = (n * s[1] + start) * plane;
            data.extend_from_slice(&src[base..base + len * plane]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![s[0], len, s[2], s[3]], data }, Op::SliceChannels { x, start }, rg))
    }

    /// Items `start..start+len` along the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(mismatch("slice_batch", &s, &[start, len]));
        }
        let item: usize = s[1..].iter().product();
        let data = self.nodes[x.0].value.data[start * item..(start + len) * item].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SliceBatch { x, start }, rg))
    }

    /// Feature vectors of selected cells: `[N, C, H, W]` and `(image, cell)`
    /// pairs with `cell = y * W + x` give `[M, C]`.
    pub fn gather_cells(&mut self, x: Var, index: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("gather_cells", &s, &[0, 0, 0, 0]));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if let Some(&bad) = index.iter().find(|&&(i, cell)| i >= n || cell >= plane) {
            return Err(mismatch("gather_cells", &s, &[bad.0, bad.1]));
        }
        let src = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(index.len() * c);
        for &(i, cell) in index {
            data.extend((0..c).map(|ch| src[(i * c + ch) * plane + cell]));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape: vec![index.len(), c], data },
            Op::GatherCells { x, index: index.to_vec() },
            rg,
        ))
    }

    /// Summed binary cross-entropy on logits, optionally weighted per element.
    pub fn bce_logits(&mut self, x: Var, labels: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if labels.len() != xv.len() || weights.is_some_and(|w| w.len() != xv.len()) {
            return Err(mismatch("bce_logits", &xv.shape, &[labels.len()]));
        }
        let total: f64 = xv
            .data
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&z, &y))| weights.map_or(1.0, |w| w[i]) * (softplus(z) - y * z))
            .sum();
        let value = Tensor::scalar(total);
        check_finite("bce_logits", &value)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::BceLogits { x, labels: labels.to_vec(), weights: weights.map(<[f64]>::to_vec) },
            rg,
        ))
    }

    /// Summed softmax cross-entropy of `[M, K]` logits against class indices.
    pub fn softmax_ce(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(mismatch("softmax_ce", &s, &[targets.len()]));
        }
        let k = s[1];
        let mut probs = Vec::with_capacity(s[0] * k);
        let mut total = 0.0;
        for (row, &t) in self.nodes[x.0].value.data.chunks(k).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total);
        check_finite("softmax_ce", &value)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxCe { x, targets: targets.to_vec(), probs }, rg))
    }

    /// Summed absolute difference against a constant target.
    pub fn l1(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.shape != target.shape {
            return Err(mismatch("l1", &xv.shape, &target.shape));
        }
        let total = xv.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum();
        let value = Tensor::scalar(total);
        check_finite("l1", &value)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::L1 { x, target: target.data.clone() }, rg))
    }

    /// Reverse pass from a scalar loss. Returns gradients of every bound
    /// parameter and leaf; the tape cannot be differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(AutodiffError::GradDisabled);
        }
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.nodes[loss.0].value.shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: self.nodes[loss.0].value.shape.clone(), data: vec![1.0] });

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (name, &v) in &self.bound {
            let g = grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.nodes[v.0].value.shape));
            out.insert(name.clone(), g);
        }
        out.leaves = grads
            .into_iter()
            .enumerate()
            .filter(|(i, _)| matches!(self.nodes[*i].op, Op::Leaf) && self.nodes[*i].requires_grad)
            .filter_map(|(i, g)| g.map(|g| (Var(i), g)))
            .collect();
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, stride, pad, cols } => {
                let is = &self.nodes[input.0].value.shape;
                let ks = &self.nodes[kernel.0].value.shape;
                let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
                let (o, k) = (ks[0], ks[2]);
                let os = &node.value.shape;
                let plane = os[2] * os[3];
                let ckk = c * k * k;
                if self.nodes[bias.0].requires_grad {
                    let mut gb = vec![0.0; o];
                    for img in g.data.chunks(o * plane) {
                        for (oc, row) in img.chunks(plane).enumerate() {
                            gb[oc] += row.iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *bias, Tensor { shape: vec![o], data: gb });
                }
                if self.nodes[kernel.0].requires_grad {
                    let mut gk = vec![0.0; o * ckk];
                    for (img, col) in g.data.chunks(o * plane).zip(cols) {
                        // gk += gout (o x plane) * col^T (plane x ckk)
                        gemm(o, plane, ckk, img, plane, 1, col, 1, plane, 1.0, &mut gk);
                    }
                    self.accumulate(grads, *kernel, Tensor { shape: ks.clone(), data: gk });
                }
                if self.nodes[input.0].requires_grad {
                    let kern = &self.nodes[kernel.0].value.data;
                    let mut gi = vec![0.0; n * c * h * w];
                    let mut gcol = vec![0.0; ckk * plane];
                    for (idx, img) in g.data.chunks(o * plane).enumerate() {
                        // gcol = kern^T (ckk x o) * gout (o x plane)
                        gemm(ckk, o, plane, kern, 1, ckk, img, plane, 1, 0.0, &mut gcol);
                        col2im(&gcol, c, h, w, k, *stride, *pad, &mut gi[idx * c * h * w..(idx + 1) * c * h * w]);
                    }
                    self.accumulate(grads, *input, Tensor { shape: is.clone(), data: gi });
                }
            }
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[x.0].value.shape;
                let ws = &self.nodes[w.0].value.shape;
                let (m, din, dout) = (xs[0], xs[1], ws[0]);
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; dout];
                    for row in g.data.chunks(dout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor { shape: vec![dout], data: gb });
                }
                if self.nodes[w.0].requires_grad {
                    // gw (dout x din) = g^T (dout x m) * x (m x din)
                    let mut gw = vec![0.0; dout * din];
                    gemm(dout, m, din, &g.data, 1, dout, &self.nodes[x.0].value.data, din, 1, 0.0, &mut gw);
                    self.accumulate(grads, *w, Tensor { shape: ws.clone(), data: gw });
                }
                if self.nodes[x.0].requires_grad {
                    // gx (m x din) = g (m x dout) * w (dout x din)
                    let mut gx = vec![0.0; m * din];
                    gemm(m, dout, din, &g.data, dout, 1, &self.nodes[w.0].value.data, din, 1, 0.0, &mut gx);
                    self.accumulate(grads, *x, Tensor { shape: xs.clone(), data: gx });
                }
            }
            Op::Relu(x) => {
                let data = g
                    .data
                    .iter()
                    .zip(&self.nodes[x.0].value.data)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor { shape: g.shape.clone(), data });
            }
            Op::Sigmoid(x) => {
                let data = g.data.iter().zip(&node.value.data).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor { shape: g.shape.clone(), data });
            }
            Op::Grl { x, lambda } => {
                let data = g.data.iter().map(|&gv| -lambda * gv).collect();
                self.accumulate(grads, *x, Tensor { shape: g.shape.clone(), data });
            }
            Op::Scale(x, c) => {
                let data = g.data.iter().map(|&gv| c * gv).collect();
                self.accumulate(grads, *x, Tensor { shape: g.shape.clone(), data });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                let ga = g.data.iter().zip(bv).map(|(gv, y)| gv * y).collect();
                let gb = g.data.iter().zip(av).map(|(gv, x)| gv * x).collect();
                self.accumulate(grads, *a, Tensor { shape: g.shape.clone(), data: ga });
                self.accumulate(grads, *b, Tensor { shape: g.shape.clone(), data: gb });
            }
            Op::Sum(x) => {
                let s = &self.nodes[x.0].value.shape;
                let n: usize = s.iter().product();
                self.accumulate(grads, *x, Tensor { shape: s.clone(), data: vec![g.data[0]; n] });
            }
            Op::GlobalAvgPool(x) => {
                let s = &self.nodes[x.0].value.shape;
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let data = g.data.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(plane)).collect();
                self.accumulate(grads, *x, Tensor { shape: s.clone(), data });
            }
            Op::ConcatCols(xs) => {
                let m = node.value.shape[0];
                let total = node.value.shape[1];
                let mut offset = 0;
                for &x in xs {
                    let wd = self.nodes[x.0].value.shape[1];
                    if self.nodes[x.0].requires_grad {
                        let data = (0..m)
                            .flat_map(|r| g.data[r * total + offset..r * total + offset + wd].iter().copied())
                            .collect();
                        self.accumulate(grads, x, Tensor { shape: vec![m, wd], data });
                    }
                    offset += wd;
                }
            }
            Op::SliceCols { x, start } => {
                let s = &self.nodes[x.0].value.shape;
                let (d, len) = (s[1], node.value.shape[1]);
                let mut data = vec![0.0; s[0] * d];
                for r in 0..s[0] {
                    data[r * d + start..r * d + start + len].copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor { shape: s.clone(), data });
            }
            Op::SliceChannels { x, start } => {
                let s = &self.nodes[x.0].value.shape;
                let plane = s[2] * s[3];
                let len = node.value.shape[1];
                let mut data = vec![0.0; s.iter().product()];
                for n in 0..s[0] {
                    let base = (n * s[1] + start) * plane;
                    data[base..base + len * plane].copy_from_slice(&g.data[n * len * plane..(n + 1) * len * plane]);
                }
                self.accumulate(grads, *x, Tensor { shape: s.clone(), data });
            }
            Op::SliceBatch { x, start } => {
                let s = &self.nodes[x.0].value.shape;
                let item: usize = s[1..].iter().product();
                let mut data = vec![0.0; s.iter().product()];
                data[start * item..start * item + g.data.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *x, Tensor { shape: s.clone(), data });
            }
            Op::GatherCells { x, index } => {
                let s = &self.nodes[x.0].value.shape;
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut data = vec![0.0; s.iter().product()];
                for (row, &(i, cell)) in index.iter().enumerate() {
                    for ch in 0..c {
                        data[(i * c + ch) * plane + cell] += g.data[row * c + ch];
                    }
                }
                self.accumulate(grads, *x, Tensor { shape: s.clone(), data });
            }
            Op::BceLogits { x, labels, weights } => {
                let gv = g.data[0];
                let xv = &self.nodes[x.0].value;
                let data = xv
                    .data
                    .iter()
                    .zip(labels)
                    .enumerate()
                    .map(|(i, (&z, &y))| gv * weights.as_ref().map_or(1.0, |w| w[i]) * (sigmoid(z) - y))
                    .collect();
                self.accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data });
            }
            Op::SoftmaxCe { x, targets, probs } => {
                let gv = g.data[0];
                let s = &self.nodes[x.0].value.shape;
                let k = s[1];
                let mut data: Vec<f64> = probs.iter().map(|p| gv * p).collect();
                for (r, &t) in targets.iter().enumerate() {
                    data[r * k + t] -= gv;
                }
                self.accumulate(grads, *x, Tensor { shape: s.clone(), data });
            }
            Op::L1 { x, target } => {
                let gv = g.data[0];
                let xv = &self.nodes[x.0].value;
                let data = xv
                    .data
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            gv
                        } else if d < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data });
            }
        }
        Ok(())
    }
}
