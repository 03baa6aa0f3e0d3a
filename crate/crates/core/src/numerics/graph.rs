//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Grads`]
//! table indexed by the same handles.

use std::sync::atomic::{AtomicU64, Ordering};

use super::fft::{self, ComplexGrid};
use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::boxgeom::BoxLossKind;
use crate::error::{shape_err, Error, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Abs,
    Exp,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Clamp(usize, f64, f64),
    AddScalar(usize),
    ScaleVar(usize, usize),
    AddRowBias(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    MatMul { a: usize, b: usize, b_t: bool },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Unary(usize, Unary),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Transpose(usize),
    Reshape(usize),
    SliceRows { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, idx: Vec<usize> },
    Upsample2x(usize),
    SpectralProduct { a: usize, b: usize },
    FftRoundtrip(usize),
    Sum(usize),
    Bce { p: usize, target: Vec<f64> },
    BoxLoss { pred: usize, target: usize, kind: BoxLossKind },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient for `v`; `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }
}

/// Binary cross-entropy probability clamp.
pub const BCE_EPS: f64 = 1e-7;

pub fn bce_value(p: f64, t: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    let r = s[0];
    (r, t.len() / r)
}

/// Per-channel real part of `IFFT(FFT(a)·FFT(b)) / (H·W)` over padded planes.
fn spectral_product_planes(h: usize, w: usize, a: &[f64], b: &[f64], conj_b: bool) -> Vec<f64> {
    let fa = fft::fft2_padded(h, w, a);
    let mut fb = fft::fft2_padded(h, w, b);
    if conj_b {
        fb = fb.conj();
    }
    let (hp, wp) = (fa.height, fa.width);
    let prod = fa.hadamard(&fb);
    let back = fft::ifft2(prod).expect("padded dims are powers of two");
    let scale = 1.0 / (hp * wp) as f64;
    let re: Vec<f64> = back.re.iter().map(|v| v * scale).collect();
    fft::crop(hp, wp, &re, h, w)
}

fn roundtrip_plane(h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let f = fft::fft2_padded(h, w, x);
    let (hp, wp) = (f.height, f.width);
    let back: ComplexGrid = fft::ifft2(f).expect("padded dims are powers of two");
    fft::crop(hp, wp, &back.re, h, w)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn ix(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        v.idx
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Checks that `v` was recorded on this graph.
    pub fn owns(&self, v: Var) -> bool {
        v.graph == self.id && v.idx < self.nodes.len()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        value.requires_grad = true;
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.ix(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        let (ia, ib) = (self.ix(a), self.ix(b));
        self.same_shape(ia, ib, what)?;
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(t, op(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul, |x, y| x * y, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect());
        let ng = self.ng(i);
        self.push(t, Op::Scale(i, c), ng)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a.clamp(lo, hi)).collect());
        let ng = self.ng(i);
        self.push(t, Op::Clamp(i, lo, hi), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a + c).collect());
        let ng = self.ng(i);
        self.push(t, Op::AddScalar(i), ng)
    }

    /// `x · s` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (i, is) = (self.ix(x), self.ix(s));
        if self.nodes[is].value.len() != 1 {
            return Err(shape_err!("scale_by needs a scalar, got {:?}", self.nodes[is].value.shape()));
        }
        let c = self.nodes[is].value.item();
        let v = &self.nodes[i].value;
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect());
        let ng = self.ng(i) || self.ng(is);
        Ok(self.push(t, Op::ScaleVar(i, is), ng))
    }

    /// `x[N, D] + b[D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (i, ib) = (self.ix(x), self.ix(b));
        let (n, d) = rows_cols(&self.nodes[i].value);
        if self.nodes[ib].value.len() != d || self.nodes[i].value.rank() != 2 {
            return Err(shape_err!("row bias of {} for {:?}", self.nodes[ib].value.len(), self.nodes[i].value.shape()));
        }
        let bv = self.nodes[ib].value.data();
        let mut data = self.nodes[i].value.data().to_vec();
        for r in 0..n {
            for (o, bb) in data[r * d..(r + 1) * d].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let ng = self.ng(i) || self.ng(ib);
        Ok(self.push(Tensor::from_parts(vec![n, d], data), Op::AddRowBias(i, ib), ng))
    }

    /// `x[N, Din] · w[Dout, Din]ᵀ + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.ix(x), self.ix(w));
        let ib = b.map(|b| self.ix(b));
        let xs = self.nodes[ix].value.shape();
        let ws = self.nodes[iw].value.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err!("linear: x {xs:?} w {ws:?}"));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(ib) = ib {
            if self.nodes[ib].value.len() != dout {
                return Err(shape_err!("linear bias length {} != {dout}", self.nodes[ib].value.len()));
            }
        }
        let mut out = vec![0.0; n * dout];
        if let Some(ib) = ib {
            let bv = self.nodes[ib].value.data();
            for r in 0..n {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv);
            }
        }
        kernels::gemm(
            n,
            din,
            dout,
            self.nodes[ix].value.data(),
            false,
            self.nodes[iw].value.data(),
            true,
            &mut out,
            ib.is_some(),
        );
        let ng = self.ng(ix) || self.ng(iw) || ib.is_some_and(|i| self.ng(i));
        Ok(self.push(Tensor::from_parts(vec![n, dout], out), Op::Linear { x: ix, w: iw, b: ib }, ng))
    }

    /// `a[M, K] · b[K, N]`, or `a · bᵀ` with `b[N, K]` when `b_t`.
    pub fn matmul(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (ia, ib) = (self.ix(a), self.ix(b));
        let as_ = self.nodes[ia].value.shape();
        let bs = self.nodes[ib].value.shape();
        if as_.len() != 2 || bs.len() != 2 {
            return Err(shape_err!("matmul needs 2D operands: {as_:?}, {bs:?}"));
        }
        let (m, k) = (as_[0], as_[1]);
        let (kb, n) = if b_t { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
        if k != kb {
            return Err(shape_err!("matmul inner dims {as_:?} x {bs:?} (b_t={b_t})"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.nodes[ia].value.data(), false, self.nodes[ib].value.data(), b_t, &mut out, false);
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: ia, b: ib, b_t }, ng))
    }

    /// Cross-correlation of `x[C_in, H, W]` with `w[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.ix(x), self.ix(w));
        let ib = b.map(|b| self.ix(b));
        let xs = self.nodes[ix].value.shape();
        let ws = self.nodes[iw].value.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape_err!("conv2d: x {xs:?} w {ws:?}"));
        }
        if xs[0] != ws[1] {
            return Err(shape_err!("conv2d channel mismatch: input {} vs weight {}", xs[0], ws[1]));
        }
        if stride == 0 || xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(shape_err!("conv2d: kernel {} does not fit {xs:?} with pad {pad}", ws[2]));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            k: ws[2],
            stride,
            pad,
        };
        let c_out = ws[0];
        if let Some(ib) = ib {
            if self.nodes[ib].value.len() != c_out {
                return Err(shape_err!("conv2d bias length {} != {c_out}", self.nodes[ib].value.len()));
            }
        }
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
            c_out,
            &geom,
        );
        let ng = self.ng(ix) || self.ng(iw) || ib.is_some_and(|i| self.ng(i));
        Ok(self.push(Tensor::from_parts(vec![c_out, ho, wo], out), Op::Conv2d { x: ix, w: iw, b: ib, geom }, ng))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => gelu_scalar,
            Unary::Relu => |a| a.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Abs => f64::abs,
            Unary::Exp => f64::exp,
        };
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| f(*a)).collect());
        let ng = self.ng(i);
        self.push(t, Op::Unary(i, kind), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        if v.rank() != 2 {
            return Err(shape_err!("softmax_rows needs 2D, got {:?}", v.shape()));
        }
        let (n, d) = rows_cols(v);
        let mut out = v.data().to_vec();
        for r in 0..n {
            let row = &mut out[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for a in row.iter_mut() {
                *a = (*a - m).exp();
                s += *a;
            }
            row.iter_mut().for_each(|a| *a /= s);
        }
        let ng = self.ng(i);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::SoftmaxRows(i), ng))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let eps = 1e-5;
        let (i, ig, ib) = (self.ix(x), self.ix(gain), self.ix(bias));
        let v = &self.nodes[i].value;
        let (n, d) = rows_cols(v);
        if v.rank() != 2 || self.nodes[ig].value.len() != d || self.nodes[ib].value.len() != d {
            return Err(shape_err!("layer_norm over {:?}", v.shape()));
        }
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let ng = self.ng(i) || self.ng(ig) || self.ng(ib);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::LayerNorm {
                x: i,
                gain: ig,
                bias: ib,
                eps,
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        if v.rank() != 2 {
            return Err(shape_err!("transpose needs 2D, got {:?}", v.shape()));
        }
        let (n, d) = rows_cols(v);
        let src = v.data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                out[c * n + r] = src[r * d + c];
            }
        }
        let ng = self.ng(i);
        Ok(self.push(Tensor::from_parts(vec![d, n], out), Op::Transpose(i), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.ix(x);
        let t = self.nodes[i].value.clone().reshape(shape)?;
        let ng = self.ng(i);
        Ok(self.push(Tensor::from_parts(t.shape().to_vec(), t.into_data()), Op::Reshape(i), ng))
    }

    /// Slice `[start, start+len)` along dimension 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        let (n, inner) = rows_cols(v);
        if len == 0 || start + len > n {
            return Err(shape_err!("slice [{start}, {}) of {n} rows", start + len));
        }
        let data = v.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let ng = self.ng(i);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceRows { x: i, start }, ng))
    }

    /// Concatenation along dimension 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|p| self.ix(*p)).collect();
        let first = &self.nodes[idx[0]].value;
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.shape()[1..] != tail[..] {
                return Err(shape_err!("concat_rows: {:?} vs trailing {tail:?}", v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = idx.iter().any(|&i| self.ng(i));
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatRows(idx), ng))
    }

    /// Column slice of a 2D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        let (n, d) = rows_cols(v);
        if v.rank() != 2 || len == 0 || start + len > d {
            return Err(shape_err!("slice_cols [{start}, {}) of {:?}", start + len, v.shape()));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&v.data()[r * d + start..r * d + start + len]);
        }
        let ng = self.ng(i);
        Ok(self.push(Tensor::from_parts(vec![n, len], data), Op::SliceCols { x: i, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|p| self.ix(*p)).collect();
        let n = self.nodes[idx[0]].value.shape()[0];
        let mut widths = Vec::new();
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.rank() != 2 || v.shape()[0] != n {
                return Err(shape_err!("concat_cols: {:?} with {n} rows", v.shape()));
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&i, &w) in idx.iter().zip(&widths) {
            let src = self.nodes[i].value.data();
            for r in 0..n {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = idx.iter().any(|&i| self.ng(i));
        Ok(self.push(Tensor::from_parts(vec![n, total], data), Op::ConcatCols(idx), ng))
    }

    /// Rows of a 2D tensor at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        let (n, d) = rows_cols(v);
        if v.rank() != 2 || idx.is_empty() || idx.iter().any(|&r| r >= n) {
            return Err(shape_err!("gather_rows out of range for {:?}", v.shape()));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            data.extend_from_slice(&v.data()[r * d..(r + 1) * d]);
        }
        let ng = self.ng(i);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), d], data),
            Op::GatherRows {
                x: i,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let i = self.ix(x);
        let v = &self.nodes[i].value;
        let s = v.shape();
        if s.len() != 3 {
            return Err(shape_err!("upsample needs [C,H,W], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        let src = v.data();
        for ch in 0..c {
            for r in 0..2 * h {
                for col in 0..2 * w {
                    out[(ch * 2 * h + r) * 2 * w + col] = src[(ch * h + r / 2) * w + col / 2];
                }
            }
        }
        let ng = self.ng(i);
        Ok(self.push(Tensor::from_parts(vec![c, 2 * h, 2 * w], out), Op::Upsample2x(i), ng))
    }

    fn planes(&self, i: usize) -> Result<(usize, usize, usize)> {
        let s = self.nodes[i].value.shape();
        if s.len() != 3 {
            return Err(shape_err!("expected [C,H,W], got {s:?}"));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Per channel: real part of `IFFT(FFT(a) ⊙ FFT(b)) / (H·W)`, computed on
    /// zero-padded power-of-two planes and cropped back to `H × W`.
    pub fn spectral_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.ix(a), self.ix(b));
        self.same_shape(ia, ib, "spectral_product")?;
        let (c, h, w) = self.planes(ia)?;
        let (av, bv) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let r = ch * h * w..(ch + 1) * h * w;
            out.extend(spectral_product_planes(h, w, &av[r.clone()], &bv[r], false));
        }
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(Tensor::from_parts(vec![c, h, w], out), Op::SpectralProduct { a: ia, b: ib }, ng))
    }

    /// Per channel: real part of `IFFT(FFT(x))` (identity up to roundoff).
    pub fn fft_roundtrip(&mut self, x: Var) -> Result<Var> {
        let i = self.ix(x);
        let (c, h, w) = self.planes(i)?;
        let xv = self.nodes[i].value.data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            out.extend(roundtrip_plane(h, w, &xv[ch * h * w..(ch + 1) * h * w]));
        }
        let ng = self.ng(i);
        Ok(self.push(Tensor::from_parts(vec![c, h, w], out), Op::FftRoundtrip(i), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let i = self.ix(x);
        let s = self.nodes[i].value.sum();
        let ng = self.ng(i);
        self.push(Tensor::scalar(s), Op::Sum(i), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Summed binary cross-entropy of probabilities `p` against soft targets.
    pub fn bce(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let i = self.ix(p);
        let pv = self.nodes[i].value.data();
        if pv.len() != target.len() {
            return Err(shape_err!("bce: {} probabilities vs {} targets", pv.len(), target.len()));
        }
        let s = pv.iter().zip(target).map(|(p, t)| bce_value(*p, *t)).sum();
        let ng = self.ng(i);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Bce {
                p: i,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Per-row box loss between `pred[M, 4]` and `target[M, 4]`.
    pub fn box_loss(&mut self, pred: Var, target: Var, kind: BoxLossKind) -> Result<Var> {
        let (ip, it) = (self.ix(pred), self.ix(target));
        self.same_shape(ip, it, "box_loss")?;
        let pv = &self.nodes[ip].value;
        if pv.rank() != 2 || pv.shape()[1] != 4 {
            return Err(shape_err!("box_loss needs [M,4], got {:?}", pv.shape()));
        }
        let m = pv.shape()[0];
        let tv = self.nodes[it].value.data();
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let a: [f64; 4] = pv.data()[r * 4..r * 4 + 4].try_into().unwrap();
            let b: [f64; 4] = tv[r * 4..r * 4 + 4].try_into().unwrap();
            out.push(kind.value(&a, &b));
        }
        let ng = self.ng(ip) || self.ng(it);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::BoxLoss { pred: ip, target: it, kind }, ng))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let li = self.ix(loss);
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            graph: self.id,
            grads,
        })
    }

    /// `d(loss)/d(param)`; zeros when `param` does not reach `loss`.
    pub fn grad_of(&self, loss: Var, param: Var) -> Result<Tensor> {
        if !self.owns(param) {
            return Err(Error::Graph("parameter is not recorded on this graph".into()));
        }
        let grads = self.backward(loss)?;
        let shape = self.value(param).shape().to_vec();
        let data = grads
            .get(param)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        Ok(Tensor::from_parts(shape, data))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let ng = |j: usize| nodes[j].needs_grad;
        let val = |j: usize| nodes[j].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].needs_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)),
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] > *lo && vx[k] < *hi {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::ScaleVar(x, s) => {
                let c = val(*s)[0];
                let vx = val(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
                acc(*s, &mut |d| d[0] += vx.iter().zip(g).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let dcols = nodes[*b].value.len();
                acc(*b, &mut |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[k % dcols] += gv;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[*x].value.shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = nodes[*w].value.shape()[0];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |d| kernels::gemm(n, dout, din, g, false, vw, false, d, true));
                acc(*w, &mut |d| kernels::gemm(dout, n, din, g, true, vx, false, d, true));
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for r in 0..n {
                            add_into(d, &g[r * dout..(r + 1) * dout]);
                        }
                    });
                }
            }
            Op::MatMul { a, b, b_t } => {
                let asz = nodes[*a].value.shape();
                let (m, k) = (asz[0], asz[1]);
                let n = g.len() / m;
                let (va, vb) = (val(*a), val(*b));
                // da = g · bᵀ (or g · b when b is stored transposed)
                acc(*a, &mut |d| kernels::gemm(m, n, k, g, false, vb, !*b_t, d, true));
                if *b_t {
                    // b[N,K]: db = gᵀ · a
                    acc(*b, &mut |d| kernels::gemm(n, m, k, g, true, va, false, d, true));
                } else {
                    acc(*b, &mut |d| kernels::gemm(k, m, n, va, true, g, false, d, true));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let c_out = nodes[*w].value.shape()[0];
                let (vx, vw) = (val(*x), val(*w));
                let mut dx = ng(*x).then(|| vec![0.0; vx.len()]);
                let mut dw = ng(*w).then(|| vec![0.0; vw.len()]);
                let mut db = b.filter(|b| ng(*b)).map(|b| vec![0.0; nodes[b].value.len()]);
                kernels::conv2d_backward(vx, vw, c_out, geom, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |d| add_into(d, &dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, &mut |d| add_into(d, &db));
                }
            }
            Op::Unary(x, kind) => {
                let vx = val(*x);
                let vy = nodes[i].value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        let local = match kind {
                            Unary::Gelu => gelu_grad(vx[k]),
                            Unary::Relu => (vx[k] > 0.0) as u8 as f64,
                            Unary::Sigmoid => vy[k] * (1.0 - vy[k]),
                            Unary::Abs => {
                                if vx[k] > 0.0 {
                                    1.0
                                } else if vx[k] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => vy[k],
                        };
                        d[k] += g[k] * local;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = nodes[i].value.data();
                let d_cols = nodes[i].value.shape()[1];
                acc(*x, &mut |d| {
                    for r in 0..y.len() / d_cols {
                        let s = r * d_cols..(r + 1) * d_cols;
                        let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(a, b)| a * b).sum();
                        for k in s {
                            d[k] += y[k] * (g[k] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = val(*x);
                let gv = val(*gain);
                let d_cols = gv.len();
                let n = vx.len() / d_cols;
                let mut dx = vec![0.0; vx.len()];
                let mut dg = vec![0.0; d_cols];
                let mut dbias = vec![0.0; d_cols];
                let mut xhat = vec![0.0; d_cols];
                let mut dyh = vec![0.0; d_cols];
                for r in 0..n {
                    let row = &vx[r * d_cols..(r + 1) * d_cols];
                    let gr = &g[r * d_cols..(r + 1) * d_cols];
                    let mean = row.iter().sum::<f64>() / d_cols as f64;
                    let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d_cols as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for c in 0..d_cols {
                        xhat[c] = (row[c] - mean) * rstd;
                        dyh[c] = gr[c] * gv[c];
                        dg[c] += gr[c] * xhat[c];
                        dbias[c] += gr[c];
                    }
                    let m1 = dyh.iter().sum::<f64>() / d_cols as f64;
                    let m2 = dyh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d_cols as f64;
                    for c in 0..d_cols {
                        dx[r * d_cols + c] = rstd * (dyh[c] - m1 - xhat[c] * m2);
                    }
                }
                acc(*x, &mut |d| add_into(d, &dx));
                acc(*gain, &mut |d| add_into(d, &dg));
                acc(*bias, &mut |d| add_into(d, &dbias));
            }
            Op::Transpose(x) => {
                let s = nodes[*x].value.shape();
                let (n, d_cols) = (s[0], s[1]);
                acc(*x, &mut |d| {
                    for r in 0..n {
                        for c in 0..d_cols {
                            d[r * d_cols + c] += g[c * n + r];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::SliceRows { x, start } => {
                let inner = nodes[*x].value.len() / nodes[*x].value.shape()[0];
                let off = start * inner;
                acc(*x, &mut |d| add_into(&mut d[off..off + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    acc(p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let d_cols = nodes[*x].value.shape()[1];
                let s = nodes[i].value.shape();
                let (n, len) = (s[0], s[1]);
                acc(*x, &mut |d| {
                    for r in 0..n {
                        add_into(&mut d[r * d_cols + start..r * d_cols + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let s = nodes[i].value.shape();
                let (n, total) = (s[0], s[1]);
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.shape()[1];
                    acc(p, &mut |d| {
                        for r in 0..n {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let d_cols = nodes[*x].value.shape()[1];
                acc(*x, &mut |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut d[r * d_cols..(r + 1) * d_cols], &g[k * d_cols..(k + 1) * d_cols]);
                    }
                });
            }
            Op::Upsample2x(x) => {
                let s = nodes[*x].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        for r in 0..2 * h {
                            for col in 0..2 * w {
                                d[(ch * h + r / 2) * w + col / 2] += g[(ch * 2 * h + r) * 2 * w + col];
                            }
                        }
                    }
                });
            }
            Op::SpectralProduct { a, b } => {
                let s = nodes[i].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (va, vb) = (val(*a), val(*b));
                // y = (1/N)·(a ⊛ b) circularly on padded planes, so
                // da = (1/N)·corr(g, b) and db = (1/N)·corr(g, a).
                for (target, other) in [(*a, vb), (*b, va)] {
                    acc(target, &mut |d| {
                        for ch in 0..c {
                            let r = ch * h * w..(ch + 1) * h * w;
                            let part = spectral_product_planes(h, w, &g[r.clone()], &other[r.clone()], true);
                            add_into(&mut d[r], &part);
                        }
                    });
                }
            }
            Op::FftRoundtrip(x) => {
                let s = nodes[i].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        let r = ch * h * w..(ch + 1) * h * w;
                        let part = roundtrip_plane(h, w, &g[r.clone()]);
                        add_into(&mut d[r], &part);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Bce { p, target } => {
                let vp = val(*p);
                acc(*p, &mut |d| {
                    for k in 0..d.len() {
                        let pc = vp[k];
                        if pc > BCE_EPS && pc < 1.0 - BCE_EPS {
                            d[k] += g[0] * (pc - target[k]) / (pc * (1.0 - pc));
                        }
                    }
                });
            }
            Op::BoxLoss { pred, target, kind } => {
                let (vp, vt) = (val(*pred), val(*target));
                let m = g.len();
                let mut dp = vec![0.0; 4 * m];
                let mut dt = vec![0.0; 4 * m];
                for r in 0..m {
                    let a: [f64; 4] = vp[r * 4..r * 4 + 4].try_into().unwrap();
                    let b: [f64; 4] = vt[r * 4..r * 4 + 4].try_into().unwrap();
                    let (_, grad) = kind.value_and_grad(&a, &b);
                    for k in 0..4 {
                        dp[r * 4 + k] = g[r] * grad[k];
                        dt[r * 4 + k] = g[r] * grad[4 + k];
                    }
                }
                acc(*pred, &mut |d| add_into(d, &dp));
                acc(*target, &mut |d| add_into(d, &dt));
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (a, b) in d.iter_mut().zip(g) {
        *a += b;
    }
}
