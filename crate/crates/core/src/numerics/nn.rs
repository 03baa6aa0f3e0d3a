//! Parameter storage and the small set of layers the detector is built from.

use std::collections::HashMap;

use super::{Graph, Grads, Rng, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(t.with_grad());
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn zero_grad(&mut self) {
        self.values.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs; every stored name must be present.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, name) in self.names.iter().enumerate() {
            let src = map
                .get(name.as_str())
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {name}")))?;
            if src.shape() != self.values[i].shape() {
                return Err(shape_err!(
                    "parameter {name}: checkpoint {:?} vs model {:?}",
                    src.shape(),
                    self.values[i].shape()
                ));
            }
            self.values[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, t)| (n.clone(), Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())))
            .collect()
    }

    /// Order-sensitive FNV-1a over the raw bits of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.values {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// One forward pass: a fresh [`Graph`] plus lazy binding of store parameters.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Parameters enter as constants; nothing on the tape reaches them.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    /// Runs `f` with frozen parameters on an existing graph, so store-backed
    /// layers can be composed with caller-owned leaves.
    pub fn on_graph<R>(store: &'a ParamStore, g: &mut Graph, f: impl FnOnce(&mut Session) -> R) -> R {
        let mut s = Session::frozen(store);
        std::mem::swap(&mut s.g, g);
        let r = f(&mut s);
        std::mem::swap(&mut s.g, g);
        r
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Var bound for `id` in this session, if the forward pass touched it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Adds `d(loss)/d(param)` into `out` for every bound parameter.
    pub fn accumulate(&self, grads: &Grads, out: &mut [Vec<f64>]) {
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(gv) = v.and_then(|v| grads.get(v)) {
                for (a, b) in out[i].iter_mut().zip(gv) {
                    *a += b;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.uniform(format!("{name}.w"), &[dout, din], din, rng),
            b: store.uniform(format!("{name}.b"), &[dout], din, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = c_in * k * k;
        Self {
            w: store.uniform(format!("{name}.w"), &[c_out, c_in, k, k], fan_in, rng),
            b: store.uniform(format!("{name}.b"), &[c_out], fan_in, rng),
            stride,
            pad: (k - 1) / 2,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.constant(format!("{name}.gain"), &[d], 1.0),
            bias: store.constant(format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.g.layer_norm(x, g, b)
    }
}

/// Multi-head attention: per-head `softmax(Q Kᵀ / sqrt(d_head)) V`,
/// concatenated and projected.
#[derive(Clone, Copy, Debug)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Mha {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels not divisible into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Attention with separate key and value inputs; also returns the
    /// head-averaged attention matrix `[Nq, Nk]` (not on the tape).
    pub fn attend(&self, s: &mut Session, query: Var, key: Var, value: Var) -> Result<(Var, Tensor)> {
        for v in [query, key, value] {
            let sh = s.g.shape(v);
            if sh.len() != 2 || sh[1] != self.dim {
                return Err(shape_err!("attention input {sh:?}, expected [N, {}]", self.dim));
            }
        }
        if s.g.shape(key)[0] != s.g.shape(value)[0] {
            return Err(shape_err!("{} keys vs {} values", s.g.shape(key)[0], s.g.shape(value)[0]));
        }
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, key)?;
        let v = self.v.forward(s, value)?;
        let dh = self.dim / self.heads;
        let nq = s.g.shape(q)[0];
        let nk = s.g.shape(k)[0];
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut avg = vec![0.0; nq * nk];
        for h in 0..self.heads {
            let qh = s.g.slice_cols(q, h * dh, dh)?;
            let kh = s.g.slice_cols(k, h * dh, dh)?;
            let vh = s.g.slice_cols(v, h * dh, dh)?;
            let scores = s.g.matmul(qh, kh, true)?;
            let scores = s.g.scale(scores, scale);
            let p = s.g.softmax_rows(scores)?;
            for (a, b) in avg.iter_mut().zip(s.g.value(p).data()) {
                *a += b / self.heads as f64;
            }
            heads.push(s.g.matmul(p, vh, false)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { s.g.concat_cols(&heads)? };
        let out = self.o.forward(s, cat)?;
        Ok((out, Tensor::from_parts(vec![nq, nk], avg)))
    }

    /// `mha(q, kv)`: keys and values both come from `kv`.
    pub fn forward(&self, s: &mut Session, q: Var, kv: Var) -> Result<Var> {
        Ok(self.attend(s, q, kv, kv)?.0)
    }
}

/// Fixed 2D sinusoidal encoding of normalized positions, `[N, dim]`.
///
/// The first half of the channels encodes `x`, the second half `y`, each
/// with interleaved sin/cos at geometrically spaced frequencies.
pub fn sincos_2d(positions: &[(f64, f64)], dim: usize) -> Tensor {
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = vec![0.0; positions.len() * dim];
    for (n, &(x, y)) in positions.iter().enumerate() {
        for (axis, coord) in [(0, x), (1, y)] {
            for p in 0..pairs {
                let freq = 2.0 * std::f64::consts::PI * 2f64.powf(p as f64 * 4.0 / pairs.max(1) as f64);
                let base = n * dim + axis * half + 2 * p;
                out[base] = (coord * freq).sin();
                out[base + 1] = (coord * freq).cos();
            }
        }
    }
    Tensor::from_parts(vec![positions.len(), dim], out)
}
