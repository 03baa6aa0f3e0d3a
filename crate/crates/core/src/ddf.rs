//! Dual-Domain Fusion block.
//!
//! ```text
//! [X1, X2] = split(conv1x1(X), [C/4, 3C/4])
//! X_conv   = GELU(conv(X1))
//! X_out    = α1·|freq(conv_f(|X_conv|), conv_g(|X_conv|))|
//!          + conv_d(ReLU(X1 + conv_c(X_conv) + β1·|X_conv|))
//! X_final  = conv1x1([X_out, X2])
//! ```
//!
//! `freq` is selected by [`FreqMode`]: `Literal` evaluates
//! `IFFT(FFT(a)) · b` exactly as written, which reduces to `a · b`;
//! `Gated` moves the product into the frequency domain,
//! `IFFT(FFT(a) ⊙ FFT(b)) / (H·W)`, a per-channel circular convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Conv, ParamId, ParamStore, Session};
use crate::numerics::{Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqMode {
    Literal,
    #[default]
    Gated,
}

impl std::str::FromStr for FreqMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "gated" => Ok(Self::Gated),
            _ => Err(Error::Config(format!("unknown freq mode {s:?} (literal|gated)"))),
        }
    }
}

impl FreqMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Literal => "literal",
            Self::Gated => "gated",
        }
    }
}

/// Parameters of one DDF block.
#[derive(Clone, Debug)]
pub struct DdfParams {
    pub split_conv: Conv,
    pub conv_gelu: Conv,
    pub freq_conv: Conv,
    pub gate_conv: Conv,
    pub mix_conv: Conv,
    pub out_conv: Conv,
    pub alpha1: ParamId,
    pub beta1: ParamId,
    pub fuse_conv: Conv,
    pub channels: usize,
    pub c1: usize,
}

/// Intermediate maps kept for inspection.
pub struct DdfTrace {
    pub x1: Var,
    pub x2: Var,
    pub abs_conv: Var,
    /// Frequency operands `(conv_f(|X_conv|), conv_g(|X_conv|))`.
    pub freq_inputs: (Var, Var),
    pub x_out: Var,
    pub output: Var,
}

impl DdfParams {
    /// `in_channels` may differ from `channels` when the block sits behind a
    /// concatenation; the split convolution performs the channel adjustment.
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::Config(format!("DDF channels must be divisible by 4, got {channels}")));
        }
        let c1 = channels / 4;
        Ok(Self {
            split_conv: Conv::new(store, &format!("{name}.split"), in_channels, channels, 1, 1, rng),
            conv_gelu: Conv::new(store, &format!("{name}.conv_gelu"), c1, c1, 3, 1, rng),
            freq_conv: Conv::new(store, &format!("{name}.freq"), c1, c1, 3, 1, rng),
            gate_conv: Conv::new(store, &format!("{name}.gate"), c1, c1, 3, 1, rng),
            mix_conv: Conv::new(store, &format!("{name}.mix"), c1, c1, 3, 1, rng),
            out_conv: Conv::new(store, &format!("{name}.out"), c1, c1, 3, 1, rng),
            alpha1: store.constant(format!("{name}.alpha1"), &[1], 1.0),
            beta1: store.constant(format!("{name}.beta1"), &[1], 0.0),
            fuse_conv: Conv::new(store, &format!("{name}.fuse"), channels, channels, 1, 1, rng),
            channels,
            c1,
        })
    }

    /// Every parameter id owned by this block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in [
            &self.split_conv,
            &self.conv_gelu,
            &self.freq_conv,
            &self.gate_conv,
            &self.mix_conv,
            &self.out_conv,
            &self.fuse_conv,
        ] {
            ids.push(c.w);
            ids.push(c.b);
        }
        ids.push(self.alpha1);
        ids.push(self.beta1);
        ids
    }

    /// Channel split after the 1×1 convolution.
    pub fn split(&self, s: &mut Session, x: Var) -> Result<(Var, Var)> {
        let y = self.split_conv.forward(s, x)?;
        let x1 = s.g.slice_rows(y, 0, self.c1)?;
        let x2 = s.g.slice_rows(y, self.c1, self.channels - self.c1)?;
        Ok((x1, x2))
    }

    pub fn forward(&self, s: &mut Session, x: Var, mode: FreqMode) -> Result<Var> {
        Ok(self.forward_traced(s, x, mode)?.output)
    }

    pub fn forward_traced(&self, s: &mut Session, x: Var, mode: FreqMode) -> Result<DdfTrace> {
        let shape = s.g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
            return Err(Error::Shape(format!("DDF input must be [C,H>=2,W>=2], got {shape:?}")));
        }
        let (x1, x2) = self.split(s, x)?;
        let pre = self.conv_gelu.forward(s, x1)?;
        let x_conv = s.g.gelu(pre);
        let abs_conv = s.g.abs(x_conv);

        let fa = self.freq_conv.forward(s, abs_conv)?;
        let fb = self.gate_conv.forward(s, abs_conv)?;
        let freq = match mode {
            FreqMode::Literal => {
                let rt = s.g.fft_roundtrip(fa)?;
                s.g.mul(rt, fb)?
            }
            FreqMode::Gated => s.g.spectral_product(fa, fb)?,
        };
        let freq = s.g.abs(freq);
        let alpha1 = s.p(self.alpha1);
        let freq_term = s.g.scale_by(freq, alpha1)?;

        let mixed = self.mix_conv.forward(s, x_conv)?;
        let beta1 = s.p(self.beta1);
        let resid = s.g.scale_by(abs_conv, beta1)?;
        let inner = s.g.add(x1, mixed)?;
        let inner = s.g.add(inner, resid)?;
        let inner = s.g.relu(inner);
        let spatial_term = self.out_conv.forward(s, inner)?;

        let x_out = s.g.add(freq_term, spatial_term)?;
        let cat = s.g.concat_rows(&[x_out, x2])?;
        let output = self.fuse_conv.forward(s, cat)?;
        Ok(DdfTrace {
            x1,
            x2,
            abs_conv,
            freq_inputs: (fa, fb),
            x_out,
            output,
        })
    }
}

/// Log-magnitude spectrum of each channel, shifted so DC sits at the center.
pub fn log_spectrum(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::new();
    let mut dims = (h, w);
    for ch in 0..c {
        let spec = crate::numerics::fft::fft2_padded(h, w, &t.data()[ch * h * w..(ch + 1) * h * w]);
        let (hp, wp) = (spec.height, spec.width);
        dims = (hp, wp);
        let mag = spec.magnitude();
        let mut shifted = vec![0.0; hp * wp];
        for i in 0..hp {
            for j in 0..wp {
                shifted[((i + hp / 2) % hp) * wp + (j + wp / 2) % wp] = (1.0 + mag[i * wp + j]).ln();
            }
        }
        out.extend(shifted);
    }
    Tensor::new(&[c, dims.0, dims.1], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fft;
    use crate::numerics::gradcheck::finite_diff_check_at;
    use crate::numerics::Graph;

    fn random_input(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    fn build(c: usize, seed: u64) -> (ParamStore, DdfParams) {
        let mut store = ParamStore::new();
        let p = DdfParams::new(&mut store, "ddf", c, c, &mut Rng::new(seed)).unwrap();
        (store, p)
    }

    fn run(store: &ParamStore, p: &DdfParams, x: &Tensor, mode: FreqMode) -> Tensor {
        let mut s = Session::new(store);
        let xv = s.g.constant(x.clone());
        let y = p.forward(&mut s, xv, mode).unwrap();
        s.g.value(y).clone()
    }

    #[test]
    fn split_shapes_and_identity() {
        let (mut store, p) = build(8, 1);
        let x = random_input(&mut Rng::new(2), &[8, 5, 6]);
        {
            let mut s = Session::new(&store);
            let xv = s.g.constant(x.clone());
            let (a, b) = p.split(&mut s, xv).unwrap();
            assert_eq!(s.g.shape(a), &[2, 5, 6]);
            assert_eq!(s.g.shape(b), &[6, 5, 6]);
        }
        let w = store.get_mut(p.split_conv.w);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for c in 0..8 {
            w.data_mut()[c * 8 + c] = 1.0;
        }
        store.get_mut(p.split_conv.b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut s = Session::new(&store);
        let xv = s.g.constant(x.clone());
        let (a, b) = p.split(&mut s, xv).unwrap();
        let cat = s.g.concat_rows(&[a, b]).unwrap();
        assert_eq!(s.g.value(cat).data(), x.data());
    }

    #[test]
    fn rejects_bad_channels() {
        let mut store = ParamStore::new();
        assert!(matches!(
            DdfParams::new(&mut store, "d", 6, 6, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shape_is_preserved() {
        for (c, h, w) in [(4, 2, 2), (8, 8, 8), (8, 3, 7), (12, 6, 5), (16, 24, 24)] {
            let (store, p) = build(c, 3);
            let x = random_input(&mut Rng::new(4), &[c, h, w]);
            for mode in [FreqMode::Literal, FreqMode::Gated] {
                assert_eq!(run(&store, &p, &x, mode).shape(), &[c, h, w]);
            }
        }
    }

    #[test]
    fn zero_alpha_makes_frequency_branch_inert() {
        let (mut store, p) = build(8, 5);
        store.get_mut(p.alpha1).data_mut()[0] = 0.0;
        let x = random_input(&mut Rng::new(6), &[8, 6, 6]);
        let before = run(&store, &p, &x, FreqMode::Gated);
        for id in [p.freq_conv.w, p.gate_conv.w, p.freq_conv.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.37);
        }
        let after = run(&store, &p, &x, FreqMode::Gated);
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn spatial_term_reduces_to_relu_of_x1() {
        // β1 = 0 and conv_c = 0: the spatial term is conv_d(ReLU(X1)).
        let (mut store, p) = build(8, 7);
        store.get_mut(p.alpha1).data_mut()[0] = 0.0;
        for id in [p.mix_conv.w, p.mix_conv.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_input(&mut Rng::new(8), &[8, 5, 5]);
        let mut s = Session::new(&store);
        let xv = s.g.constant(x);
        let tr = p.forward_traced(&mut s, xv, FreqMode::Gated).unwrap();
        let r = s.g.relu(tr.x1);
        let expect = p.out_conv.forward(&mut s, r).unwrap();
        assert!(s.g.value(tr.x_out).max_abs_diff(s.g.value(expect)) < 1e-15);
    }

    #[test]
    fn gated_product_modulates_only_the_matching_bin() {
        // a = cos(2π·(2r/8 + 1c/8)), spectrum supported on bins (2,1) and (6,7).
        let (h, w) = (8, 8);
        let a: Vec<f64> = (0..h * w)
            .map(|k| {
                let (r, c) = ((k / w) as f64, (k % w) as f64);
                (2.0 * std::f64::consts::PI * (2.0 * r / 8.0 + c / 8.0)).cos()
            })
            .collect();
        let b: Vec<f64> = random_input(&mut Rng::new(9), &[h * w]).into_data();
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(&[1, h, w], a.clone()).unwrap());
        let bv = g.constant(Tensor::new(&[1, h, w], b.clone()).unwrap());
        let y = g.spectral_product(av, bv).unwrap();
        let fy = fft::fft2(h, w, g.value(y).data()).unwrap();
        let fa = fft::fft2(h, w, &a).unwrap();
        let fb = fft::fft2(h, w, &b).unwrap();
        for k in 0..h * w {
            let on = k == 2 * w + 1 || k == 6 * w + 7;
            if on {
                let er = (fa.re[k] * fb.re[k] - fa.im[k] * fb.im[k]) / 64.0;
                let ei = (fa.re[k] * fb.im[k] + fa.im[k] * fb.re[k]) / 64.0;
                assert!((fy.re[k] - er).abs() < 1e-9 && (fy.im[k] - ei).abs() < 1e-9);
                assert!(fy.re[k].hypot(fy.im[k]) > 1e-3);
            } else {
                assert!(fy.re[k].hypot(fy.im[k]) < 1e-9, "bin {k} leaked");
            }
        }
    }

    #[test]
    fn every_param_gets_finite_gradient() {
        let (store, p) = build(8, 11);
        let x = random_input(&mut Rng::new(12), &[8, 6, 6]);
        let mut s = Session::new(&store);
        let xv = s.g.constant(x);
        let y = p.forward(&mut s, xv, FreqMode::Gated).unwrap();
        let sq = s.g.mul(y, y).unwrap();
        let loss = s.g.sum(sq);
        let grads = s.g.backward(loss).unwrap();
        for id in p.param_ids() {
            let v = s.bound(id).expect("bound");
            let gv = grads.get(v).expect("gradient");
            assert!(gv.iter().all(|g| g.is_finite()));
            assert!(gv.iter().any(|g| *g != 0.0), "{}", store.name(id));
        }
    }

    #[test]
    fn input_gradient_matches_differences() {
        let (store, p) = build(8, 13);
        let x = random_input(&mut Rng::new(14), &[8, 4, 4]);
        for mode in [FreqMode::Literal, FreqMode::Gated] {
            let err = finite_diff_check_at(
                |g, v| {
                    Session::on_graph(&store, g, |s| {
                        let y = p.forward(s, v, mode)?;
                        Ok(s.g.sum(y))
                    })
                },
                &x,
                1e-5,
                &(0..x.len()).step_by(3).collect::<Vec<_>>(),
            )
            .unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }
}
