//! Dual-domain hybrid encoder: self-attention on the coarsest level only,
//! then top-down and bottom-up cross-scale fusion where the two finest
//! junctions (S3, S2) use [`DdfParams`] blocks.

use crate::ddf::{DdfParams, DdfTrace, FreqMode};
use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{sincos_2d, Conv, LayerNorm, Linear, Mha, ParamStore, Session};
use crate::numerics::{Rng, Tensor, Var};

/// Four pyramid levels at strides 4, 8, 16, 32, each `[C, H_l, W_l]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub s2: Var,
    pub s3: Var,
    pub s4: Var,
    pub s5: Var,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [Var; 4] {
        [self.s2, self.s3, self.s4, self.s5]
    }

    pub fn validate(&self, s: &Session, channels: usize) -> Result<()> {
        let shapes: Vec<&[usize]> = self.levels().iter().map(|v| s.g.shape(*v)).collect();
        for (i, sh) in shapes.iter().enumerate() {
            if sh.len() != 3 || sh[0] != channels {
                return Err(Error::Config(format!("pyramid level {i} has shape {sh:?}, expected {channels} channels")));
            }
            if i > 0 && (shapes[i - 1][1] != 2 * sh[1] || shapes[i - 1][2] != 2 * sh[2]) {
                return Err(shape_err!("pyramid levels {:?} -> {sh:?} do not halve", shapes[i - 1]));
            }
        }
        Ok(())
    }
}

/// Flattened encoder output.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    /// `[N, C]` tokens, level by level, row-major within a level.
    pub tokens: Var,
    pub level_offsets: Vec<usize>,
    pub level_shapes: Vec<(usize, usize)>,
    /// Normalized cell centers `(cx, cy)` per token.
    pub positions: Vec<(f64, f64)>,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn cell_centers(level_shapes: &[(usize, usize)]) -> (Vec<usize>, Vec<(f64, f64)>) {
    let mut offsets = Vec::with_capacity(level_shapes.len());
    let mut pos = Vec::new();
    for &(h, w) in level_shapes {
        offsets.push(pos.len());
        for i in 0..h {
            for j in 0..w {
                pos.push(((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64));
            }
        }
    }
    (offsets, pos)
}

/// Concat → 1×1 conv → GELU → 3×3 conv → GELU, with a residual around the 3×3.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    reduce: Conv,
    body: Conv,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c: usize, rng: &mut Rng) -> Self {
        Self {
            reduce: Conv::new(store, &format!("{name}.reduce"), c_in, c, 1, 1, rng),
            body: Conv::new(store, &format!("{name}.body"), c, c, 3, 1, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let a = self.reduce.forward(s, x)?;
        let a = s.g.gelu(a);
        let b = self.body.forward(s, a)?;
        let b = s.g.gelu(b);
        s.g.add(a, b)
    }
}

/// A cross-scale junction block.
#[derive(Clone, Debug)]
pub enum Junction {
    Ddf(DdfParams),
    Fusion(FusionBlock),
}

impl Junction {
    fn forward(&self, s: &mut Session, x: Var, mode: FreqMode, trace: Option<&mut Vec<DdfTrace>>) -> Result<Var> {
        match self {
            Junction::Ddf(p) => {
                let t = p.forward_traced(s, x, mode)?;
                let out = t.output;
                if let Some(tr) = trace {
                    tr.push(t);
                }
                Ok(out)
            }
            Junction::Fusion(f) => f.forward(s, x),
        }
    }
}

/// Single-layer transformer encoder applied to the S5 tokens.
#[derive(Clone, Debug)]
pub struct Aifi {
    attn: Mha,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl Aifi {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: Mha::new(store, &format!("{name}.attn"), c, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            ff1: Linear::new(store, &format!("{name}.ff1"), c, 2 * c, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * c, c, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
        })
    }

    /// `x: [C, H, W]` → same shape.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.g.shape(x).to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let flat = s.g.reshape(x, &[c, h * w])?;
        let tokens = s.g.transpose(flat)?;
        let (_, pos) = cell_centers(&[(h, w)]);
        let pe = s.g.constant(sincos_2d(&pos, c));
        let qk = s.g.add(tokens, pe)?;
        let (a, _) = self.attn.attend(s, qk, qk, tokens)?;
        let y = s.g.add(tokens, a)?;
        let y = self.norm1.forward(s, y)?;
        let f = self.ff1.forward(s, y)?;
        let f = s.g.gelu(f);
        let f = self.ff2.forward(s, f)?;
        let y2 = s.g.add(y, f)?;
        let y2 = self.norm2.forward(s, y2)?;
        let back = s.g.transpose(y2)?;
        s.g.reshape(back, &[c, h, w])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderConfig {
    pub channels: usize,
    pub heads: usize,
    /// DDF at the S3/S2 junctions; plain fusion blocks otherwise.
    pub use_ddf: bool,
    pub freq_mode: FreqMode,
}

#[derive(Clone, Debug)]
pub struct HybridEncoder {
    pub cfg: EncoderConfig,
    pub aifi: Aifi,
    lateral5: Conv,
    lateral4: Conv,
    lateral3: Conv,
    pub td4: Junction,
    pub td3: Junction,
    pub td2: Junction,
    down2: Conv,
    down3: Conv,
    down4: Conv,
    pub bu3: Junction,
    pub bu4: Junction,
    pub bu5: Junction,
}

impl HybridEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.channels;
        if c % 4 != 0 {
            return Err(Error::Config(format!("encoder channels must be divisible by 4, got {c}")));
        }
        let fine = |store: &mut ParamStore, tag: &str, rng: &mut Rng| -> Result<Junction> {
            let n = format!("{name}.{tag}");
            Ok(if cfg.use_ddf {
                Junction::Ddf(DdfParams::new(store, &n, 2 * c, c, rng)?)
            } else {
                Junction::Fusion(FusionBlock::new(store, &n, 2 * c, c, rng))
            })
        };
        let coarse = |store: &mut ParamStore, tag: &str, rng: &mut Rng| {
            Junction::Fusion(FusionBlock::new(store, &format!("{name}.{tag}"), 2 * c, c, rng))
        };
        Ok(Self {
            cfg,
            aifi: Aifi::new(store, &format!("{name}.aifi"), c, cfg.heads, rng)?,
            lateral5: Conv::new(store, &format!("{name}.lat5"), c, c, 1, 1, rng),
            lateral4: Conv::new(store, &format!("{name}.lat4"), c, c, 1, 1, rng),
            lateral3: Conv::new(store, &format!("{name}.lat3"), c, c, 1, 1, rng),
            td4: coarse(store, "td4", rng),
            td3: fine(store, "td3", rng)?,
            td2: fine(store, "td2", rng)?,
            down2: Conv::new(store, &format!("{name}.down2"), c, c, 3, 2, rng),
            down3: Conv::new(store, &format!("{name}.down3"), c, c, 3, 2, rng),
            down4: Conv::new(store, &format!("{name}.down4"), c, c, 3, 2, rng),
            bu3: fine(store, "bu3", rng)?,
            bu4: coarse(store, "bu4", rng),
            bu5: coarse(store, "bu5", rng),
        })
    }

    pub fn forward(&self, s: &mut Session, pyr: &FeaturePyramid) -> Result<EncoderMemory> {
        self.forward_traced(s, pyr, None)
    }

    /// Like [`forward`](Self::forward), optionally collecting DDF intermediates
    /// (top-down S3, top-down S2, bottom-up S3 in that order).
    pub fn forward_traced(&self, s: &mut Session, pyr: &FeaturePyramid, mut trace: Option<&mut Vec<DdfTrace>>) -> Result<EncoderMemory> {
        pyr.validate(s, self.cfg.channels)?;
        let mode = self.cfg.freq_mode;
        let f5 = self.aifi.forward(s, pyr.s5)?;

        // top-down
        let lat5 = self.lateral5.forward(s, f5)?;
        let up = s.g.upsample_nearest2x(lat5)?;
        let cat = s.g.concat_rows(&[up, pyr.s4])?;
        let inner4 = self.td4.forward(s, cat, mode, trace.as_deref_mut())?;

        let lat4 = self.lateral4.forward(s, inner4)?;
        let up = s.g.upsample_nearest2x(lat4)?;
        let cat = s.g.concat_rows(&[up, pyr.s3])?;
        let inner3 = self.td3.forward(s, cat, mode, trace.as_deref_mut())?;

        let lat3 = self.lateral3.forward(s, inner3)?;
        let up = s.g.upsample_nearest2x(lat3)?;
        let cat = s.g.concat_rows(&[up, pyr.s2])?;
        let out2 = self.td2.forward(s, cat, mode, trace.as_deref_mut())?;

        // bottom-up
        let d = self.down2.forward(s, out2)?;
        let cat = s.g.concat_rows(&[d, lat3])?;
        let out3 = self.bu3.forward(s, cat, mode, trace.as_deref_mut())?;

        let d = self.down3.forward(s, out3)?;
        let cat = s.g.concat_rows(&[d, lat4])?;
        let out4 = self.bu4.forward(s, cat, mode, trace.as_deref_mut())?;

        let d = self.down4.forward(s, out4)?;
        let cat = s.g.concat_rows(&[d, lat5])?;
        let out5 = self.bu5.forward(s, cat, mode, trace.as_deref_mut())?;

        flatten_levels(s, &[out2, out3, out4, out5])
    }
}

/// Stacks `[C, H_l, W_l]` maps into `[Σ H_l·W_l, C]` tokens.
pub fn flatten_levels(s: &mut Session, levels: &[Var]) -> Result<EncoderMemory> {
    let mut parts = Vec::with_capacity(levels.len());
    let mut shapes = Vec::with_capacity(levels.len());
    for &l in levels {
        let sh = s.g.shape(l).to_vec();
        let flat = s.g.reshape(l, &[sh[0], sh[1] * sh[2]])?;
        parts.push(s.g.transpose(flat)?);
        shapes.push((sh[1], sh[2]));
    }
    let tokens = s.g.concat_rows(&parts)?;
    let (level_offsets, positions) = cell_centers(&shapes);
    Ok(EncoderMemory {
        tokens,
        level_offsets,
        level_shapes: shapes,
        positions,
    })
}

/// Constant pyramid for shape-only probing.
pub fn constant_pyramid(s: &mut Session, channels: usize, image: usize, value: f64) -> FeaturePyramid {
    let mut mk = |stride: usize| s.g.constant(Tensor::full(&[channels, image / stride, image / stride], value));
    FeaturePyramid {
        s2: mk(4),
        s3: mk(8),
        s4: mk(16),
        s5: mk(32),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(c: usize, use_ddf: bool) -> (ParamStore, HybridEncoder) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            channels: c,
            heads: 4,
            use_ddf,
            freq_mode: FreqMode::Gated,
        };
        let enc = HybridEncoder::new(&mut store, "enc", cfg, &mut Rng::new(1)).unwrap();
        (store, enc)
    }

    #[test]
    fn token_count_for_96px() {
        let (store, enc) = encoder(32, true);
        let mut s = Session::new(&store);
        let pyr = constant_pyramid(&mut s, 32, 96, 0.1);
        let mem = enc.forward(&mut s, &pyr).unwrap();
        assert_eq!(mem.len(), 765);
        assert_eq!(s.g.shape(mem.tokens), &[765, 32]);
        assert_eq!(mem.level_offsets, vec![0, 576, 720, 756]);
        assert_eq!(mem.level_shapes, vec![(24, 24), (12, 12), (6, 6), (3, 3)]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (store, enc) = encoder(8, false);
        let mut s = Session::new(&store);
        let pyr = constant_pyramid(&mut s, 12, 64, 0.0);
        assert!(matches!(enc.forward(&mut s, &pyr), Err(Error::Config(_))));
    }

    #[test]
    fn aifi_on_zero_input_is_spatially_constant() {
        // Values are a constant bias row, so position-dependent attention
        // weights average identical rows.
        let (store, enc) = encoder(8, true);
        let mut s = Session::new(&store);
        let x = s.g.constant(Tensor::zeros(&[8, 3, 3]));
        let y = enc.aifi.forward(&mut s, x).unwrap();
        let v = s.g.value(y);
        for c in 0..8 {
            let first = v.at(&[c, 0, 0]);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((v.at(&[c, i, j]) - first).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_input_is_deterministic_and_positions_fixed() {
        let (store, enc) = encoder(8, true);
        let run = |value: f64| {
            let mut s = Session::new(&store);
            let pyr = constant_pyramid(&mut s, 8, 64, value);
            let m = enc.forward(&mut s, &pyr).unwrap();
            (s.g.value(m.tokens).clone(), m.positions)
        };
        let (a, pa) = run(0.0);
        let (b, pb) = run(0.0);
        let (_, pc) = run(0.7);
        assert_eq!(a.data(), b.data());
        assert!(a.is_finite());
        assert_eq!(pa, pb);
        assert_eq!(pa, pc);
    }
}
