//! Inspection of a trained model: DDF intermediate maps, decoder
//! cross-attention, and the literal/gated frequency-mode comparison.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::ddf::{log_spectrum, FreqMode};
use crate::error::{Error, Result};
use crate::numerics::nn::Session;
use crate::numerics::{Graph, Tensor};
use crate::pipeline::model::Model;
use crate::pipeline::scene::Scene;

/// Channel mean of a `[C, H, W]` tensor.
pub fn channel_mean(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W], got {s:?}")));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; hw];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&t.data()[ch * hw..(ch + 1) * hw]) {
            *o += v / c as f64;
        }
    }
    Tensor::new(&[s[1], s[2]], out)
}

/// Binary 8-bit PGM of a `[H, W]` map scaled to its own min/max; a flat map
/// is written as all zeros.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("PGM needs [H,W], got {s:?}")));
    }
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{} {}\n255\n", s[1], s[0]).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct DemoReport {
    /// Map name and `[H, W]` values.
    #[serde(skip)]
    pub maps: Vec<(String, Tensor)>,
    /// Max |IFFT(FFT(x)) − x| over the frequency operands.
    pub literal_identity_delta: f64,
    /// L2 norm of the encoder-memory difference between the two frequency modes.
    pub mode_delta_norm: f64,
    /// Attention mass on object cells over the uniform share.
    pub attention_ratio: Option<f64>,
}

fn max_flat(t: &Tensor) -> bool {
    let d = t.data();
    d.iter().all(|v| (v - d[0]).abs() < 1e-12)
}

impl DemoReport {
    pub fn flat_maps(&self) -> Vec<&str> {
        self.maps.iter().filter(|(_, t)| max_flat(t)).map(|(n, _)| n.as_str()).collect()
    }
}

fn encoder_tokens(model: &Model, image: &Tensor, mode: FreqMode) -> Result<Tensor> {
    let mut m = model.clone();
    m.encoder.cfg.freq_mode = mode;
    let mut s = Session::frozen(&m.store);
    let x = s.g.constant(image.clone());
    let pyr = m.backbone.forward(&mut s, x)?;
    let mem = m.encoder.forward(&mut s, &pyr)?;
    Ok(s.g.value(mem.tokens).clone())
}

pub fn ddf_demo(model: &Model, scene: &Scene) -> Result<DemoReport> {
    let image = scene.to_tensor();
    let mut s = Session::frozen(&model.store);
    let x = s.g.constant(image.clone());
    let pyr = model.backbone.forward(&mut s, x)?;
    let mut traces = Vec::new();
    let memory = model.encoder.forward_traced(&mut s, &pyr, Some(&mut traces))?;
    let mut maps = vec![("input".to_string(), Tensor::new(&[scene.size, scene.size], image.data().to_vec())?)];
    let names = ["td_s3", "td_s2", "bu_s3"];
    let mut identity_delta: f64 = 0.0;
    for (tr, name) in traces.iter().zip(names) {
        maps.push((format!("{name}_abs_conv"), channel_mean(s.g.value(tr.abs_conv))?));
        maps.push((format!("{name}_spectrum"), channel_mean(&log_spectrum(s.g.value(tr.freq_inputs.0))?)?));
        maps.push((format!("{name}_x_out"), channel_mean(s.g.value(tr.x_out))?));
        let fa = s.g.value(tr.freq_inputs.0).clone();
        let mut g = Graph::new();
        let v = g.constant(fa.clone());
        let rt = g.fft_roundtrip(v)?;
        identity_delta = identity_delta.max(g.value(rt).max_abs_diff(&fa));
    }
    let out = model.heads(&mut s, memory)?;
    let mut attention_ratio = None;
    if let Some(attn) = &out.cross_attn {
        let n = out.memory.len();
        let (h2, w2) = out.memory.level_shapes[0];
        let k = attn.shape()[0];
        // mean attention of all queries on the finest level
        let mut fine = vec![0.0; h2 * w2];
        for q in 0..k {
            for (f, a) in fine.iter_mut().zip(&attn.data()[q * n..q * n + h2 * w2]) {
                *f += a / k as f64;
            }
        }
        maps.push(("cross_attn_s2".into(), Tensor::new(&[h2, w2], fine)?));
        attention_ratio = attention_mass_ratio(&out, attn, &s.g, scene);
    }
    let lit = encoder_tokens(model, &image, FreqMode::Literal)?;
    let gat = encoder_tokens(model, &image, FreqMode::Gated)?;
    let mode_delta_norm = lit.data().iter().zip(gat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(DemoReport {
        maps,
        literal_identity_delta: identity_delta,
        mode_delta_norm,
        attention_ratio,
    })
}

/// For the `#gt` highest-scoring queries: attention mass on tokens whose
/// cell overlaps a ground-truth box, divided by the share of such tokens.
fn attention_mass_ratio(out: &crate::pipeline::model::ModelOutput, attn: &Tensor, g: &Graph, scene: &Scene) -> Option<f64> {
    if scene.annotations.is_empty() {
        return None;
    }
    let mem = &out.memory;
    let n = mem.len();
    let mut inside = vec![false; n];
    for (l, &(h, w)) in mem.level_shapes.iter().enumerate() {
        let off = mem.level_offsets[l];
        for i in 0..h {
            for j in 0..w {
                let cell = [j as f64 / w as f64, i as f64 / h as f64, (j + 1) as f64 / w as f64, (i + 1) as f64 / h as f64];
                inside[off + i * w + j] = scene.annotations.iter().any(|a| {
                    let b = a.bbox.to_corners();
                    b[0] < cell[2] && cell[0] < b[2] && b[1] < cell[3] && cell[1] < b[3]
                });
            }
        }
    }
    let share = inside.iter().filter(|&&v| v).count() as f64 / n as f64;
    if share == 0.0 {
        return None;
    }
    let (scores, _) = out.last().read(g);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let best = |q: usize| scores[q].iter().copied().fold(0.0, f64::max);
    order.sort_by(|&a, &b| best(b).total_cmp(&best(a)));
    let top = &order[..scene.annotations.len().min(order.len())];
    let mass: f64 = top
        .iter()
        .map(|&q| (0..n).filter(|&t| inside[t]).map(|t| attn.data()[q * n + t]).sum::<f64>())
        .sum::<f64>()
        / top.len() as f64;
    Some(mass / share)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::model::ModelConfig;
    use crate::pipeline::scene::{gen_scene, SceneConfig};

    fn small(mode: FreqMode) -> Model {
        let cfg = ModelConfig {
            channels: 8,
            heads: 2,
            queries: 10,
            decoder_layers: 1,
            freq_mode: mode,
            ..Default::default()
        };
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn literal_mode_is_identity_and_reports_maps() {
        let scene = gen_scene(&SceneConfig::default(), 0);
        let r = ddf_demo(&small(FreqMode::Literal), &scene).unwrap();
        assert!(r.literal_identity_delta < 1e-9);
        assert_eq!(r.maps.len(), 1 + 9 + 1);
        assert!(r.mode_delta_norm > 0.0);
        assert!(r.attention_ratio.unwrap() > 0.0);
    }

    #[test]
    fn zero_image_demo_is_deterministic() {
        let scene = Scene {
            id: 0,
            size: 96,
            pixels: vec![0; 96 * 96],
            annotations: vec![],
        };
        let m = small(FreqMode::Gated);
        let r = ddf_demo(&m, &scene).unwrap();
        assert!(r.attention_ratio.is_none());
        assert_eq!(r.flat_maps().first(), Some(&"input"));
        let again = ddf_demo(&m, &scene).unwrap();
        for ((n, a), (_, b)) in r.maps.iter().zip(&again.maps) {
            assert_eq!(a.data(), b.data(), "{n}");
            assert!(a.is_finite());
        }
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &Tensor::new(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&b[b.len() - 6..], &[0, 51, 102, 153, 204, 255]);
    }
}
