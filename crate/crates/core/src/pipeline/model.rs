//! Backbone, encoder head with query selection, refining decoder.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{ExpandParams, SIoUParams};
use crate::ddf::FreqMode;
use crate::encoder::{EncoderConfig, EncoderMemory, FeaturePyramid, HybridEncoder};
use crate::error::{shape_err, Error, Result};
use crate::eval::Detection;
use crate::matching::{HeadOutput, MatchConfig};
use crate::numerics::checkpoint;
use crate::numerics::nn::{sincos_2d, Conv, LayerNorm, Linear, Mha, ParamStore, Session};
use crate::numerics::{Rng, Tensor, Var};
use crate::query::{generate_anchors, logit, refine_graph, select_topk, AnchorSet, SelectionConfig};

/// Classification bias giving an initial probability of 0.01.
const PRIOR_BIAS: f64 = -4.59511985013459;
const CONFIG_ENTRY: &str = "meta.model_config";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub queries: usize,
    pub classes: usize,
    pub image_size: usize,
    pub alpha2: f64,
    pub theta: f64,
    pub freq_mode: FreqMode,
    /// DDF blocks at the fine junctions; fusion blocks otherwise.
    pub use_ddf: bool,
    /// Expanded-IoU soft targets for classification; plain IoU otherwise.
    pub eiou_select: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            decoder_layers: 2,
            heads: 4,
            queries: 60,
            classes: 3,
            image_size: 96,
            alpha2: 2.0,
            theta: 4.0,
            freq_mode: FreqMode::Gated,
            use_ddf: true,
            eiou_select: true,
        }
    }
}

impl ModelConfig {
    pub fn teacher() -> Self {
        Self {
            channels: 64,
            decoder_layers: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Config(format!("channels {} must be a positive multiple of 4", self.channels)));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!("{} channels not divisible into {} heads", self.channels, self.heads)));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.classes == 0 || self.queries == 0 {
            return Err(Error::Config("classes and queries must be positive".into()));
        }
        ExpandParams::new(self.alpha2)?;
        SIoUParams::new(self.theta)?;
        let tokens: usize = (2..=5).map(|l| (self.image_size >> l) * (self.image_size >> l)).sum();
        if self.queries > tokens {
            return Err(Error::Config(format!("{} queries exceed {tokens} anchors", self.queries)));
        }
        Ok(())
    }

    pub fn expand(&self) -> ExpandParams {
        ExpandParams { alpha2: self.alpha2 }
    }

    pub fn siou(&self) -> SIoUParams {
        SIoUParams { theta: self.theta }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            expand: self.expand(),
            siou: self.siou(),
            target_expand: if self.eiou_select { self.expand() } else { ExpandParams { alpha2: 1.0 } },
            ..Default::default()
        }
    }

    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        (2..=5).map(|l| (self.image_size >> l, self.image_size >> l)).collect()
    }
}

/// Two linear layers with GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub a: Linear,
    pub b: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, hidden: usize, dout: usize, rng: &mut Rng) -> Self {
        Self {
            a: Linear::new(store, &format!("{name}.0"), din, hidden, rng),
            b: Linear::new(store, &format!("{name}.1"), hidden, dout, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.a.forward(s, x)?;
        let h = s.g.gelu(h);
        self.b.forward(s, h)
    }

    fn zero_output(&self, store: &mut ParamStore) {
        for id in [self.b.w, self.b.b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Stride-2 stem, then four stages of a stride-2 and a stride-1 3×3 conv,
/// each followed by GELU; stage outputs projected to `C` channels.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Conv,
    pub stages: Vec<(Conv, Conv)>,
    pub proj: Vec<Conv>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, c: usize, rng: &mut Rng) -> Self {
        let widths = [c / 2, c, c, 2 * c];
        let stem = Conv::new(store, "backbone.stem", 1, c / 2, 3, 2, rng);
        let mut stages = Vec::new();
        let mut proj = Vec::new();
        let mut prev = c / 2;
        for (i, &w) in widths.iter().enumerate() {
            let a = Conv::new(store, &format!("backbone.stage{i}.down"), prev, w, 3, 2, rng);
            let b = Conv::new(store, &format!("backbone.stage{i}.conv"), w, w, 3, 1, rng);
            stages.push((a, b));
            proj.push(Conv::new(store, &format!("backbone.proj{i}"), w, c, 1, 1, rng));
            prev = w;
        }
        Self { stem, stages, proj }
    }

    /// `image`: `[1, H, W]` with `H`, `W` divisible by 32.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<FeaturePyramid> {
        let sh = s.g.shape(image).to_vec();
        if sh.len() != 3 || sh[0] != 1 || sh[1] % 32 != 0 || sh[2] % 32 != 0 || sh[1] == 0 || sh[2] == 0 {
            return Err(shape_err!("backbone expects [1, H, W] with H, W divisible by 32, got {sh:?}"));
        }
        let x = self.stem.forward(s, image)?;
        let mut x = s.g.gelu(x);
        let mut outs = Vec::with_capacity(4);
        for ((a, b), p) in self.stages.iter().zip(&self.proj) {
            let y = a.forward(s, x)?;
            let y = s.g.gelu(y);
            let y = b.forward(s, y)?;
            x = s.g.gelu(y);
            outs.push(p.forward(s, x)?);
        }
        Ok(FeaturePyramid {
            s2: outs[0],
            s3: outs[1],
            s4: outs[2],
            s5: outs[3],
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Mha,
    pub cross_attn: Mha,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
    pub ffn: Mlp,
    pub cls: Linear,
    pub bbox: Mlp,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.channels;
        let cls = Linear::new(store, &format!("{name}.cls"), c, cfg.classes, rng);
        store.get_mut(cls.b).data_mut().fill(PRIOR_BIAS);
        let bbox = Mlp::new(store, &format!("{name}.bbox"), c, c, 4, rng);
        bbox.zero_output(store);
        Ok(Self {
            self_attn: Mha::new(store, &format!("{name}.self_attn"), c, cfg.heads, rng)?,
            cross_attn: Mha::new(store, &format!("{name}.cross_attn"), c, cfg.heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), c),
            ffn: Mlp::new(store, &format!("{name}.ffn"), c, 2 * c, c, rng),
            cls,
            bbox,
        })
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Encoder head first, then one per decoder layer.
    pub heads: Vec<HeadOutput>,
    /// Encoder head over every valid anchor, in anchor order.
    pub dense: HeadOutput,
    /// Anchor index of each query.
    pub selected: Vec<usize>,
    /// Head-averaged cross-attention `[k, N]` of the last decoder layer.
    pub cross_attn: Option<Tensor>,
    pub memory: EncoderMemory,
}

impl ModelOutput {
    pub fn last(&self) -> HeadOutput {
        *self.heads.last().expect("at least the encoder head")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: HybridEncoder,
    pub enc_cls: Linear,
    pub enc_box: Mlp,
    pub decoder: Vec<DecoderLayer>,
    pub anchors: AnchorSet,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).fork(0x6d6f64656c);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let backbone = Backbone::new(&mut store, c, &mut rng);
        let enc_cfg = EncoderConfig {
            channels: c,
            heads: cfg.heads,
            use_ddf: cfg.use_ddf,
            freq_mode: cfg.freq_mode,
        };
        let encoder = HybridEncoder::new(&mut store, "encoder", enc_cfg, &mut rng)?;
        let enc_cls = Linear::new(&mut store, "head.cls", c, cfg.classes, &mut rng);
        store.get_mut(enc_cls.b).data_mut().fill(PRIOR_BIAS);
        let enc_box = Mlp::new(&mut store, "head.bbox", c, c, 4, &mut rng);
        enc_box.zero_output(&mut store);
        let decoder = (0..cfg.decoder_layers)
            .map(|l| DecoderLayer::new(&mut store, &format!("decoder.{l}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let sel = SelectionConfig {
            k: cfg.queries,
            ..Default::default()
        };
        let anchors = generate_anchors(&cfg.level_shapes(), &sel)?;
        Ok(Self {
            cfg,
            store,
            backbone,
            encoder,
            enc_cls,
            enc_box,
            decoder,
            anchors,
        })
    }

    pub fn forward(&self, s: &mut Session, image: &Tensor) -> Result<ModelOutput> {
        let x = s.g.constant(image.clone());
        let pyr = self.backbone.forward(s, x)?;
        let memory = self.encoder.forward(s, &pyr)?;
        self.heads(s, memory)
    }

    /// Encoder head, top-k selection and the decoder on top of `memory`.
    pub fn heads(&self, s: &mut Session, memory: EncoderMemory) -> Result<ModelOutput> {
        let cfg = &self.cfg;
        let tokens = memory.tokens;
        let logits = self.enc_cls.forward(s, tokens)?;
        let scores: Vec<f64> = s
            .g
            .value(logits)
            .data()
            .chunks(cfg.classes)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let selected = select_topk(&scores, &self.anchors.valid, cfg.queries)?;
        let valid: Vec<usize> = (0..self.anchors.len()).filter(|&i| self.anchors.valid[i]).collect();
        let dense_logits = s.g.gather_rows(logits, &valid)?;
        let dense_probs = s.g.sigmoid(dense_logits);
        let dense_tokens = s.g.gather_rows(tokens, &valid)?;
        let delta = self.enc_box.forward(s, dense_tokens)?;
        let anchor = s.g.constant(self.anchors.gather(&valid));
        let dense_boxes = refine_graph(&mut s.g, anchor, delta)?;
        let mut slot = vec![usize::MAX; self.anchors.len()];
        for (j, &i) in valid.iter().enumerate() {
            slot[i] = j;
        }
        let rows: Vec<usize> = selected.iter().map(|&i| slot[i]).collect();
        let probs = s.g.gather_rows(dense_probs, &rows)?;
        let boxes = s.g.gather_rows(dense_boxes, &rows)?;
        let query = s.g.gather_rows(tokens, &selected)?;
        let (layers, cross_attn) = self.decode(s, &memory, query, boxes)?;
        let mut heads = vec![HeadOutput { probs, boxes }];
        heads.extend(layers);
        Ok(ModelOutput {
            heads,
            dense: HeadOutput {
                probs: dense_probs,
                boxes: dense_boxes,
            },
            selected,
            cross_attn,
            memory,
        })
    }

    /// Decoder layers refining `query` `[k, C]` from initial `boxes` `[k, 4]`.
    pub fn decode(
        &self,
        s: &mut Session,
        memory: &EncoderMemory,
        mut query: Var,
        boxes: Var,
    ) -> Result<(Vec<HeadOutput>, Option<Tensor>)> {
        let c = self.cfg.channels;
        let tokens = memory.tokens;
        let mem_pos = s.g.constant(sincos_2d(&memory.positions, c));
        let keys = s.g.add(tokens, mem_pos)?;
        let mut reference = s.g.value(boxes).clone();
        let mut heads = Vec::with_capacity(self.decoder.len());
        let mut cross_attn = None;
        for layer in &self.decoder {
            let centers: Vec<(f64, f64)> = reference.data().chunks(4).map(|b| (b[0], b[1])).collect();
            let pos = s.g.constant(sincos_2d(&centers, c));

            let qk = s.g.add(query, pos)?;
            let (sa, _) = layer.self_attn.attend(s, qk, qk, query)?;
            let q = s.g.add(query, sa)?;
            let q = layer.ln1.forward(s, q)?;

            let qp = s.g.add(q, pos)?;
            let (ca, attn) = layer.cross_attn.attend(s, qp, keys, tokens)?;
            let q = s.g.add(q, ca)?;
            let q = layer.ln2.forward(s, q)?;

            let f = layer.ffn.forward(s, q)?;
            let q = s.g.add(q, f)?;
            query = layer.ln3.forward(s, q)?;

            let cl = layer.cls.forward(s, query)?;
            let probs = s.g.sigmoid(cl);
            let delta = layer.bbox.forward(s, query)?;
            let ref_logits = Tensor::new(reference.shape(), reference.data().iter().map(|&v| logit(v)).collect())?;
            let ref_logits = s.g.constant(ref_logits);
            let boxes = refine_graph(&mut s.g, ref_logits, delta)?;
            reference = s.g.value(boxes).clone();
            heads.push(HeadOutput { probs, boxes });
            cross_attn = Some(attn);
        }
        Ok((heads, cross_attn))
    }

    /// Top `max_dets` (query, class) pairs of the final head by score.
    pub fn detections(&self, s: &Session, out: &ModelOutput, max_dets: usize) -> Vec<Detection> {
        let (scores, boxes) = out.last().read(&s.g);
        let mut all: Vec<Detection> = Vec::with_capacity(scores.len() * self.cfg.classes);
        for (q, row) in scores.iter().enumerate() {
            for (label, &score) in row.iter().enumerate() {
                all.push(Detection {
                    bbox: boxes[q],
                    score,
                    label,
                });
            }
        }
        // stable: equal scores keep (query, class) order
        all.sort_by(|a, b| b.score.total_cmp(&a.score));
        all.truncate(max_dets);
        all
    }

    pub fn predict(&self, image: &Tensor, max_dets: usize) -> Result<Vec<Detection>> {
        let mut s = Session::frozen(&self.store);
        let out = self.forward(&mut s, image)?;
        Ok(self.detections(&s, &out, max_dets))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let json = serde_json::to_string(&self.cfg).expect("config serializes");
        let bytes: Vec<f64> = json.bytes().map(f64::from).collect();
        let mut e = vec![(CONFIG_ENTRY.to_string(), Tensor::new(&[bytes.len()], bytes).expect("non-empty config"))];
        e.extend(self.store.entries());
        e
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        Self::from_entries(entries)
    }

    pub fn from_entries(mut entries: Vec<(String, Tensor)>) -> Result<Self> {
        let pos = entries
            .iter()
            .position(|(n, _)| n == CONFIG_ENTRY)
            .ok_or_else(|| Error::Parse(format!("checkpoint lacks {CONFIG_ENTRY}")))?;
        let (_, t) = entries.remove(pos);
        let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
        let cfg: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("model config: {e}")))?;
        let mut m = Self::new(cfg, 0)?;
        m.store.load(&entries)?;
        Ok(m)
    }
}
