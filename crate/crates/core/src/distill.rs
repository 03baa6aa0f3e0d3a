//! Response-based distillation from a frozen teacher's final decoder layer.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{expanded_iou_t, Box, BoxLossKind, ExpandParams, SIoUParams};
use crate::error::{Error, Result};
use crate::matching::{hungarian, l1, Assignment, CostMatrix, HeadOutput};
use crate::numerics::{bce_value, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5.0,
            gamma: 2.0,
        }
    }
}

impl KdWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("distillation weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha: self.alpha * k,
            beta: self.beta * k,
            gamma: self.gamma * k,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Cosine,
    #[default]
    Linear,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Constant, ScheduleKind::Cosine, ScheduleKind::Linear];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub w0: f64,
    pub total: usize,
}

/// Weight at step `t`; steps past `total` keep the final value.
pub fn schedule_weight(s: &Schedule, t: usize) -> f64 {
    if s.total == 0 {
        return match s.kind {
            ScheduleKind::Constant => s.w0,
            _ => 0.0,
        };
    }
    let t = t.min(s.total);
    let r = t as f64 / s.total as f64;
    match s.kind {
        ScheduleKind::Constant => s.w0,
        ScheduleKind::Linear => {
            if t == s.total {
                0.0
            } else {
                s.w0 * (1.0 - r)
            }
        }
        ScheduleKind::Cosine => {
            if t == s.total {
                0.0
            } else if 2 * t == s.total {
                s.w0 / 2.0
            } else {
                s.w0 * (1.0 + (std::f64::consts::PI * r).cos()) / 2.0
            }
        }
    }
}

/// Box term of the distillation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdIou {
    Giou,
    #[default]
    ExpandedSiou,
}

impl KdIou {
    pub const ALL: [KdIou; 2] = [KdIou::Giou, KdIou::ExpandedSiou];

    pub fn as_str(self) -> &'static str {
        match self {
            KdIou::Giou => "giou",
            KdIou::ExpandedSiou => "expanded-siou",
        }
    }

    pub fn loss_kind(self, e: ExpandParams, s: SIoUParams) -> BoxLossKind {
        match self {
            KdIou::Giou => BoxLossKind::Giou,
            KdIou::ExpandedSiou => BoxLossKind::ExpandedSiou {
                alpha2: e.alpha2,
                theta: s.theta,
            },
        }
    }
}

impl fmt::Display for KdIou {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KdIou {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KdIou::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown distillation IoU '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub weights: KdWeights,
    pub iou: KdIou,
    pub conf_threshold: f64,
    pub expand: ExpandParams,
    pub siou: SIoUParams,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            weights: KdWeights::default(),
            iou: KdIou::default(),
            conf_threshold: 0.3,
            expand: ExpandParams::default(),
            siou: SIoUParams::default(),
        }
    }
}

/// One teacher query from its final decoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherQuery {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub scores: Vec<f64>,
    pub obj: f64,
}

impl TeacherQuery {
    /// Object confidence is the maximum class score.
    pub fn new(bbox: [f64; 4], scores: Vec<f64>) -> Self {
        let obj = scores.iter().copied().fold(0.0, f64::max);
        Self { bbox, scores, obj }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub image_id: u64,
    pub queries: Vec<TeacherQuery>,
}

pub fn write_replay(path: &Path, records: &[TeacherRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_replay(path: &Path) -> Result<Vec<TeacherRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Student/teacher pairs after thresholding and assignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KdPairing {
    /// `(student query, teacher query)`
    pub pairs: Vec<(usize, usize)>,
}

impl KdPairing {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Keeps teacher queries with confidence at least `conf_threshold` and
/// assigns them to student queries with cost `−EIoU + L1`.
pub fn kd_pairing(student: &[Box], teacher: &[TeacherQuery], conf_threshold: f64, e: ExpandParams) -> KdPairing {
    let kept: Vec<usize> = (0..teacher.len()).filter(|&i| teacher[i].obj >= conf_threshold).collect();
    if kept.is_empty() || student.is_empty() {
        return KdPairing::default();
    }
    let mut data = Vec::with_capacity(kept.len() * student.len());
    for &t in &kept {
        let tb = teacher[t].bbox;
        for s in student {
            let sb = s.to_array();
            data.push(-expanded_iou_t(&sb, &tb, e.alpha2) + l1(&sb, &tb));
        }
    }
    let cost = CostMatrix::new(kept.len(), student.len(), data).expect("finite pairing cost");
    let a: Assignment = hungarian(&cost);
    let mut pairs: Vec<(usize, usize)> = a.pairs.iter().map(|&(t, s)| (s, kept[t])).collect();
    pairs.sort_unstable();
    KdPairing { pairs }
}

/// Mean soft-target binary cross-entropy.
pub fn kd_class_loss(s_c: &[f64], t_c: &[f64]) -> f64 {
    if s_c.is_empty() {
        return 0.0;
    }
    s_c.iter().zip(t_c).map(|(s, t)| bce_value(*s, *t)).sum::<f64>() / s_c.len() as f64
}

/// Value of [`kd_class_loss`] at `s_c == t_c`.
pub fn kd_class_floor(t_c: &[f64]) -> f64 {
    kd_class_loss(t_c, t_c)
}

/// Mean over pairs of the per-coordinate L1 distance weighted by teacher
/// confidence.
pub fn kd_box_loss(s_b: &[[f64; 4]], t_b: &[[f64; 4]], t_o: &[f64]) -> f64 {
    if s_b.is_empty() {
        return 0.0;
    }
    let s: f64 = s_b.iter().zip(t_b).zip(t_o).map(|((s, t), o)| l1(s, t) / 4.0 * o).sum();
    s / s_b.len() as f64
}

pub fn kd_iou_loss(s_b: &[[f64; 4]], t_b: &[[f64; 4]], kind: BoxLossKind) -> f64 {
    if s_b.is_empty() {
        return 0.0;
    }
    s_b.iter().zip(t_b).map(|(s, t)| kind.value(s, t)).sum::<f64>() / s_b.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub total: f64,
}

/// Teacher targets for one image laid out against a student head.
#[derive(Clone, Debug, PartialEq)]
pub struct KdBatch {
    /// `[k * classes]` soft targets; unpaired student queries keep 0.
    pub t_c: Vec<f64>,
    pub student_idx: Vec<usize>,
    pub t_b: Vec<[f64; 4]>,
    pub t_o: Vec<f64>,
}

impl KdBatch {
    pub fn build(k: usize, classes: usize, teacher: &[TeacherQuery], pairing: &KdPairing) -> Result<Self> {
        let mut t_c = vec![0.0; k * classes];
        let mut b = KdBatch {
            t_c: Vec::new(),
            student_idx: Vec::new(),
            t_b: Vec::new(),
            t_o: Vec::new(),
        };
        for &(s, t) in &pairing.pairs {
            let q = &teacher[t];
            if q.scores.len() != classes || s >= k {
                return Err(Error::Shape(format!(
                    "teacher query with {} classes paired to student {s} of {k}x{classes}",
                    q.scores.len()
                )));
            }
            t_c[s * classes..(s + 1) * classes].copy_from_slice(&q.scores);
            b.student_idx.push(s);
            b.t_b.push(q.bbox);
            b.t_o.push(q.obj);
        }
        b.t_c = t_c;
        Ok(b)
    }

    pub fn is_empty(&self) -> bool {
        self.student_idx.is_empty()
    }
}

/// `α·L_c + β·L_L1 + γ·L_IoU` on the student head; `None` when nothing is
/// paired.
pub fn kd_total(g: &mut Graph, head: &HeadOutput, batch: &KdBatch, cfg: &KdConfig) -> Result<Option<(Var, KdBreakdown)>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let w = cfg.weights;
    let n = g.value(head.probs).len() as f64;
    let m = batch.student_idx.len();
    let cls = g.bce(head.probs, &batch.t_c)?;
    let cls = g.scale(cls, 1.0 / n);

    let sb = g.gather_rows(head.boxes, &batch.student_idx)?;
    let tb = g.constant(Tensor::new(&[m, 4], batch.t_b.iter().flatten().copied().collect())?);
    let d = g.sub(sb, tb)?;
    let d = g.abs(d);
    let gate: Vec<f64> = batch.t_o.iter().flat_map(|o| [o / (4.0 * m as f64); 4]).collect();
    let gate = g.constant(Tensor::new(&[m, 4], gate)?);
    let d = g.mul(d, gate)?;
    let box_l1 = g.sum(d);

    let iou = g.box_loss(sb, tb, cfg.iou.loss_kind(cfg.expand, cfg.siou))?;
    let iou = g.mean(iou);

    let a = g.scale(cls, w.alpha);
    let b = g.scale(box_l1, w.beta);
    let c = g.scale(iou, w.gamma);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    let br = KdBreakdown {
        cls: g.scalar(cls),
        l1: g.scalar(box_l1),
        iou: g.scalar(iou),
        total: g.scalar(total),
    };
    Ok(Some((total, br)))
}
