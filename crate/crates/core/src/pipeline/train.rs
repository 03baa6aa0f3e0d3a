//! Training and distillation loops.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{kd_pairing, kd_total, schedule_weight, KdBatch, KdBreakdown, KdConfig, Schedule, ScheduleKind, TeacherQuery, TeacherRecord};
use crate::error::{Error, Result};
use crate::eval::{ap50, EvalConfig, ImageEval};
use crate::matching::{detection_loss, hungarian, matching_cost, LossBreakdown};
use crate::numerics::nn::Session;
use crate::numerics::{Rng, Tensor};
use crate::pipeline::model::{Model, ModelConfig};
use crate::pipeline::scene::Scene;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Optimizer steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            warmup_steps: 250,
            seed: 0,
            optimizer: OptimizerKind::Adamw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// Distillation settings for a student run.
#[derive(Clone, Debug)]
pub struct KdSetup {
    /// Teacher final-layer queries keyed by scene id.
    pub teacher: HashMap<u64, Vec<TeacherQuery>>,
    pub cfg: KdConfig,
    pub schedule: ScheduleKind,
    pub w0: f64,
}

impl KdSetup {
    pub fn from_records(records: Vec<TeacherRecord>, cfg: KdConfig, schedule: ScheduleKind, w0: f64) -> Self {
        Self {
            teacher: records.into_iter().map(|r| (r.image_id, r.queries)).collect(),
            cfg,
            schedule,
            w0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_iou: f64,
    pub kd_weight: f64,
    pub kd_total: f64,
    pub val_ap50: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

pub struct TrainOutcome {
    /// Parameters with the best validation AP50 (the last epoch without validation data).
    pub best: Model,
    /// Parameters after the last step.
    pub last: Model,
    pub logs: Vec<EpochLog>,
    pub best_ap50: Option<f64>,
    pub best_epoch: usize,
}

enum Optimizer {
    Sgd,
    Adamw { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: i32 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adamw => Optimizer::Adamw {
                m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                t: 0,
            },
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64, wd: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        if let Optimizer::Adamw { t, .. } = self {
            *t += 1;
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = model.store.get_mut(id);
            // decay only weight matrices and kernels
            let decay = if p.rank() >= 2 { lr * wd } else { 0.0 };
            let g = &grads[i];
            match self {
                Optimizer::Sgd => {
                    for (x, d) in p.data_mut().iter_mut().zip(g) {
                        *x -= lr * d + decay * *x;
                    }
                }
                Optimizer::Adamw { m, v, t } => {
                    let c1 = 1.0 - B1.powi(*t);
                    let c2 = 1.0 - B2.powi(*t);
                    for ((x, d), (mm, vv)) in p.data_mut().iter_mut().zip(g).zip(m[i].iter_mut().zip(v[i].iter_mut())) {
                        *mm = B1 * *mm + (1.0 - B1) * d;
                        *vv = B2 * *vv + (1.0 - B2) * d * d;
                        let upd = (*mm / c1) / ((*vv / c2).sqrt() + EPS);
                        *x -= lr * upd + decay * *x;
                    }
                }
            }
        }
    }
}

/// Loss terms of one image.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLoss {
    pub det: LossBreakdown,
    pub det_total: f64,
    pub kd: Option<KdBreakdown>,
}

/// Forward, loss and backward for one scene; gradients are added into `grads`.
pub fn image_step(
    model: &Model,
    image: &Tensor,
    scene: &Scene,
    kd: Option<(&[TeacherQuery], &KdConfig, f64)>,
    grads: &mut [Vec<f64>],
) -> Result<StepLoss> {
    let mcfg = model.cfg.match_config();
    let mut s = Session::new(&model.store);
    let out = model.forward(&mut s, image)?;
    let last = out.last();
    let (scores, boxes) = last.read(&s.g);
    // the encoder head is matched over all valid anchors, the decoder layers share the final assignment
    let (dense_scores, dense_boxes) = out.dense.read(&s.g);
    let dense_cost = matching_cost(&dense_scores, &dense_boxes, &scene.annotations, &mcfg)?;
    let (mut loss, mut det) = detection_loss(&mut s.g, &[out.dense], &scene.annotations, &hungarian(&dense_cost), &mcfg)?;
    if out.heads.len() > 1 {
        let cost = matching_cost(&scores, &boxes, &scene.annotations, &mcfg)?;
        let (dl, br) = detection_loss(&mut s.g, &out.heads[1..], &scene.annotations, &hungarian(&cost), &mcfg)?;
        loss = s.g.add(loss, dl)?;
        det.cls += br.cls;
        det.l1 += br.l1;
        det.iou += br.iou;
    }
    let det_total = s.g.scalar(loss);
    let mut kd_br = None;
    if let Some((teacher, kcfg, w)) = kd {
        if w > 0.0 {
            let pairing = kd_pairing(&boxes, teacher, kcfg.conf_threshold, kcfg.expand);
            let batch = KdBatch::build(boxes.len(), model.cfg.classes, teacher, &pairing)?;
            if let Some((kv, br)) = kd_total(&mut s.g, &last, &batch, kcfg)? {
                let kv = s.g.scale(kv, w);
                loss = s.g.add(loss, kv)?;
                kd_br = Some(br);
            }
        }
    }
    let total = s.g.scalar(loss);
    if !total.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {total} on scene {}", scene.id)));
    }
    let g = s.g.backward(loss)?;
    s.accumulate(&g, grads);
    Ok(StepLoss { det, det_total, kd: kd_br })
}

/// Replays the frozen teacher over `scenes`.
pub fn teacher_replay(teacher: &Model, scenes: &[Scene]) -> Result<Vec<TeacherRecord>> {
    scenes
        .iter()
        .map(|sc| {
            let mut s = Session::frozen(&teacher.store);
            let out = teacher.forward(&mut s, &sc.to_tensor())?;
            let (scores, boxes) = out.last().read(&s.g);
            let queries = scores
                .into_iter()
                .zip(boxes)
                .map(|(sc, b)| TeacherQuery::new(b.to_array(), sc))
                .collect();
            Ok(TeacherRecord {
                image_id: sc.id,
                queries,
            })
        })
        .collect()
}

pub fn eval_inputs(model: &Model, scenes: &[Scene], max_dets: usize) -> Result<Vec<ImageEval>> {
    scenes
        .iter()
        .map(|sc| {
            Ok(ImageEval {
                dets: model.predict(&sc.to_tensor(), max_dets)?,
                gts: sc.annotations.clone(),
            })
        })
        .collect()
}

pub fn validation_ap50(model: &Model, scenes: &[Scene]) -> Result<Option<f64>> {
    let cfg = EvalConfig {
        image_size: model.cfg.image_size,
        ..Default::default()
    };
    let ims = eval_inputs(model, scenes, cfg.max_dets)?;
    ap50(&ims, model.cfg.classes, &cfg)
}

fn append_jsonl<T: Serialize>(path: &Path, rec: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains a fresh model; with `kd`, each step adds the scheduled
/// distillation loss to the detection loss.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    kd: Option<&KdSetup>,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(*model_cfg, cfg.seed)?;
    train_model(model, cfg, train_set, val_set, kd, outputs)
}

pub fn train_model(
    mut model: Model,
    cfg: &TrainConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    kd: Option<&KdSetup>,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if let Some(k) = kd {
        k.cfg.weights.validate()?;
        if let Some(sc) = train_set.iter().find(|s| !k.teacher.contains_key(&s.id)) {
            return Err(Error::Config(format!("teacher outputs missing for scene {}", sc.id)));
        }
    }
    if let Some(p) = &outputs.metrics {
        std::fs::write(p, b"").map_err(|e| Error::io(p, e))?;
    }
    let images: Vec<Tensor> = train_set.iter().map(Scene::to_tensor).collect();
    let sizes: Vec<usize> = model.store.ids().map(|id| model.store.get(id).len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, &sizes);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = kd.map(|k| Schedule {
        kind: k.schedule,
        w0: k.w0,
        total: cfg.epochs * steps_per_epoch,
    });
    let mut order_rng = Rng::new(cfg.seed).fork(0x6f72646572);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelSnapshot)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order_rng.shuffle(&mut order);
        let mut acc = EpochLog {
            epoch,
            loss_total: 0.0,
            loss_cls: 0.0,
            loss_l1: 0.0,
            loss_iou: 0.0,
            kd_weight: 0.0,
            kd_total: 0.0,
            val_ap50: None,
        };
        for batch in order.chunks(cfg.batch_size) {
            let w = schedule.as_ref().map_or(0.0, |s| schedule_weight(s, step));
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &i in batch {
                let teacher = kd.map(|k| (k.teacher[&train_set[i].id].as_slice(), &k.cfg, w));
                let l = image_step(&model, &images[i], &train_set[i], teacher, &mut grads)?;
                let kd_v = l.kd.map_or(0.0, |b| b.total);
                acc.loss_total += l.det_total + w * kd_v;
                acc.loss_cls += l.det.cls;
                acc.loss_l1 += l.det.l1;
                acc.loss_iou += l.det.iou;
                acc.kd_total += kd_v;
            }
            let inv = 1.0 / batch.len() as f64;
            let mut norm2 = 0.0;
            for g in grads.iter_mut() {
                for x in g.iter_mut() {
                    *x *= inv;
                    norm2 += *x * *x;
                }
            }
            let norm = norm2.sqrt();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let k = cfg.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|x| *x *= k);
            }
            let lr = if step < cfg.warmup_steps {
                cfg.learning_rate * (step + 1) as f64 / (cfg.warmup_steps + 1) as f64
            } else {
                cfg.learning_rate
            };
            opt.step(&mut model, &grads, lr, cfg.weight_decay);
            acc.kd_weight = w;
            step += 1;
        }
        let n = train_set.len() as f64;
        acc.loss_total /= n;
        acc.loss_cls /= n;
        acc.loss_l1 /= n;
        acc.loss_iou /= n;
        acc.kd_total /= n;
        if !model.store.iter().all(|(_, t)| t.is_finite()) {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }
        if !val_set.is_empty() {
            acc.val_ap50 = validation_ap50(&model, val_set)?;
        }
        let score = acc.val_ap50.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| score > b.0 || val_set.is_empty()) {
            best = Some((score, epoch, ModelSnapshot::of(&model)));
            if let Some(p) = &outputs.checkpoint {
                model.save(p)?;
            }
        }
        if let Some(p) = &outputs.metrics {
            append_jsonl(p, &acc)?;
        }
        logs.push(acc);
    }
    let (score, best_epoch, snap) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: snap.restore(&model)?,
        last: model,
        logs,
        best_ap50: score.is_finite().then_some(score),
        best_epoch,
    })
}

struct ModelSnapshot(Vec<(String, Tensor)>);

impl ModelSnapshot {
    fn of(m: &Model) -> Self {
        Self(m.store.entries())
    }

    fn restore(&self, like: &Model) -> Result<Model> {
        let mut m = like.clone();
        m.store.load(&self.0)?;
        Ok(m)
    }
}

/// Moving average over `window` consecutive values.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::scene::{gen_dataset, SceneConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            channels: 8,
            heads: 2,
            queries: 12,
            decoder_layers: 1,
            ..Default::default()
        }
    }

    fn data(n: usize) -> Vec<Scene> {
        gen_dataset(&SceneConfig { seed: 5, ..Default::default() }, n).unwrap()
    }

    #[test]
    fn one_epoch_writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let outs = TrainOutputs {
            checkpoint: Some(dir.path().join("m.ckpt")),
            metrics: Some(dir.path().join("metrics.jsonl")),
        };
        let d = data(10);
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let r = train(&tiny_model(), &cfg, &d[..8], &d[8..], None, &outs).unwrap();
        assert_eq!(r.logs.len(), 1);
        let text = std::fs::read_to_string(outs.metrics.as_ref().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 1);
        let rec: EpochLog = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec, r.logs[0]);
        let m = Model::load(outs.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(m.store.checksum(), r.best.store.checksum());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = data(4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            learning_rate: 0.0,
            ..Default::default()
        };
        let init = Model::new(tiny_model(), cfg.seed).unwrap();
        let r = train(&tiny_model(), &cfg, &d, &[], None, &TrainOutputs::default()).unwrap();
        assert_eq!(r.last.store.checksum(), init.store.checksum());
        for (a, b) in r.last.store.iter().zip(init.store.iter()) {
            assert_eq!(a.1.data(), b.1.data());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let d = data(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        let a = train(&tiny_model(), &cfg, &d, &[], None, &TrainOutputs::default()).unwrap();
        let b = train(&tiny_model(), &cfg, &d, &[], None, &TrainOutputs::default()).unwrap();
        assert_eq!(a.last.store.checksum(), b.last.store.checksum());
        assert_eq!(a.logs, b.logs);
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let d = data(3);
        let m = Model::new(tiny_model(), 1).unwrap();
        let mut grads: Vec<Vec<f64>> = m.store.ids().map(|id| vec![0.0; m.store.get(id).len()]).collect();
        for sc in &d {
            image_step(&m, &sc.to_tensor(), sc, None, &mut grads).unwrap();
        }
        let names: Vec<&str> = m.store.ids().map(|id| m.store.name(id)).collect();
        for group in ["backbone.", "encoder.aifi", "alpha1", "beta1", "encoder.", "head.", "decoder."] {
            let hit = names
                .iter()
                .zip(&grads)
                .any(|(n, g)| n.contains(group) && g.iter().any(|v| *v != 0.0));
            assert!(hit, "{group} received no gradient");
        }
    }

    #[test]
    fn zero_weight_distillation_matches_plain_training() {
        let d = data(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        let teacher = Model::new(tiny_model(), 77).unwrap();
        let rec = teacher_replay(&teacher, &d).unwrap();
        let kd = KdSetup::from_records(rec, KdConfig::default(), ScheduleKind::Linear, 0.0);
        let a = train(&tiny_model(), &cfg, &d, &[], None, &TrainOutputs::default()).unwrap();
        let b = train(&tiny_model(), &cfg, &d, &[], Some(&kd), &TrainOutputs::default()).unwrap();
        assert_eq!(a.last.store.checksum(), b.last.store.checksum());
        let before = teacher.store.checksum();
        // an untrained teacher never clears the default confidence threshold
        let kd1 = KdSetup {
            w0: 1.0,
            cfg: KdConfig {
                conf_threshold: 0.0,
                ..Default::default()
            },
            ..kd
        };
        let c = train(&tiny_model(), &cfg, &d, &[], Some(&kd1), &TrainOutputs::default()).unwrap();
        assert_ne!(c.last.store.checksum(), a.last.store.checksum());
        assert!(c.logs.iter().all(|l| l.kd_total > 0.0));
        assert_eq!(teacher.store.checksum(), before);
    }

    #[test]
    fn missing_teacher_is_config_error() {
        let d = data(2);
        let kd = KdSetup::from_records(vec![], KdConfig::default(), ScheduleKind::Linear, 1.0);
        let r = train(&tiny_model(), &TrainConfig::default(), &d, &[], Some(&kd), &TrainOutputs::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(smoothed(&[1.0], 5).is_empty());
    }
}
