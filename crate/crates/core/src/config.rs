//! Structured run configuration (`[scene]`, `[model]`, `[train]`, `[kd]`,
//! `[eval]` sections of `key = value` lines).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{ExpandParams, SIoUParams};
use crate::distill::{KdConfig, KdIou, KdWeights, ScheduleKind};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pipeline::model::ModelConfig;
use crate::pipeline::scene::SceneConfig;
use crate::pipeline::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdSection {
    pub schedule: ScheduleKind,
    pub iou: KdIou,
    pub w0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub conf_threshold: f64,
    pub teacher_checkpoint: Option<String>,
    pub replay: Option<String>,
}

impl Default for KdSection {
    fn default() -> Self {
        let w = KdWeights::default();
        Self {
            schedule: ScheduleKind::Linear,
            iou: KdIou::ExpandedSiou,
            w0: 1.0,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            conf_threshold: KdConfig::default().conf_threshold,
            teacher_checkpoint: None,
            replay: None,
        }
    }
}

impl KdSection {
    pub fn kd_config(&self, model: &ModelConfig) -> Result<KdConfig> {
        let weights = KdWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        };
        weights.validate()?;
        if !self.w0.is_finite() || self.w0 < 0.0 {
            return Err(Error::Config("kd.w0 must be finite and non-negative".into()));
        }
        Ok(KdConfig {
            weights,
            iou: self.iou,
            conf_threshold: self.conf_threshold,
            expand: ExpandParams::new(model.alpha2)?,
            siou: SIoUParams::new(model.theta)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_dets: usize,
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            max_dets: e.max_dets,
            iou_thresholds: e.iou_thresholds,
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self, image_size: usize) -> Result<EvalConfig> {
        let c = EvalConfig {
            iou_thresholds: self.iou_thresholds.clone(),
            max_dets: self.max_dets,
            image_size,
            ..Default::default()
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kd: KdSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.kd.kd_config(&self.model)?;
        self.eval.eval_config(self.model.image_size)?;
        if self.scene.classes != self.model.classes || self.scene.image_size != self.model.image_size {
            return Err(Error::Config("scene and model disagree on classes or image_size".into()));
        }
        Ok(())
    }
}
