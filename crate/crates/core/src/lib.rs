//! Desk-scale small-object detection transformer.
//!
//! The crate covers a dual-domain (spatial + frequency) fusion encoder,
//! Expanded-IoU aware query selection and box losses, decoder-output
//! knowledge distillation, and the surrounding training / evaluation
//! machinery for a micro detector on synthetic scenes.

pub mod boxgeom;
pub mod config;
pub mod ddf;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod matching;
pub mod numerics;
pub mod pipeline;
pub mod query;

pub use boxgeom::{Box, BoxLossKind, ExpandParams, SIoUParams};
pub use config::RunConfig;
pub use ddf::FreqMode;
pub use distill::{KdConfig, KdIou, KdWeights, Schedule, ScheduleKind, TeacherQuery, TeacherRecord};
pub use error::{Error, Result};
pub use eval::{Detection, EvalConfig, ImageEval, Metrics};
pub use matching::{Assignment, CostMatrix, LossWeights, Target};
pub use numerics::{Graph, Rng, Tensor, Var};
pub use pipeline::model::{Model, ModelConfig};
pub use pipeline::scene::{Scene, SceneConfig};
pub use pipeline::train::{EpochLog, TrainConfig};
