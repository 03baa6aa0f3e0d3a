//! Multi-run drivers: the 2×2 mechanism ablation and the distillation grid.

use serde::{Deserialize, Serialize};

use crate::distill::{KdConfig, KdIou, ScheduleKind, TeacherRecord};
use crate::error::Result;
use crate::pipeline::model::ModelConfig;
use crate::pipeline::scene::Scene;
use crate::pipeline::train::{train, KdSetup, TrainConfig, TrainOutputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seeds: Vec<u64>,
    pub ap50: Vec<f64>,
    pub mean_ap50: f64,
}

impl ArmResult {
    fn new(arm: String, seeds: &[u64], ap50: Vec<f64>) -> Self {
        let mean_ap50 = ap50.iter().sum::<f64>() / ap50.len().max(1) as f64;
        Self {
            arm,
            seeds: seeds.to_vec(),
            ap50,
            mean_ap50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationArm {
    pub eiou_select: bool,
    pub use_ddf: bool,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm {
            eiou_select: false,
            use_ddf: false,
        },
        AblationArm {
            eiou_select: true,
            use_ddf: false,
        },
        AblationArm {
            eiou_select: false,
            use_ddf: true,
        },
        AblationArm {
            eiou_select: true,
            use_ddf: true,
        },
    ];

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        format!("query-select={} encoder-ddf={}", mark(self.eiou_select), mark(self.use_ddf))
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            eiou_select: self.eiou_select,
            use_ddf: self.use_ddf,
            ..*base
        }
    }
}

/// Validation AP50 of the best epoch for each seed.
pub fn seed_runs(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    train_set: &[Scene],
    val_set: &[Scene],
    kd: Option<&KdSetup>,
) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..*train_cfg };
            let r = train(model, &cfg, train_set, val_set, kd, &TrainOutputs::default())?;
            Ok(r.best_ap50.unwrap_or(0.0))
        })
        .collect()
}

pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    train_set: &[Scene],
    val_set: &[Scene],
    mut progress: impl FnMut(&ArmResult),
) -> Result<Vec<ArmResult>> {
    let mut out = Vec::new();
    for arm in AblationArm::ALL {
        let ap = seed_runs(&arm.apply(base), train_cfg, seeds, train_set, val_set, None)?;
        let r = ArmResult::new(arm.label(), seeds, ap);
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KdArm {
    pub schedule: ScheduleKind,
    pub iou: KdIou,
}

impl KdArm {
    pub fn all() -> Vec<KdArm> {
        ScheduleKind::ALL
            .iter()
            .flat_map(|&schedule| KdIou::ALL.iter().map(move |&iou| KdArm { schedule, iou }))
            .collect()
    }

    pub fn label(&self) -> String {
        format!("+{} + {}", self.schedule, self.iou)
    }
}

/// Undistilled student first, then one row per (schedule, box loss) arm.
#[allow(clippy::too_many_arguments)]
pub fn run_kd_grid(
    student: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    arms: &[(KdArm, Vec<u64>)],
    teacher: &[TeacherRecord],
    kd_cfg: &KdConfig,
    w0: f64,
    train_set: &[Scene],
    val_set: &[Scene],
    mut progress: impl FnMut(&ArmResult),
) -> Result<Vec<ArmResult>> {
    let mut out = Vec::new();
    let base = seed_runs(student, train_cfg, seeds, train_set, val_set, None)?;
    let r = ArmResult::new("student".into(), seeds, base);
    progress(&r);
    out.push(r);
    for (arm, arm_seeds) in arms {
        let kd = KdSetup::from_records(teacher.to_vec(), KdConfig { iou: arm.iou, ..*kd_cfg }, arm.schedule, w0);
        let ap = seed_runs(student, train_cfg, arm_seeds, train_set, val_set, Some(&kd))?;
        let r = ArmResult::new(arm.label(), arm_seeds, ap);
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

/// Markdown table of arm results.
pub fn format_table(rows: &[ArmResult]) -> String {
    let mut s = String::from("| arm | seeds | AP50 per seed | mean AP50 |\n|---|---|---|---|\n");
    for r in rows {
        let per: Vec<String> = r.ap50.iter().map(|v| format!("{v:.4}")).collect();
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        s.push_str(&format!("| {} | {} | {} | {:.4} |\n", r.arm, seeds.join(","), per.join(", "), r.mean_ap50));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_labels() {
        assert_eq!(AblationArm::ALL.len(), 4);
        assert_eq!(AblationArm::ALL[3].label(), "query-select=yes encoder-ddf=yes");
        let arms = KdArm::all();
        assert_eq!(arms.len(), 6);
        assert!(arms.iter().any(|a| a.label() == "+linear + expanded-siou"));
    }

    #[test]
    fn table_format() {
        let t = format_table(&[ArmResult::new("x".into(), &[1, 2], vec![0.5, 0.25])]);
        assert!(t.contains("| x | 1,2 | 0.5000, 0.2500 | 0.3750 |"));
    }
}
