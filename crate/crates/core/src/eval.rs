//! COCO-style detection metrics.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou_t, Box};
use crate::error::{Error, Result};
use crate::matching::Target;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box,
    pub score: f64,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    /// Pixel-area edges between small/medium and medium/large.
    pub size_edges: (f64, f64),
    pub max_dets: usize,
    /// Side of the evaluated image in pixels; boxes are normalized.
    pub image_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_points: 101,
            size_edges: (32.0 * 32.0, 96.0 * 96.0),
            max_dets: 100,
            image_size: 96,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() || t.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("IoU thresholds must be strictly increasing within (0, 1]".into()));
        }
        if self.recall_points < 2 || self.max_dets == 0 || self.image_size == 0 {
            return Err(Error::Config("recall_points >= 2, max_dets >= 1 and image_size >= 1 required".into()));
        }
        Ok(())
    }

    fn ap50_index(&self) -> Option<usize> {
        self.iou_thresholds.iter().position(|t| (t - 0.5).abs() < 1e-12)
    }
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub dets: Vec<Detection>,
    pub gts: Vec<Target>,
}

/// For detections in the given order: the matched ground-truth index, if any.
/// Each detection takes the highest-IoU unmatched same-class ground truth
/// with IoU at least `threshold`.
pub fn match_detections(dets: &[Detection], gts: &[Target], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.label != d.label {
                    continue;
                }
                let v = iou_t(&d.bbox.to_array(), &g.bbox.to_array());
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub interpolated: Vec<f64>,
}

impl PrCurve {
    /// `tp` flags in descending score order against `n_gt` ground truths.
    pub fn new(tp: &[bool], n_gt: usize, recall_points: usize) -> Self {
        let mut precision = Vec::with_capacity(tp.len());
        let mut recall = Vec::with_capacity(tp.len());
        let mut hits = 0usize;
        for (i, &t) in tp.iter().enumerate() {
            hits += t as usize;
            precision.push(hits as f64 / (i + 1) as f64);
            recall.push(if n_gt == 0 { 0.0 } else { hits as f64 / n_gt as f64 });
        }
        let mut envelope = precision.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let interpolated = (0..recall_points)
            .map(|r| {
                let level = r as f64 / (recall_points - 1) as f64;
                // first position reaching this recall level
                let pos = recall.partition_point(|&x| x < level - 1e-12);
                envelope.get(pos).copied().unwrap_or(0.0)
            })
            .collect();
        Self {
            precision,
            recall,
            interpolated,
        }
    }

    pub fn ap(&self) -> f64 {
        self.interpolated.iter().sum::<f64>() / self.interpolated.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bucket {
    All,
    Range(f64, f64),
}

impl Bucket {
    fn contains(self, area: f64) -> bool {
        match self {
            Bucket::All => true,
            Bucket::Range(lo, hi) => area >= lo && area < hi,
        }
    }
}

/// Per-threshold, per-class AP; `None` where the class has no ground truth.
fn ap_table(images: &[ImageEval], classes: usize, cfg: &EvalConfig, bucket: Bucket) -> Vec<Vec<Option<f64>>> {
    let px = (cfg.image_size * cfg.image_size) as f64;
    let area = |b: &Box| b.w * b.h * px;
    let ranked: Vec<Vec<Detection>> = images
        .iter()
        .map(|im| {
            let mut d = im.dets.clone();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d.truncate(cfg.max_dets);
            d
        })
        .collect();
    let mut table = Vec::with_capacity(cfg.iou_thresholds.len());
    for &t in &cfg.iou_thresholds {
        // (score, image, rank, counted, tp) per class
        let mut per_class: Vec<Vec<(f64, usize, usize, bool)>> = vec![Vec::new(); classes];
        let mut n_gt = vec![0usize; classes];
        for (ii, (im, dets)) in images.iter().zip(&ranked).enumerate() {
            for g in &im.gts {
                if bucket.contains(area(&g.bbox)) && g.label < classes {
                    n_gt[g.label] += 1;
                }
            }
            let m = match_detections(dets, &im.gts, t);
            for (r, (d, mg)) in dets.iter().zip(m).enumerate() {
                if d.label >= classes {
                    continue;
                }
                let counted = match mg {
                    Some(j) => bucket.contains(area(&im.gts[j].bbox)),
                    None => bucket.contains(area(&d.bbox)),
                };
                if counted {
                    per_class[d.label].push((d.score, ii, r, mg.is_some()));
                }
            }
        }
        let row = per_class
            .into_iter()
            .zip(&n_gt)
            .map(|(mut ds, &n)| {
                if n == 0 {
                    return None;
                }
                ds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let tp: Vec<bool> = ds.iter().map(|d| d.3).collect();
                Some(PrCurve::new(&tp, n, cfg.recall_points).ap())
            })
            .collect();
        table.push(row);
    }
    table
}

fn mean_defined<'a>(it: impl Iterator<Item = &'a Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = it.flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn average_precision(images: &[ImageEval], classes: usize, cfg: &EvalConfig) -> Result<Metrics> {
    cfg.validate()?;
    let all = ap_table(images, classes, cfg, Bucket::All);
    let ap = mean_defined(all.iter().flatten());
    let ap50 = match cfg.ap50_index() {
        Some(i) => mean_defined(all[i].iter()),
        None => ap50_only(images, classes, cfg)?,
    };
    let per_class = (0..classes).map(|c| mean_defined(all.iter().map(|row| &row[c]))).collect();
    let (s, m) = cfg.size_edges;
    let bucket_ap = |b| mean_defined(ap_table(images, classes, cfg, b).iter().flatten());
    Ok(Metrics {
        ap,
        ap50,
        ap_small: bucket_ap(Bucket::Range(0.0, s)),
        ap_medium: bucket_ap(Bucket::Range(s, m)),
        ap_large: bucket_ap(Bucket::Range(m, f64::INFINITY)),
        per_class,
    })
}

fn ap50_only(images: &[ImageEval], classes: usize, cfg: &EvalConfig) -> Result<Option<f64>> {
    let c = EvalConfig {
        iou_thresholds: vec![0.5],
        ..cfg.clone()
    };
    Ok(mean_defined(ap_table(images, classes, &c, Bucket::All)[0].iter()))
}

/// AP at IoU 0.5 over all objects; the validation metric during training.
pub fn ap50(images: &[ImageEval], classes: usize, cfg: &EvalConfig) -> Result<Option<f64>> {
    cfg.validate()?;
    ap50_only(images, classes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn gt(cx: f64, cy: f64, w: f64, h: f64, label: usize) -> Target {
        Target {
            bbox: Box::new(cx, cy, w, h).unwrap(),
            label,
        }
    }

    fn det(b: Box, score: f64, label: usize) -> Detection {
        Detection { bbox: b, score, label }
    }

    fn random_scene(rng: &mut Rng, classes: usize) -> ImageEval {
        let n = rng.int_range(1, 6) as usize;
        let gts: Vec<Target> = (0..n)
            .map(|_| {
                gt(
                    rng.uniform_range(0.2, 0.8),
                    rng.uniform_range(0.2, 0.8),
                    rng.uniform_range(0.03, 0.2),
                    rng.uniform_range(0.03, 0.2),
                    rng.int_range(0, classes - 1),
                )
            })
            .collect();
        let mut dets = Vec::new();
        for g in &gts {
            if rng.uniform() < 0.7 {
                let b = g.bbox;
                let j = Box::new(b.cx + rng.uniform_range(-0.01, 0.01), b.cy, b.w * rng.uniform_range(0.8, 1.2), b.h).unwrap();
                dets.push(det(j, rng.uniform(), g.label));
            }
        }
        for _ in 0..rng.int_range(0, 4) {
            let b = Box::new(rng.uniform_range(0.1, 0.9), rng.uniform_range(0.1, 0.9), 0.05, 0.05).unwrap();
            dets.push(det(b, rng.uniform(), rng.int_range(0, classes - 1)));
        }
        ImageEval { dets, gts }
    }

    #[test]
    fn matching_rules() {
        let g = vec![gt(0.5, 0.5, 0.2, 0.2, 0)];
        let dets = vec![det(g[0].bbox, 0.9, 0), det(Box::new(0.51, 0.5, 0.2, 0.2).unwrap(), 0.8, 0)];
        assert_eq!(match_detections(&dets, &g, 0.5), vec![Some(0), None]);
        assert!(match_detections(&[], &g, 0.5).is_empty());
        let wrong = vec![det(g[0].bbox, 0.9, 1)];
        assert_eq!(match_detections(&wrong, &g, 0.5), vec![None]);
    }

    #[test]
    fn highest_iou_gt_wins() {
        let g = vec![gt(0.5, 0.5, 0.2, 0.2, 0), gt(0.52, 0.5, 0.2, 0.2, 0)];
        let d = vec![det(Box::new(0.521, 0.5, 0.2, 0.2).unwrap(), 0.9, 0)];
        assert_eq!(match_detections(&d, &g, 0.5), vec![Some(1)]);
    }

    /// 3 ground truths, 4 detections in score order: TP, FP, TP, TP.
    /// precision 1, 1/2, 2/3, 3/4; recall 1/3, 1/3, 2/3, 1.
    /// Envelope: 1, 3/4, 3/4, 3/4. Recall levels 0..=0.33 (34 points) take 1,
    /// the remaining 67 take 3/4: AP50 = (34 + 67 * 0.75) / 101.
    #[test]
    fn hand_pr_table() {
        let gts = vec![gt(0.2, 0.2, 0.1, 0.1, 0), gt(0.5, 0.5, 0.1, 0.1, 0), gt(0.8, 0.8, 0.1, 0.1, 0)];
        let dets = vec![
            det(gts[0].bbox, 0.9, 0),
            det(Box::new(0.2, 0.8, 0.1, 0.1).unwrap(), 0.8, 0),
            det(Box::new(0.51, 0.5, 0.1, 0.1).unwrap(), 0.7, 0),
            det(Box::new(0.8, 0.81, 0.1, 0.1).unwrap(), 0.6, 0),
        ];
        let im = ImageEval { dets, gts };
        let m = average_precision(&[im], 1, &EvalConfig::default()).unwrap();
        assert!((m.ap50.unwrap() - 84.25 / 101.0).abs() < 1e-9);
        let c = PrCurve::new(&[true, false, true, true], 3, 101);
        assert_eq!(c.precision, vec![1.0, 0.5, 2.0 / 3.0, 0.75]);
        assert!(c.interpolated.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let mut rng = Rng::new(9);
        let images: Vec<ImageEval> = (0..10).map(|_| random_scene(&mut rng, 3)).collect();
        let perfect: Vec<ImageEval> = images
            .iter()
            .map(|im| ImageEval {
                dets: im.gts.iter().map(|g| det(g.bbox, 1.0, g.label)).collect(),
                gts: im.gts.clone(),
            })
            .collect();
        let m = average_precision(&perfect, 3, &EvalConfig::default()).unwrap();
        assert_eq!((m.ap, m.ap50), (Some(1.0), Some(1.0)));
        let none: Vec<ImageEval> = images.iter().map(|im| ImageEval { dets: vec![], gts: im.gts.clone() }).collect();
        let m = average_precision(&none, 3, &EvalConfig::default()).unwrap();
        assert_eq!((m.ap, m.ap50), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn undefined_buckets_are_null() {
        let im = ImageEval {
            dets: vec![],
            gts: vec![gt(0.5, 0.5, 0.1, 0.1, 0)],
        };
        let m = average_precision(&[im], 2, &EvalConfig::default()).unwrap();
        assert_eq!(m.ap_small, Some(0.0));
        assert_eq!(m.ap_medium, None);
        assert_eq!(m.ap_large, None);
        assert_eq!(m.per_class, vec![Some(0.0), None]);
        let m = average_precision(&[], 2, &EvalConfig::default()).unwrap();
        assert_eq!(m.ap, None);
    }

    #[test]
    fn properties_on_random_scenes() {
        let cfg = EvalConfig::default();
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let images: Vec<ImageEval> = (0..6).map(|_| random_scene(&mut rng, 2)).collect();
            let m = average_precision(&images, 2, &cfg).unwrap();
            assert!(m.ap50.unwrap() >= m.ap.unwrap() - 1e-12);
            let scaled: Vec<ImageEval> = images
                .iter()
                .map(|im| ImageEval {
                    dets: im.dets.iter().map(|d| det(d.bbox, d.score * 0.37, d.label)).collect(),
                    gts: im.gts.clone(),
                })
                .collect();
            assert_eq!(average_precision(&scaled, 2, &cfg).unwrap(), m);
            // a top-scored exact detection of an unmatched gt never hurts
            let mut better = images.clone();
            let im = &mut better[0];
            let flags = match_detections(&im.dets, &im.gts, 0.5);
            let matched: Vec<usize> = flags.into_iter().flatten().collect();
            if let Some(j) = (0..im.gts.len()).find(|j| !matched.contains(j)) {
                let g = im.gts[j];
                im.dets.push(det(g.bbox, 2.0, g.label));
                let m2 = average_precision(&better, 2, &cfg).unwrap();
                assert!(m2.ap.unwrap() >= m.ap.unwrap() - 1e-12);
            }
        }
    }

    #[test]
    fn max_dets_truncates() {
        let g = vec![gt(0.5, 0.5, 0.1, 0.1, 0)];
        let mut dets: Vec<Detection> = (0..5).map(|i| det(Box::new(0.1 + 0.1 * i as f64, 0.1, 0.05, 0.05).unwrap(), 0.9, 0)).collect();
        dets.push(det(g[0].bbox, 0.1, 0));
        let cfg = EvalConfig {
            max_dets: 5,
            ..Default::default()
        };
        let im = [ImageEval { dets, gts: g }];
        assert_eq!(ap50(&im, 1, &cfg).unwrap(), Some(0.0));
        assert!(ap50(&im, 1, &EvalConfig::default()).unwrap().unwrap() > 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = EvalConfig {
            iou_thresholds: vec![0.5, 0.5],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(EvalConfig::default().validate().is_ok());
    }
}
