//! Fixed-grid anchors, logit-space refinement, Expanded-IoU classification
//! targets and top-k query selection.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{expanded_iou_t, Box, ExpandParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Pre-activation clamp for refined boxes; keeps every coordinate strictly
/// inside `(0, 1)` in 64-bit floats.
pub const LOGIT_LIMIT: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    pub eps: f64,
    pub alpha2: ExpandParams,
    pub base_size: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 60,
            eps: 0.01,
            alpha2: ExpandParams::default(),
            base_size: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnchorSet {
    /// Logit-space `(cx, cy, w, h)` per anchor.
    pub anchors: Vec<[f64; 4]>,
    pub valid: Vec<bool>,
    pub level: Vec<usize>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Rows of the logit anchors as a `[n, 4]` tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let data = idx.iter().flat_map(|&i| self.anchors[i]).collect();
        Tensor::new(&[idx.len(), 4], data).expect("non-empty selection")
    }
}

pub fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One anchor per cell of each level: center of the cell, side
/// `base_size · 2^level`, all stored in logit space.
pub fn generate_anchors(level_shapes: &[(usize, usize)], cfg: &SelectionConfig) -> Result<AnchorSet> {
    if level_shapes.is_empty() {
        return Err(Error::Config("anchor generation needs at least one level".into()));
    }
    let mut set = AnchorSet {
        anchors: Vec::new(),
        valid: Vec::new(),
        level: Vec::new(),
    };
    for (l, &(h, w)) in level_shapes.iter().enumerate() {
        let side = cfg.base_size * 2f64.powi(l as i32);
        for i in 0..h {
            for j in 0..w {
                let coords = [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64, side, side];
                let valid = coords.iter().all(|&c| c >= cfg.eps && c <= 1.0 - cfg.eps);
                // Out-of-range coordinates are stored clamped so logits stay finite.
                let lg = coords.map(|c| logit(c.clamp(cfg.eps, 1.0 - cfg.eps)));
                set.anchors.push(lg);
                set.valid.push(valid);
                set.level.push(l);
            }
        }
    }
    Ok(set)
}

/// `sigmoid(anchor + delta)` as a box.
pub fn refine_in_logit_space(anchor_logits: [f64; 4], delta: [f64; 4]) -> Box {
    let c: [f64; 4] = std::array::from_fn(|i| sigmoid((anchor_logits[i] + delta[i]).clamp(-LOGIT_LIMIT, LOGIT_LIMIT)));
    Box::from_array(c)
}

/// Differentiable refinement of `[k, 4]` logit anchors by `[k, 4]` deltas.
pub fn refine_graph(g: &mut Graph, anchor_logits: Var, delta: Var) -> Result<Var> {
    let z = g.add(anchor_logits, delta)?;
    let z = g.clamp(z, -LOGIT_LIMIT, LOGIT_LIMIT);
    Ok(g.sigmoid(z))
}

/// Soft classification target: Expanded-IoU with the matched ground truth,
/// 0 for unmatched predictions.
pub fn eiou_classification_target(pred: &Box, matched_gt: Option<&Box>, alpha2: ExpandParams) -> f64 {
    match matched_gt {
        None => 0.0,
        Some(gt) => expanded_iou_t(&pred.to_array(), &gt.to_array(), alpha2.alpha2),
    }
}

/// Indices of the `k` largest valid scores, descending; ties go to the
/// smaller index.
pub fn select_topk(scores: &[f64], valid: &[bool], k: usize) -> Result<Vec<usize>> {
    if scores.len() != valid.len() {
        return Err(Error::Shape(format!("{} scores vs {} validity flags", scores.len(), valid.len())));
    }
    if k > scores.len() {
        return Err(Error::Config(format!("k = {k} exceeds {} anchors", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| valid[i]).collect();
    if idx.len() < k {
        return Err(Error::Selection(format!("only {} valid anchors for k = {k}", idx.len())));
    }
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use crate::numerics::Rng;

    #[test]
    fn two_by_two_grid() {
        let set = generate_anchors(&[(2, 2)], &SelectionConfig::default()).unwrap();
        let centers: Vec<(f64, f64)> = set.anchors.iter().map(|a| (sigmoid(a[0]), sigmoid(a[1]))).collect();
        let want = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
        for (c, w) in centers.iter().zip(want) {
            assert!((c.0 - w.0).abs() < 1e-12 && (c.1 - w.1).abs() < 1e-12);
        }
        assert!(set.anchors.iter().all(|a| (sigmoid(a[2]) - 0.05).abs() < 1e-12));
    }

    #[test]
    fn pyramid_anchor_count_and_roundtrip() {
        let cfg = SelectionConfig::default();
        let set = generate_anchors(&[(24, 24), (12, 12), (6, 6), (3, 3)], &cfg).unwrap();
        assert_eq!(set.len(), 765);
        assert_eq!(set.level.iter().filter(|&&l| l == 3).count(), 9);
        assert!(set.valid.iter().all(|&v| v));
        for (l, a) in set.level.iter().zip(&set.anchors) {
            assert!((sigmoid(a[2]) - 0.05 * 2f64.powi(*l as i32)).abs() < 1e-12);
            for &c in a {
                assert!((logit(sigmoid(c)) - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn validity_mask_tracks_margin() {
        let cfg = SelectionConfig {
            base_size: 0.6,
            ..Default::default()
        };
        let set = generate_anchors(&[(2, 2), (1, 1)], &cfg).unwrap();
        assert_eq!(set.valid, vec![true, true, true, true, false]);
        assert!(set.anchors.iter().flatten().all(|v| v.is_finite()));
        assert!(generate_anchors(&[], &cfg).is_err());
    }

    #[test]
    fn refinement_examples() {
        let a = [logit(0.3), logit(0.6), logit(0.05), logit(0.1)];
        let b = refine_in_logit_space(a, [0.0; 4]);
        for (x, y) in b.to_array().iter().zip([0.3, 0.6, 0.05, 0.1]) {
            assert!((x - y).abs() < 1e-12);
        }
        let sat = refine_in_logit_space([0.0; 4], [20.0; 4]);
        assert!(sat.to_array().iter().all(|&v| (1.0 - v).abs() < 1e-8));
        let extreme = refine_in_logit_space([0.0; 4], [1e6, -1e6, 1e6, -1e6]);
        assert!(extreme.to_array().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn refinement_loss_gradient() {
        let anchor = Tensor::new(&[1, 4], vec![logit(0.4), logit(0.5), logit(0.1), logit(0.12)]).unwrap();
        let gt = Tensor::new(&[1, 4], vec![0.43, 0.47, 0.09, 0.14]).unwrap();
        let delta = Tensor::new(&[1, 4], vec![0.05, -0.1, 0.2, 0.1]).unwrap();
        let err = finite_diff_check(
            |g, d| {
                let a = g.constant(anchor.clone());
                let b = refine_graph(g, a, d)?;
                let t = g.constant(gt.clone());
                let l = g.box_loss(b, t, crate::boxgeom::BoxLossKind::ExpandedSiou { alpha2: 1.0, theta: 4.0 })?;
                Ok(g.sum(l))
            },
            &delta,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn eiou_targets() {
        let e = ExpandParams::default();
        let gt = Box::new(0.45, 0.5, 0.1, 0.1).unwrap();
        let pred = Box::new(0.30, 0.5, 0.1, 0.1).unwrap();
        assert_eq!(eiou_classification_target(&pred, None, e), 0.0);
        assert!((eiou_classification_target(&gt, Some(&gt), e) - 1.0).abs() < 1e-15);
        assert!((eiou_classification_target(&pred, Some(&gt), e) - 1.0 / 7.0).abs() < 1e-12);
        let plain = ExpandParams { alpha2: 1.0 };
        assert_eq!(eiou_classification_target(&pred, Some(&gt), plain), 0.0);
    }

    #[test]
    fn topk_examples() {
        let scores: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let valid = vec![true; 10];
        assert_eq!(select_topk(&scores, &valid, 3).unwrap(), vec![9, 8, 7]);
        assert_eq!(select_topk(&[1.0; 6], &[true; 6], 4).unwrap(), vec![0, 1, 2, 3]);
        let mut v = valid.clone();
        v[9] = false;
        assert_eq!(select_topk(&scores, &v, 2).unwrap(), vec![8, 7]);
        assert!(matches!(select_topk(&scores, &[false; 10], 1), Err(Error::Selection(_))));
        assert!(matches!(select_topk(&scores, &valid, 11), Err(Error::Config(_))));
    }

    #[test]
    fn topk_invariant_under_monotone_transform() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..40).map(|_| (rng.uniform() * 8.0).round() / 8.0).collect();
            let valid: Vec<bool> = (0..40).map(|_| rng.uniform() > 0.2).collect();
            let k = 5;
            let a = select_topk(&scores, &valid, k).unwrap();
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 2.0).collect();
            assert_eq!(a, select_topk(&t, &valid, k).unwrap());
        }
    }
}
