//! Minimum-cost bipartite assignment and the detection training loss.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{expanded_siou_t, Box, BoxLossKind, ExpandParams, SIoUParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::query::eiou_classification_target;

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} cost matrix with {} entries", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite cost at entry {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    fn transposed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.at(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Assignment {
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }

    pub fn row_of(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == col).map(|p| p.0)
    }
}

/// Optimal assignment covering the smaller side. Among optimal assignments the
/// one whose smaller-side partners are lexicographically smallest is chosen.
pub fn hungarian(c: &CostMatrix) -> Assignment {
    if c.rows == 0 || c.cols == 0 {
        return Assignment::default();
    }
    if c.rows > c.cols {
        let t = hungarian(&c.transposed());
        let mut pairs: Vec<(usize, usize)> = t.pairs.into_iter().map(|(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        return Assignment { pairs, cost: t.cost };
    }
    let (rows, cols) = (c.rows, c.cols);
    let cost = |i: usize, j: usize| c.at(i, j);
    let (u, v, row_to_col) = solve_rect(rows, cols, &cost);
    let scale = c.data.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| (cost(i, j) - u[i] - v[j]).abs() <= tol;
    let releasable: Vec<bool> = v.iter().map(|x| x.abs() <= tol).collect();
    let row_to_col = lexicographic(cols, row_to_col, &tight, &releasable);
    let pairs: Vec<(usize, usize)> = row_to_col.iter().copied().enumerate().collect();
    let total = pairs.iter().map(|&(i, j)| c.at(i, j)).sum();
    Assignment { pairs, cost: total }
}

/// Shortest augmenting path with potentials for `rows <= cols`, O(rows² cols).
/// Unmatched columns keep a zero potential.
fn solve_rect(rows: usize, cols: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    (u[1..].to_vec(), v[1..].to_vec(), row_to_col)
}

/// Walks rows in order and moves each row to its smallest tight column that
/// still admits an optimal matching of the rows after it. Unmatched columns
/// are held by virtual rows that may move to any `releasable` column.
fn lexicographic(
    cols: usize,
    mut r2c: Vec<usize>,
    tight: &dyn Fn(usize, usize) -> bool,
    releasable: &[bool],
) -> Vec<usize> {
    let mut c2r = vec![None; cols];
    for (r, &c) in r2c.iter().enumerate() {
        c2r[c] = Some(r);
    }
    for i in 0..r2c.len() {
        for j in 0..r2c[i] {
            if !tight(i, j) || c2r[j].is_some_and(|r| r < i) {
                continue;
            }
            let freed = r2c[i];
            let search = Search {
                target: freed,
                locked_upto: i,
                tight,
                c2r: &c2r,
                releasable,
            };
            let mut seen = vec![false; cols];
            seen[j] = true;
            let mut path = Vec::new();
            // whoever holds column j must reach the column i frees up
            let ok = match c2r[j] {
                Some(r) => search.augment(r, &mut seen, &mut path),
                None => search.augment_virtual(&mut seen, &mut path),
            };
            if ok {
                // path holds (row, new column) moves of real rows
                for &(row, _) in &path {
                    c2r[r2c[row]] = None;
                }
                c2r[freed] = None;
                for &(row, col) in &path {
                    r2c[row] = col;
                    c2r[col] = Some(row);
                }
                r2c[i] = j;
                c2r[j] = Some(i);
                break;
            }
        }
    }
    r2c
}

struct Search<'a> {
    target: usize,
    locked_upto: usize,
    tight: &'a dyn Fn(usize, usize) -> bool,
    c2r: &'a [Option<usize>],
    releasable: &'a [bool],
}

impl Search<'_> {
    fn augment(&self, row: usize, seen: &mut [bool], path: &mut Vec<(usize, usize)>) -> bool {
        for col in 0..seen.len() {
            if seen[col] || !(self.tight)(row, col) {
                continue;
            }
            seen[col] = true;
            let found = col == self.target
                || match self.c2r[col] {
                    Some(next) => next > self.locked_upto && self.augment(next, seen, path),
                    None => self.augment_virtual(seen, path),
                };
            if found {
                path.push((row, col));
                return true;
            }
        }
        false
    }

    fn augment_virtual(&self, seen: &mut [bool], path: &mut Vec<(usize, usize)>) -> bool {
        for col in 0..seen.len() {
            if seen[col] || !self.releasable[col] {
                continue;
            }
            seen[col] = true;
            let found = col == self.target
                || match self.c2r[col] {
                    Some(next) => next > self.locked_upto && self.augment(next, seen, path),
                    None => false,
                };
            if found {
                return true;
            }
        }
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_l1: 5.0,
            w_iou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_cls, self.w_l1, self.w_iou];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatchConfig {
    pub weights: LossWeights,
    /// Expansion used by the box cost and the box loss.
    pub expand: ExpandParams,
    pub siou: SIoUParams,
    /// Expansion used by the soft classification target.
    pub target_expand: ExpandParams,
}

impl MatchConfig {
    pub fn box_loss(&self) -> BoxLossKind {
        BoxLossKind::ExpandedSiou {
            alpha2: self.expand.alpha2,
            theta: self.siou.theta,
        }
    }
}

/// A ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    #[serde(rename = "box")]
    pub bbox: Box,
    pub label: usize,
}

pub fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `scores[i]` are per-class probabilities of prediction `i`.
pub fn matching_cost(scores: &[Vec<f64>], boxes: &[Box], gts: &[Target], cfg: &MatchConfig) -> Result<CostMatrix> {
    if scores.len() != boxes.len() {
        return Err(Error::Shape(format!("{} score rows vs {} boxes", scores.len(), boxes.len())));
    }
    let w = cfg.weights;
    let mut data = Vec::with_capacity(boxes.len() * gts.len());
    for (s, b) in scores.iter().zip(boxes) {
        let pa = b.to_array();
        for gt in gts {
            let sc = *s
                .get(gt.label)
                .ok_or_else(|| Error::Shape(format!("label {} outside {} classes", gt.label, s.len())))?;
            let ga = gt.bbox.to_array();
            let es = expanded_siou_t(&pa, &ga, cfg.expand.alpha2, cfg.siou.theta);
            data.push(-w.w_cls * sc + w.w_l1 * l1(&pa, &ga) + w.w_iou * (1.0 - es));
        }
    }
    CostMatrix::new(boxes.len(), gts.len(), data)
}

/// One prediction head: sigmoid class probabilities `[k, classes]` and boxes
/// `[k, 4]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub probs: Var,
    pub boxes: Var,
}

impl HeadOutput {
    pub fn read(&self, g: &Graph) -> (Vec<Vec<f64>>, Vec<Box>) {
        let p = g.value(self.probs);
        let nc = p.shape()[1];
        let scores = p.data().chunks(nc).map(<[f64]>::to_vec).collect();
        let boxes = g
            .value(self.boxes)
            .data()
            .chunks(4)
            .map(|c| Box::from_array([c[0], c[1], c[2], c[3]]))
            .collect();
        (scores, boxes)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
}

impl LossBreakdown {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.w_cls * self.cls + w.w_l1 * self.l1 + w.w_iou * self.iou
    }
}

/// Summed over all heads, each using the shared `(query, gt)` assignment.
/// Components are normalized by `max(1, #gt)`.
pub fn detection_loss(
    g: &mut Graph,
    heads: &[HeadOutput],
    gts: &[Target],
    assignment: &Assignment,
    cfg: &MatchConfig,
) -> Result<(Var, LossBreakdown)> {
    if heads.is_empty() {
        return Err(Error::Config("detection loss needs at least one head".into()));
    }
    let norm = 1.0 / gts.len().max(1) as f64;
    let w = cfg.weights;
    let mut terms = Vec::new();
    let mut br = LossBreakdown::default();
    let matched_q: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let gt_rows: Vec<f64> = assignment.pairs.iter().flat_map(|p| gts[p.1].bbox.to_array()).collect();
    for head in heads {
        let (_, boxes) = head.read(g);
        let shape = g.shape(head.probs).to_vec();
        let (k, nc) = (shape[0], shape[1]);
        if boxes.len() != k {
            return Err(Error::Shape(format!("{} boxes for {k} queries", boxes.len())));
        }
        let mut target = vec![0.0; k * nc];
        for &(q, j) in &assignment.pairs {
            let gt = &gts[j];
            if q >= k || gt.label >= nc {
                return Err(Error::Shape(format!("assignment ({q}, {j}) outside {k} queries / {nc} classes")));
            }
            target[q * nc + gt.label] = eiou_classification_target(&boxes[q], Some(&gt.bbox), cfg.target_expand);
        }
        let cls = g.bce(head.probs, &target)?;
        let cls = g.scale(cls, norm);
        br.cls += g.scalar(cls);
        terms.push(g.scale(cls, w.w_cls));
        if !matched_q.is_empty() {
            let m = matched_q.len();
            let pred = g.gather_rows(head.boxes, &matched_q)?;
            let tgt = g.constant(Tensor::new(&[m, 4], gt_rows.clone())?);
            let d = g.sub(pred, tgt)?;
            let d = g.abs(d);
            let l1v = g.sum(d);
            let l1v = g.scale(l1v, norm);
            br.l1 += g.scalar(l1v);
            terms.push(g.scale(l1v, w.w_l1));
            let iou = g.box_loss(pred, tgt, cfg.box_loss())?;
            let iou = g.sum(iou);
            let iou = g.scale(iou, norm);
            br.iou += g.scalar(iou);
            terms.push(g.scale(iou, w.w_iou));
        }
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok((total, br))
}

/// Exhaustive minimum over all injective maps; test oracle.
pub fn brute_force_min(c: &CostMatrix) -> f64 {
    if c.rows == 0 || c.cols == 0 {
        return 0.0;
    }
    if c.rows > c.cols {
        return brute_force_min(&c.transposed());
    }
    fn rec(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.rows {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.cols {
            if !used[j] {
                used[j] = true;
                rec(c, row + 1, used, acc + c.at(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.cols], 0.0, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::expanded_siou;
    use crate::numerics::gradcheck::finite_diff_check;
    use crate::numerics::{bce_value, Rng};

    fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> CostMatrix {
        CostMatrix::new(r, c, (0..r * c).map(|_| rng.uniform_range(-3.0, 5.0)).collect()).unwrap()
    }

    #[test]
    fn small_examples() {
        let mut rows = vec![vec![1.0; 4]; 4];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 0.0;
        }
        let a = hungarian(&CostMatrix::from_rows(&rows).unwrap());
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(a.cost, 0.0);
        let a = hungarian(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap());
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost, 2.0);
        assert_eq!(hungarian(&CostMatrix::new(0, 3, vec![]).unwrap()), Assignment::default());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(CostMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(CostMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn matches_brute_force_square_and_rectangular() {
        let mut rng = Rng::new(11);
        for n in 2..=6 {
            for _ in 0..30 {
                let c = random_matrix(&mut rng, n, n);
                assert!((hungarian(&c).cost - brute_force_min(&c)).abs() < 1e-9);
            }
        }
        for &(r, c) in &[(2, 5), (5, 2), (3, 7), (7, 4), (1, 6)] {
            for _ in 0..20 {
                let m = random_matrix(&mut rng, r, c);
                let a = hungarian(&m);
                assert_eq!(a.pairs.len(), r.min(c));
                assert!((a.cost - brute_force_min(&m)).abs() < 1e-9);
                let mut rows: Vec<_> = a.pairs.iter().map(|p| p.0).collect();
                let mut cols: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
                rows.dedup();
                cols.sort_unstable();
                cols.dedup();
                assert_eq!(rows.len(), r.min(c));
                assert_eq!(cols.len(), r.min(c));
            }
        }
    }

    #[test]
    fn ties_pick_lexicographic_minimum() {
        let a = hungarian(&CostMatrix::new(3, 3, vec![1.0; 9]).unwrap());
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let n = 4;
            let data = (0..n * n).map(|_| rng.int_range(0, 3) as f64).collect();
            let c = CostMatrix::new(n, n, data).unwrap();
            let best = brute_force_min(&c);
            // lexicographically first optimal permutation by enumeration
            let mut want = None;
            let mut perm: Vec<usize> = (0..n).collect();
            loop {
                let cost: f64 = perm.iter().enumerate().map(|(i, &j)| c.at(i, j)).sum();
                if (cost - best).abs() < 1e-12 {
                    want = Some(perm.clone());
                    break;
                }
                if !next_permutation(&mut perm) {
                    break;
                }
            }
            let got: Vec<usize> = hungarian(&c).pairs.iter().map(|p| p.1).collect();
            assert_eq!(Some(got), want);
        }
    }

    #[test]
    fn rectangular_ties_pick_lexicographic_minimum() {
        fn first_optimal(c: &CostMatrix, best: f64, row: usize, used: &mut Vec<bool>, acc: f64, cur: &mut Vec<usize>) -> bool {
            if row == c.rows {
                return (acc - best).abs() < 1e-12;
            }
            for j in 0..c.cols {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    if first_optimal(c, best, row + 1, used, acc + c.at(row, j), cur) {
                        return true;
                    }
                    cur.pop();
                    used[j] = false;
                }
            }
            false
        }
        let mut rng = Rng::new(8);
        for trial in 0..300 {
            let (small, large) = (rng.int_range(1, 4) as usize, rng.int_range(4, 8) as usize);
            let data: Vec<f64> = (0..small * large).map(|_| rng.int_range(0, 3) as f64).collect();
            let c = CostMatrix::new(small, large, data).unwrap();
            let best = brute_force_min(&c);
            let mut want = Vec::new();
            assert!(first_optimal(&c, best, 0, &mut vec![false; large], 0.0, &mut want));
            let wide: Vec<usize> = hungarian(&c).pairs.iter().map(|p| p.1).collect();
            assert_eq!(wide, want, "trial {trial} {small}x{large} {:?}", c.data);
            let tall = hungarian(&c.transposed());
            let mut by_small: Vec<(usize, usize)> = tall.pairs.iter().map(|&(a, b)| (b, a)).collect();
            by_small.sort_unstable();
            assert_eq!(by_small.iter().map(|p| p.1).collect::<Vec<_>>(), want, "trial {trial}");
        }
    }

    fn next_permutation(p: &mut [usize]) -> bool {
        let n = p.len();
        let Some(i) = (0..n - 1).rev().find(|&i| p[i] < p[i + 1]) else {
            return false;
        };
        let j = (i + 1..n).rev().find(|&j| p[j] > p[i]).unwrap();
        p.swap(i, j);
        p[i + 1..].reverse();
        true
    }

    #[test]
    fn scale_invariance() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let c = random_matrix(&mut rng, 5, 5);
            assert_eq!(hungarian(&c).pairs, hungarian(&c.scaled(3.7)).pairs);
        }
    }

    fn fixture() -> (Vec<Vec<f64>>, Vec<Box>, Vec<Target>) {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.7], vec![0.5, 0.5]];
        let boxes = vec![
            Box::new(0.302, 0.305, 0.11, 0.1).unwrap(),
            Box::new(0.615, 0.588, 0.12, 0.095).unwrap(),
            Box::new(0.5, 0.5, 0.2, 0.2).unwrap(),
        ];
        let gts = vec![
            Target {
                bbox: Box::new(0.31, 0.29, 0.1, 0.12).unwrap(),
                label: 0,
            },
            Target {
                bbox: Box::new(0.6, 0.6, 0.1, 0.1).unwrap(),
                label: 1,
            },
        ];
        (scores, boxes, gts)
    }

    #[test]
    fn cost_matches_scripted_oracle() {
        let (scores, boxes, gts) = fixture();
        let cfg = MatchConfig::default();
        let c = matching_cost(&scores, &boxes, &gts, &cfg).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let (p, g) = (boxes[i], gts[j].bbox);
                let l1s = (p.cx - g.cx).abs() + (p.cy - g.cy).abs() + (p.w - g.w).abs() + (p.h - g.h).abs();
                let es = expanded_siou(&p, &g, cfg.expand, cfg.siou).unwrap();
                let want = -2.0 * scores[i][gts[j].label] + 5.0 * l1s + 2.0 * (1.0 - es);
                assert!((c.at(i, j) - want).abs() < 1e-9);
            }
        }
        assert_eq!(hungarian(&c).pairs, vec![(0, 0), (1, 1)]);
        let empty = matching_cost(&scores, &boxes, &[], &cfg).unwrap();
        assert_eq!((empty.rows(), empty.cols()), (3, 0));
    }

    #[test]
    fn exact_prediction_is_row_minimum() {
        let (mut scores, mut boxes, gts) = fixture();
        boxes[2] = gts[1].bbox;
        scores[2] = vec![0.0, 1.0];
        let c = matching_cost(&scores, &boxes, &gts, &MatchConfig::default()).unwrap();
        for i in 0..3 {
            assert!(c.at(2, 1) <= c.at(i, 1));
        }
        assert!(c.at(2, 1) < c.at(2, 0));
    }

    fn heads_from(g: &mut Graph, scores: &[Vec<f64>], boxes: &[Box]) -> HeadOutput {
        let nc = scores[0].len();
        let p = g.param(&Tensor::new(&[scores.len(), nc], scores.concat()).unwrap());
        let b = g.param(&Tensor::new(&[boxes.len(), 4], boxes.iter().flat_map(|b| b.to_array()).collect()).unwrap());
        HeadOutput { probs: p, boxes: b }
    }

    #[test]
    fn perfect_predictions_hit_entropy_floor() {
        let (_, _, gts) = fixture();
        let cfg = MatchConfig::default();
        // matched queries predict gt boxes exactly and score 1 on their label
        let boxes = vec![gts[0].bbox, gts[1].bbox, Box::new(0.8, 0.2, 0.05, 0.05).unwrap()];
        let scores = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        let mut g = Graph::new();
        let h = heads_from(&mut g, &scores, &boxes);
        let a = Assignment {
            pairs: vec![(0, 0), (1, 1)],
            cost: 0.0,
        };
        let (total, br) = detection_loss(&mut g, &[h, h], &gts, &a, &cfg).unwrap();
        assert!(br.l1.abs() < 1e-15 && br.iou.abs() < 1e-12);
        let floor = 2.0 * 6.0 * bce_value(0.0, 0.0) / 2.0;
        assert!((br.cls - floor).abs() < 1e-12);
        assert!((g.scalar(total) - br.weighted(&cfg.weights)).abs() < 1e-12);
    }

    #[test]
    fn soft_target_floor_and_no_gt() {
        let (scores, boxes, gts) = fixture();
        let cfg = MatchConfig::default();
        let mut g = Graph::new();
        let h = heads_from(&mut g, &scores, &boxes);
        let (_, br) = detection_loss(&mut g, &[h], &[], &Assignment::default(), &cfg).unwrap();
        let want: f64 = scores.iter().flatten().map(|p| bce_value(*p, 0.0)).sum();
        assert!((br.cls - want).abs() < 1e-12);
        assert_eq!((br.l1, br.iou), (0.0, 0.0));

        // scores set to their own soft targets: classification sits at the entropy floor
        let a = Assignment {
            pairs: vec![(0, 0), (1, 1)],
            cost: 0.0,
        };
        let t0 = eiou_classification_target(&boxes[0], Some(&gts[0].bbox), cfg.target_expand);
        let t1 = eiou_classification_target(&boxes[1], Some(&gts[1].bbox), cfg.target_expand);
        let s2 = vec![vec![t0, 0.0], vec![0.0, t1], vec![0.0, 0.0]];
        let mut g = Graph::new();
        let h = heads_from(&mut g, &s2, &boxes);
        let (loss, br) = detection_loss(&mut g, &[h], &gts, &a, &cfg).unwrap();
        let floor = (bce_value(t0, t0) + bce_value(t1, t1) + 4.0 * bce_value(0.0, 0.0)) / 2.0;
        assert!((br.cls - floor).abs() < 1e-12);
        let gp = g.grad_of(loss, h.probs).unwrap();
        assert!(gp.data()[0].abs() < 1e-6 && gp.data()[3].abs() < 1e-6);
    }

    #[test]
    fn box_gradient_matches_finite_differences() {
        let (scores, boxes, gts) = fixture();
        // soft classification targets are detached from the boxes
        let cfg = MatchConfig {
            weights: LossWeights {
                w_cls: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = Assignment {
            pairs: vec![(0, 0), (1, 1)],
            cost: 0.0,
        };
        let bt = Tensor::new(&[3, 4], boxes.iter().flat_map(|b| b.to_array()).collect()).unwrap();
        let pt = Tensor::new(&[3, 2], scores.concat()).unwrap();
        let err = finite_diff_check(
            |g, b| {
                let p = g.constant(pt.clone());
                let h = HeadOutput { probs: p, boxes: b };
                Ok(detection_loss(g, &[h], &gts, &a, &cfg)?.0)
            },
            &bt,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
