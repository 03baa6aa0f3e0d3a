//! Axis-aligned box geometry: IoU, Expanded-IoU, SIoU, Expanded-SIoU, GIoU.
//!
//! Boxes are `(cx, cy, w, h)` in normalized image units. Every measure is
//! written once over [`Real`] so the losses get exact gradients through
//! [`Dual8`] without a separate hand-derived backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::dual::{Dual8, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Constructs without validation; callers guarantee `w, h > 0`.
    pub const fn new_unchecked(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Validation(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new_unchecked(a[0], a[1], a[2], a[3])
    }

    /// `(x1, y1, x2, y2)`; no clamping to the image.
    pub fn to_corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn from_corners(c: [f64; 4]) -> Result<Self> {
        let [x1, y1, x2, y2] = c;
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Validation(format!("inverted corners {c:?}")));
        }
        Ok(Self::new_unchecked(
            (x1 + x2) / 2.0,
            (y1 + y2) / 2.0,
            x2 - x1,
            y2 - y1,
        ))
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Scale factor applied to both boxes about their own centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandParams {
    pub alpha2: f64,
}

impl ExpandParams {
    pub fn new(alpha2: f64) -> Result<Self> {
        if !(alpha2 > 0.0 && alpha2.is_finite()) {
            return Err(Error::Config(format!("alpha2 must be > 0, got {alpha2}")));
        }
        Ok(Self { alpha2 })
    }
}

impl Default for ExpandParams {
    fn default() -> Self {
        Self { alpha2: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SIoUParams {
    pub theta: f64,
}

impl SIoUParams {
    pub fn new(theta: f64) -> Result<Self> {
        if !(2.0..=6.0).contains(&theta) {
            return Err(Error::Config(format!("siou theta must lie in [2, 6], got {theta}")));
        }
        Ok(Self { theta })
    }
}

impl Default for SIoUParams {
    fn default() -> Self {
        Self { theta: 4.0 }
    }
}

fn check(a: &Box, b: &Box) -> Result<()> {
    a.validate()?;
    b.validate()
}

pub fn iou(a: &Box, b: &Box) -> Result<f64> {
    check(a, b)?;
    Ok(iou_t(&a.to_array(), &b.to_array()))
}

pub fn expand(b: &Box, alpha2: f64) -> Box {
    Box::new_unchecked(b.cx, b.cy, b.w * alpha2, b.h * alpha2)
}

pub fn expanded_iou(a: &Box, b: &Box, p: ExpandParams) -> Result<f64> {
    check(a, b)?;
    Ok(expanded_iou_t(&a.to_array(), &b.to_array(), p.alpha2))
}

pub fn siou(a: &Box, b: &Box, p: SIoUParams) -> Result<f64> {
    check(a, b)?;
    Ok(siou_t(&a.to_array(), &b.to_array(), p.theta))
}

pub fn expanded_siou(a: &Box, b: &Box, e: ExpandParams, s: SIoUParams) -> Result<f64> {
    check(a, b)?;
    Ok(expanded_siou_t(&a.to_array(), &b.to_array(), e.alpha2, s.theta))
}

pub fn giou(a: &Box, b: &Box) -> Result<f64> {
    check(a, b)?;
    Ok(giou_t(&a.to_array(), &b.to_array()))
}

struct Overlap<T> {
    inter: T,
    union: T,
    enclose_w: T,
    enclose_h: T,
}

fn overlap<T: Real>(a: &[T; 4], b: &[T; 4]) -> Overlap<T> {
    let half = T::cst(0.5);
    let (ax1, ax2) = (a[0] - a[2] * half, a[0] + a[2] * half);
    let (ay1, ay2) = (a[1] - a[3] * half, a[1] + a[3] * half);
    let (bx1, bx2) = (b[0] - b[2] * half, b[0] + b[2] * half);
    let (by1, by2) = (b[1] - b[3] * half, b[1] + b[3] * half);
    let zero = T::cst(0.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(zero);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(zero);
    let inter = iw * ih;
    // Areas from the same corners as the intersection so that a == b gives exactly 1.
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    Overlap {
        inter,
        union,
        enclose_w: ax2.max(bx2) - ax1.min(bx1),
        enclose_h: ay2.max(by2) - ay1.min(by1),
    }
}

pub fn iou_t<T: Real>(a: &[T; 4], b: &[T; 4]) -> T {
    let o = overlap(a, b);
    o.inter / o.union
}

pub fn expanded_iou_t<T: Real>(a: &[T; 4], b: &[T; 4], alpha2: f64) -> T {
    let s = T::cst(alpha2);
    let ea = [a[0], a[1], a[2] * s, a[3] * s];
    let eb = [b[0], b[1], b[2] * s, b[3] * s];
    iou_t(&ea, &eb)
}

pub fn giou_t<T: Real>(a: &[T; 4], b: &[T; 4]) -> T {
    let o = overlap(a, b);
    let c = o.enclose_w * o.enclose_h;
    o.inter / o.union - (c - o.union) / c
}

/// SIoU = IoU − (distance cost + shape cost) / 2, with the angle cost
/// modulating the distance cost.
pub fn siou_t<T: Real>(a: &[T; 4], b: &[T; 4], theta: f64) -> T {
    let o = overlap(a, b);
    let iou = o.inter / o.union;
    let one = T::cst(1.0);
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let sigma2 = dx * dx + dy * dy;
    // Angle cost; 0 at coincident centers where the distance cost vanishes anyway.
    let angle = if sigma2.val() > 0.0 {
        let sigma = sigma2.sqrt();
        let sin_alpha = dx.abs().min(dy.abs()) / sigma;
        let s = (sin_alpha.asin() - T::cst(std::f64::consts::FRAC_PI_4)).sin();
        one - T::cst(2.0) * s * s
    } else {
        T::cst(0.0)
    };
    let gamma = T::cst(2.0) - angle;
    let rho_x = (dx / o.enclose_w) * (dx / o.enclose_w);
    let rho_y = (dy / o.enclose_h) * (dy / o.enclose_h);
    let distance = (one - (-gamma * rho_x).exp()) + (one - (-gamma * rho_y).exp());
    let omega_w = (a[2] - b[2]).abs() / a[2].max(b[2]);
    let omega_h = (a[3] - b[3]).abs() / a[3].max(b[3]);
    let shape = (one - (-omega_w).exp()).powf(theta) + (one - (-omega_h).exp()).powf(theta);
    iou - (distance + shape) * T::cst(0.5)
}

pub fn expanded_siou_t<T: Real>(a: &[T; 4], b: &[T; 4], alpha2: f64, theta: f64) -> T {
    siou_t(a, b, theta) - iou_t(a, b) + expanded_iou_t(a, b, alpha2)
}

/// Box regression loss variants used by the detector and distillation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoxLossKind {
    /// `1 − Expanded-SIoU`
    ExpandedSiou { alpha2: f64, theta: f64 },
    /// `1 − GIoU`
    Giou,
}

impl BoxLossKind {
    pub fn value(&self, a: &[f64; 4], b: &[f64; 4]) -> f64 {
        match *self {
            BoxLossKind::ExpandedSiou { alpha2, theta } => 1.0 - expanded_siou_t(a, b, alpha2, theta),
            BoxLossKind::Giou => 1.0 - giou_t(a, b),
        }
    }

    /// Loss value and its gradient with respect to `(a, b)` concatenated.
    pub fn value_and_grad(&self, a: &[f64; 4], b: &[f64; 4]) -> (f64, [f64; 8]) {
        let da: [Dual8; 4] = std::array::from_fn(|i| Dual8::var(a[i], i));
        let db: [Dual8; 4] = std::array::from_fn(|i| Dual8::var(b[i], 4 + i));
        let one = Dual8::cst(1.0);
        let r = match *self {
            BoxLossKind::ExpandedSiou { alpha2, theta } => one - expanded_siou_t(&da, &db, alpha2, theta),
            BoxLossKind::Giou => one - giou_t(&da, &db),
        };
        (r.v, r.d)
    }
}

/// IoU by counting raster cells whose centers fall inside each box.
///
/// The raster spans the two boxes' joint extent with `grid × grid` cells.
/// Because boxes are axis-aligned the per-box cell sets are products of
/// per-axis index ranges, so the counts factor into per-axis scans.
pub fn raster_iou_oracle(a: &Box, b: &Box, grid: usize) -> f64 {
    let ca = a.to_corners();
    let cb = b.to_corners();
    let lo_x = ca[0].min(cb[0]);
    let hi_x = ca[2].max(cb[2]);
    let lo_y = ca[1].min(cb[1]);
    let hi_y = ca[3].max(cb[3]);
    let axis = |lo: f64, hi: f64, a1: f64, a2: f64, b1: f64, b2: f64| {
        let step = (hi - lo) / grid as f64;
        let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
        for i in 0..grid {
            let c = lo + (i as f64 + 0.5) * step;
            let ia = a1 <= c && c < a2;
            let ib = b1 <= c && c < b2;
            na += ia as u64;
            nb += ib as u64;
            nab += (ia && ib) as u64;
        }
        (na, nb, nab)
    };
    let (ax, bx, ix) = axis(lo_x, hi_x, ca[0], ca[2], cb[0], cb[2]);
    let (ay, by, iy) = axis(lo_y, hi_y, ca[1], ca[3], cb[1], cb[3]);
    let inter = (ix * iy) as f64;
    let union = (ax * ay + bx * by) as f64 - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> Box {
        Box::new(cx, cy, w, h).unwrap()
    }

    const E: ExpandParams = ExpandParams { alpha2: 2.0 };
    const S: SIoUParams = SIoUParams { theta: 4.0 };

    #[test]
    fn iou_examples() {
        let a = bx(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert!((iou(&a, &bx(0.5, 0.5, 0.1, 0.1)).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(iou(&bx(0.25, 0.5, 0.2, 0.2), &bx(0.75, 0.5, 0.2, 0.2)).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_rejected() {
        let bad = Box::new_unchecked(0.5, 0.5, 0.0, 0.1);
        assert!(matches!(iou(&bad, &bad), Err(Error::Validation(_))));
        assert!(Box::new(0.5, 0.5, 0.1, -1.0).is_err());
    }

    #[test]
    fn expand_examples() {
        let b = bx(0.5, 0.5, 0.1, 0.2);
        assert_eq!(expand(&b, 1.0), b);
        assert_eq!(expand(&b, 2.0), bx(0.5, 0.5, 0.2, 0.4));
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let b = bx(rng.uniform(), rng.uniform(), rng.uniform_range(0.01, 0.3), rng.uniform_range(0.01, 0.3));
            let (s, t) = (rng.uniform_range(0.5, 3.0), rng.uniform_range(0.5, 3.0));
            let lhs = expand(&expand(&b, s), t);
            let rhs = expand(&b, s * t);
            assert!((lhs.w - rhs.w).abs() < 1e-15 && (lhs.h - rhs.h).abs() < 1e-15);
        }
    }

    #[test]
    fn expanded_iou_examples() {
        let a = bx(0.5, 0.5, 0.2, 0.2);
        let b = bx(0.5, 0.5, 0.1, 0.1);
        assert!((expanded_iou(&a, &b, E).unwrap() - 0.25).abs() < 1e-12);
        let a = bx(0.30, 0.5, 0.10, 0.10);
        let b = bx(0.45, 0.5, 0.10, 0.10);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        // Frozen from raster_iou_oracle(expand(a,2), expand(b,2), 10_000): 0.1428571...
        let oracle = raster_iou_oracle(&expand(&a, 2.0), &expand(&b, 2.0), 10_000);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-3);
        assert!((expanded_iou(&a, &b, E).unwrap() - 0.142857).abs() < 1e-6);
    }

    #[test]
    fn siou_examples() {
        let a = bx(0.5, 0.5, 0.2, 0.2);
        assert!((siou(&a, &a, S).unwrap() - 1.0).abs() < 1e-15);
        // IoU 0.25, distance cost 0, shape cost 2·(1−e^{−0.5})⁴.
        let expected = 0.25 - (1.0 - (-0.5f64).exp()).powi(4);
        let got = siou(&a, &bx(0.5, 0.5, 0.1, 0.1), S).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.2260).abs() < 1e-4);
        let far = siou(&bx(0.2, 0.2, 0.1, 0.1), &bx(0.8, 0.8, 0.1, 0.1), S).unwrap();
        assert!((-1.0..0.0).contains(&far), "{far}");
    }

    #[test]
    fn expanded_siou_examples() {
        let a = bx(0.30, 0.5, 0.10, 0.10);
        let b = bx(0.45, 0.5, 0.10, 0.10);
        let one = ExpandParams { alpha2: 1.0 };
        assert!((expanded_siou(&a, &b, one, S).unwrap() - siou(&a, &b, S).unwrap()).abs() < 1e-15);
        assert!((expanded_siou(&a, &a, E, S).unwrap() - 1.0).abs() < 1e-15);
        let got = expanded_siou(&a, &b, E, S).unwrap();
        assert!((got - (siou(&a, &b, S).unwrap() + 1.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn codec() {
        let c = bx(0.5, 0.5, 0.2, 0.2).to_corners();
        for (x, y) in c.iter().zip([0.4, 0.4, 0.6, 0.6]) {
            assert!((x - y).abs() < 1e-15);
        }
        let edge = bx(0.05, 0.05, 0.2, 0.2).to_corners();
        assert!(edge[0] < 0.0);
        assert!(Box::from_corners([0.6, 0.4, 0.4, 0.6]).is_err());
    }

    #[test]
    fn raster_trivial_cases() {
        let a = bx(0.4, 0.5, 0.2, 0.3);
        assert_eq!(raster_iou_oracle(&a, &a, 1000), 1.0);
        assert_eq!(raster_iou_oracle(&bx(0.2, 0.2, 0.1, 0.1), &bx(0.8, 0.8, 0.1, 0.1), 1000), 0.0);
    }

    #[test]
    fn giou_basics() {
        let a = bx(0.5, 0.5, 0.2, 0.2);
        assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        // disjoint: iou 0, enclosing 0.7x0.1, union 0.02 → −(0.07−0.02)/0.07
        let g = giou(&bx(0.2, 0.5, 0.1, 0.1), &bx(0.8, 0.5, 0.1, 0.1)).unwrap();
        assert!((g + 0.05 / 0.07).abs() < 1e-12);
    }

    #[test]
    fn dual_gradient_matches_central_differences() {
        let kind = BoxLossKind::ExpandedSiou { alpha2: 2.0, theta: 4.0 };
        let a = [0.41, 0.52, 0.13, 0.17];
        let b = [0.47, 0.45, 0.11, 0.21];
        let (_, g) = kind.value_and_grad(&a, &b);
        let h = 1e-6;
        for i in 0..8 {
            let mut p = [a, b];
            p[i / 4][i % 4] += h;
            let up = kind.value(&p[0], &p[1]);
            p[i / 4][i % 4] -= 2.0 * h;
            let dn = kind.value(&p[0], &p[1]);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "coord {i}: {fd} vs {}", g[i]);
        }
    }
}
