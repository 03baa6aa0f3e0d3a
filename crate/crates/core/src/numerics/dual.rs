//! Scalar abstraction with a forward-mode dual implementation.
//!
//! Box geometry is written once against [`Real`]; instantiating it with
//! [`Dual8`] yields exact gradients with respect to both boxes' coordinates.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn asin(self) -> Self;
    fn powf(self, p: f64) -> Self;

    fn min(self, o: Self) -> Self {
        if o.val() < self.val() {
            o
        } else {
            self
        }
    }

    fn max(self, o: Self) -> Self {
        if o.val() > self.val() {
            o
        } else {
            self
        }
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn asin(self) -> Self {
        f64::asin(self)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
}

/// Value plus gradient with respect to eight seeded inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual8 {
    pub v: f64,
    pub d: [f64; 8],
}

impl Dual8 {
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; 8];
        d[slot] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= dv);
        Self { v, d }
    }
}

impl Add for Dual8 {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for (a, b) in self.d.iter_mut().zip(o.d) {
            *a += b;
        }
        self
    }
}

impl Sub for Dual8 {
    type Output = Self;
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for (a, b) in self.d.iter_mut().zip(o.d) {
            *a -= b;
        }
        self
    }
}

impl Mul for Dual8 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; 8];
        for i in 0..8 {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl Div for Dual8 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let mut d = [0.0; 8];
        for i in 0..8 {
            d[i] = (self.d[i] - self.v * inv * o.d[i]) * inv;
        }
        Self { v: self.v * inv, d }
    }
}

impl Neg for Dual8 {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl Real for Dual8 {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; 8] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn abs(self) -> Self {
        // subgradient 0 at the kink
        let s = if self.v > 0.0 {
            1.0
        } else if self.v < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.chain(self.v.abs(), s)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        self.chain(r, if r > 0.0 { 0.5 / r } else { 0.0 })
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn asin(self) -> Self {
        let den = (1.0 - self.v * self.v).sqrt();
        self.chain(self.v.asin(), if den > 0.0 { 1.0 / den } else { 0.0 })
    }
    fn powf(self, p: f64) -> Self {
        let dv = if self.v == 0.0 && p >= 1.0 {
            if p == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            p * self.v.powf(p - 1.0)
        };
        self.chain(self.v.powf(p), dv)
    }
}
