//! Central finite-difference verification of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with step `h`, over every coordinate of `x`.
///
/// Relative error per coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, h, &all)
}

/// [`finite_diff_check`] restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut g = Graph::new();
    let xv = g.param(x);
    let loss = f(&mut g, xv)?;
    let analytic = g.grad_of(loss, xv)?;
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(t);
        let l = f(&mut g, v)?;
        Ok(g.scalar(l))
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        let (hi, lo) = (orig + h, orig - h);
        probe.data_mut()[i] = hi;
        let up = eval(&probe)?;
        probe.data_mut()[i] = lo;
        let dn = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // divide by the step actually taken after rounding
        let numeric = (up - dn) / (hi - lo);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
