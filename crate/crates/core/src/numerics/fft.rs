//! Radix-2 two-dimensional FFT.
//!
//! Forward transforms are unnormalized; [`ifft2`] applies `1/(H·W)` so that
//! `ifft2(fft2(x)) == x`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Complex-valued `height × width` grid stored as split real/imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    pub fn from_real(height: usize, width: usize, re: &[f64]) -> Result<Self> {
        if re.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} grid",
                re.len()
            )));
        }
        Ok(Self {
            height,
            width,
            re: re.to_vec(),
            im: vec![0.0; re.len()],
        })
    }

    /// Elementwise modulus `sqrt(re² + im²)`.
    pub fn magnitude(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }

    /// Elementwise complex product.
    pub fn hadamard(&self, other: &ComplexGrid) -> ComplexGrid {
        let mut out = ComplexGrid::zeros(self.height, self.width);
        for k in 0..self.re.len() {
            let (a, b) = (self.re[k], self.im[k]);
            let (c, d) = (other.re[k], other.im[k]);
            out.re[k] = a * c - b * d;
            out.im[k] = a * d + b * c;
        }
        out
    }

    pub fn conj(mut self) -> Self {
        self.im.iter_mut().for_each(|v| *v = -*v);
        self
    }
}

pub fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// Zero-pads a `h × w` grid to the next power of two in each dimension.
pub fn pad_to_pow2(h: usize, w: usize, x: &[f64]) -> (usize, usize, Vec<f64>) {
    let (hp, wp) = (h.next_power_of_two(), w.next_power_of_two());
    if hp == h && wp == w {
        return (h, w, x.to_vec());
    }
    let mut out = vec![0.0; hp * wp];
    for i in 0..h {
        out[i * wp..i * wp + w].copy_from_slice(&x[i * w..(i + 1) * w]);
    }
    (hp, wp, out)
}

/// Inverse of [`pad_to_pow2`]: keeps the top-left `h × w` block.
pub fn crop(hp: usize, wp: usize, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    debug_assert!(h <= hp && w <= wp && x.len() == hp * wp);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        out.extend_from_slice(&x[i * wp..i * wp + w]);
    }
    out
}

/// Forward 2D DFT of a real grid.
pub fn fft2(h: usize, w: usize, x: &[f64]) -> Result<ComplexGrid> {
    check_dims(h, w)?;
    let mut g = ComplexGrid::from_real(h, w, x)?;
    transform2(&mut g, false);
    Ok(g)
}

/// Forward 2D DFT of a complex grid.
pub fn fft2_complex(mut g: ComplexGrid) -> Result<ComplexGrid> {
    check_dims(g.height, g.width)?;
    transform2(&mut g, false);
    Ok(g)
}

/// Inverse 2D DFT including the `1/(H·W)` factor.
pub fn ifft2(mut g: ComplexGrid) -> Result<ComplexGrid> {
    check_dims(g.height, g.width)?;
    transform2(&mut g, true);
    let scale = 1.0 / (g.height * g.width) as f64;
    g.re.iter_mut().for_each(|v| *v *= scale);
    g.im.iter_mut().for_each(|v| *v *= scale);
    Ok(g)
}

/// [`fft2`] with automatic zero padding to power-of-two dimensions.
pub fn fft2_padded(h: usize, w: usize, x: &[f64]) -> ComplexGrid {
    let (hp, wp, xp) = pad_to_pow2(h, w, x);
    let mut g = ComplexGrid {
        height: hp,
        width: wp,
        im: vec![0.0; xp.len()],
        re: xp,
    };
    transform2(&mut g, false);
    g
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if !is_pow2(h) || !is_pow2(w) {
        return Err(Error::Dimension(format!(
            "fft needs power-of-two dims, got {h}x{w} (pad first)"
        )));
    }
    Ok(())
}

fn transform2(g: &mut ComplexGrid, inverse: bool) {
    let (h, w) = (g.height, g.width);
    for r in 0..h {
        fft1(&mut g.re[r * w..(r + 1) * w], &mut g.im[r * w..(r + 1) * w], inverse);
    }
    let mut cre = vec![0.0; h];
    let mut cim = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cre[r] = g.re[r * w + c];
            cim[r] = g.im[r * w + c];
        }
        fft1(&mut cre, &mut cim, inverse);
        for r in 0..h {
            g.re[r * w + c] = cre[r];
            g.im[r * w + c] = cim[r];
        }
    }
}

/// In-place iterative Cooley-Tukey, unnormalized in both directions.
fn fft1(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let ang = sign * 2.0 * PI / len as f64;
        for k in 0..half {
            // Direct twiddles keep the error from accumulating across k.
            let (s, c) = (ang * k as f64).sin_cos();
            let mut start = 0;
            while start < n {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn naive_dft(h: usize, w: usize, x: &[f64]) -> ComplexGrid {
        let mut out = ComplexGrid::zeros(h, w);
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let ang = -2.0 * PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        sr += x[r * w + c] * ang.cos();
                        si += x[r * w + c] * ang.sin();
                    }
                }
                out.re[u * w + v] = sr;
                out.im[u * w + v] = si;
            }
        }
        out
    }

    fn random(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = vec![0.0; 16];
        x[0] = 1.0;
        let g = fft2(4, 4, &x).unwrap();
        assert!(g.re.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(g.im.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_has_only_dc() {
        let g = fft2(8, 8, &[0.5; 64]).unwrap();
        assert!((g.re[0] - 32.0).abs() < 1e-12);
        for k in 1..64 {
            assert!(g.re[k].abs() < 1e-12 && g.im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = Rng::new(3);
        for (h, w) in [(8, 8), (4, 16), (1, 8)] {
            let x = random(&mut rng, h * w);
            let fast = fft2(h, w, &x).unwrap();
            let slow = naive_dft(h, w, &x);
            for k in 0..h * w {
                assert!((fast.re[k] - slow.re[k]).abs() < 1e-10);
                assert!((fast.im[k] - slow.im[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn inverse_of_flat_spectrum_is_impulse() {
        let g = ComplexGrid {
            height: 4,
            width: 4,
            re: vec![1.0; 16],
            im: vec![0.0; 16],
        };
        let x = ifft2(g).unwrap();
        assert!((x.re[0] - 1.0).abs() < 1e-15);
        assert!(x.re[1..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn roundtrip_and_parseval() {
        let mut rng = Rng::new(11);
        for (h, w) in [(16, 16), (8, 8), (2, 32), (32, 32)] {
            let x = random(&mut rng, h * w);
            let spec = fft2(h, w, &x).unwrap();
            let energy: f64 = x.iter().map(|v| v * v).sum();
            let spec_energy: f64 = spec.magnitude().iter().map(|m| m * m).sum::<f64>() / (h * w) as f64;
            assert!((energy - spec_energy).abs() < 1e-9);
            let back = ifft2(spec).unwrap();
            for k in 0..h * w {
                assert!((back.re[k] - x[k]).abs() < 1e-9);
                assert!(back.im[k].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_non_pow2() {
        assert!(matches!(fft2(3, 4, &[0.0; 12]), Err(Error::Dimension(_))));
        let g = fft2_padded(3, 5, &[1.0; 15]);
        assert_eq!((g.height, g.width), (4, 8));
        assert!((g.re[0] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn pad_crop_roundtrip() {
        let x: Vec<f64> = (0..15).map(|v| v as f64).collect();
        let (hp, wp, p) = pad_to_pow2(3, 5, &x);
        assert_eq!(crop(hp, wp, &p, 3, 5), x);
    }
}
