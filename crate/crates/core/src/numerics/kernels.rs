//! Dense kernels shared by forward and backward passes.

/// `c = a · b (+ c)` for row-major operands.
///
/// `a` is `m×k` (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k` when
/// `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths checked above; strides describe exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unfolds `x[c_in, h, w]` into `[c_in·k·k, ho·wo]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut cols = vec![0.0; g.rows() * ho * wo];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            *d = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto `dx`.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = ii as usize * g.w;
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            plane[base + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; `weight` is `[c_out, c_in, k, k]`.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, c_out: usize, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let mut out = vec![0.0; c_out * n];
    if let Some(b) = bias {
        for (o, bv) in b.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *bv);
        }
    }
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        gemm(c_out, g.c_in, n, weight, false, x, false, &mut out, bias.is_some());
    } else {
        let cols = im2col(x, g);
        gemm(c_out, g.rows(), n, weight, false, &cols, false, &mut out, bias.is_some());
    }
    out
}

/// Accumulates gradients of a convolution given the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    c_out: usize,
    g: &ConvGeom,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    if let Some(db) = db {
        for o in 0..c_out {
            db[o] += dout[o * n..(o + 1) * n].iter().sum::<f64>();
        }
    }
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    if let Some(dw) = dw {
        if pointwise {
            gemm(c_out, n, g.c_in, dout, false, x, true, dw, true);
        } else {
            let cols = im2col(x, g);
            gemm(c_out, n, g.rows(), dout, false, &cols, true, dw, true);
        }
    }
    if let Some(dx) = dx {
        if pointwise {
            gemm(g.c_in, c_out, n, weight, true, dout, false, dx, true);
        } else {
            let mut dcols = vec![0.0; g.rows() * n];
            gemm(g.rows(), c_out, n, weight, true, dout, false, &mut dcols, false);
            col2im(&dcols, g, dx);
        }
    }
}
