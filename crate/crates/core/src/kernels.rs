//! Low-level dense kernels shared by the tape's forward and backward passes.

/// Row-major general matrix multiply, `c = a' · b' + beta · c`, where `a'` is
/// `a` (m×k) or its transpose and `b'` is `b` (k×n) or its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k / k×n / m×n views of
    // the slices whose lengths were checked.
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

/// Spatial geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    /// Output extent of the forward convolution for an input extent.
    pub fn conv_out(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution for an input extent.
    pub fn deconv_out(&self, len: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Unfolds one `channels×h×w` image into `oh·ow` columns of a
/// `(channels·k·k)`-row matrix with row stride `ld`, starting at column `off`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    img: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [f64],
    ld: usize,
    off: usize,
) {
    let k = g.kernel;
    let l = oh * ow;
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ld + off..row * ld + off + l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            img[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns `off..off + oh·ow` back into an image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    col: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    img: &mut [f64],
    ld: usize,
    off: usize,
) {
    let k = g.kernel;
    let l = oh * ow;
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ld + off..row * ld + off + l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            img[(c * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `(n, c, l)` to `(c, n·l)` layout.
pub(crate) fn channel_major(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[(ch * n + s) * l..(ch * n + s + 1) * l].copy_from_slice(&x[(s * c + ch) * l..(s * c + ch + 1) * l]);
        }
    }
    out
}

/// Inverse of [`channel_major`].
pub(crate) fn sample_major(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[(s * c + ch) * l..(s * c + ch + 1) * l].copy_from_slice(&x[(ch * n + s) * l..(ch * n + s + 1) * l]);
        }
    }
    out
}
