//! Low-level dense kernels shared by the tape operations.

/// `c (m×n) = op(a) · op(b)` (+ `c` when `accumulate`), all row-major.
///
/// `a` is stored as `m×k` (or `k×m` when `trans_a`), `b` as `k×n` (or `n×k`
/// when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted lengths and the strides above keep every access
    // inside `a`, `b` and `c`, and `c` does not alias the inputs.
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

/// Geometry of a same-padded, stride-1 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// Unfolds `x` (`B×C×H×W`) into a `(B·H·W) × (C·K·K)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let pad = (g.kernel / 2) as isize;
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.positions() * plen];
    let (h, w) = (g.height as isize, g.width as isize);
    for b in 0..g.batch {
        for i in 0..g.height {
            for j in 0..g.width {
                let row = ((b * g.height + i) * g.width + j) * plen;
                let mut col = 0;
                for c in 0..g.channels {
                    let plane = (b * g.channels + c) * g.height * g.width;
                    for di in 0..g.kernel {
                        let y = i as isize + di as isize - pad;
                        for dj in 0..g.kernel {
                            let xx = j as isize + dj as isize - pad;
                            if y >= 0 && y < h && xx >= 0 && xx < w {
                                cols[row + col] = x[plane + (y * w + xx) as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let pad = (g.kernel / 2) as isize;
    let plen = g.patch_len();
    let mut x = vec![0.0; g.batch * g.channels * g.height * g.width];
    let (h, w) = (g.height as isize, g.width as isize);
    for b in 0..g.batch {
        for i in 0..g.height {
            for j in 0..g.width {
                let row = ((b * g.height + i) * g.width + j) * plen;
                let mut col = 0;
                for c in 0..g.channels {
                    let plane = (b * g.channels + c) * g.height * g.width;
                    for di in 0..g.kernel {
                        let y = i as isize + di as isize - pad;
                        for dj in 0..g.kernel {
                            let xx = j as isize + dj as isize - pad;
                            if y >= 0 && y < h && xx >= 0 && xx < w {
                                x[plane + (y * w + xx) as usize] += cols[row + col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    x
}
