//! Slice-level numeric kernels behind the tape operations.
//!
//! Images are NCHW, row-major. Convolutions lower each image to a column
//! matrix (`im2col`) and hand the contraction to `matrixmultiply`.

use alloc::vec;
use alloc::vec::Vec;

/// `c = beta * c + op(a) * op(b)` on row-major storage.
///
/// `op(a)` is `m x k`; when `trans_a` is set, `a` is stored as `k x m`.
/// Likewise `op(b)` is `k x n`, stored `n x k` under `trans_b`.
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the assertion above bounds every index reachable through
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Resolved geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Lowers one `C x H x W` image into a `(C*kh*kw) x (out_h*out_w)` matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad_top as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih as usize >= g.height {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad_left as isize;
                        *v = if iw < 0 || iw as usize >= g.width {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad_top as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad_left as isize;
                        if iw >= 0 && (iw as usize) < g.width {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    batch: usize,
    kernel: &[f64],
    bias: &[f64],
    filters: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let p = g.out_pixels();
    let kk = g.col_rows();
    let mut out = vec![0.0; batch * filters * p];
    let mut cols = vec![0.0; kk * p];
    for n in 0..batch {
        im2col(&input[n * in_len..(n + 1) * in_len], g, &mut cols);
        let dst = &mut out[n * filters * p..(n + 1) * filters * p];
        for (f, chunk) in dst.chunks_exact_mut(p).enumerate() {
            chunk.fill(bias[f]);
        }
        gemm(filters, kk, p, kernel, false, &cols, false, 1.0, dst);
    }
    out
}

/// Gradients of a convolution; each output is produced only when requested.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    batch: usize,
    kernel: &[f64],
    filters: usize,
    g: &ConvGeom,
    d_out: &[f64],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads {
    let in_len = g.channels * g.height * g.width;
    let p = g.out_pixels();
    let kk = g.col_rows();
    let mut d_input = want_input.then(|| vec![0.0; batch * in_len]);
    let mut d_kernel = want_kernel.then(|| vec![0.0; filters * kk]);
    let mut d_bias = want_bias.then(|| vec![0.0; filters]);
    let mut cols = if want_kernel { vec![0.0; kk * p] } else { Vec::new() };
    let mut d_cols = if want_input { vec![0.0; kk * p] } else { Vec::new() };
    for n in 0..batch {
        let d_out_n = &d_out[n * filters * p..(n + 1) * filters * p];
        if let Some(db) = d_bias.as_mut() {
            for (f, chunk) in d_out_n.chunks_exact(p).enumerate() {
                db[f] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            im2col(&input[n * in_len..(n + 1) * in_len], g, &mut cols);
            gemm(filters, p, kk, d_out_n, false, &cols, true, 1.0, dk);
        }
        if let Some(di) = d_input.as_mut() {
            gemm(kk, filters, p, kernel, true, d_out_n, false, 0.0, &mut d_cols);
            col2im_add(&d_cols, g, &mut di[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

/// Resolved geometry of a max-pooling window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Window maxima; cells past the right/bottom edge count as `-inf`.
/// Returns the pooled values and, per output, the flat input index of the
/// first (row-major) maximal element.
pub(crate) fn maxpool_forward(input: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let total = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(total);
    let mut arg = Vec::with_capacity(total);
    for plane in 0..g.planes {
        let base = plane * g.height * g.width;
        for oh in 0..g.out_h {
            let h0 = oh * g.stride;
            let h1 = (h0 + g.window).min(g.height);
            for ow in 0..g.out_w {
                let w0 = ow * g.stride;
                let w1 = (w0 + g.window).min(g.width);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + h0 * g.width + w0;
                for h in h0..h1 {
                    for w in w0..w1 {
                        let idx = base + h * g.width + w;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Numerically stable row-wise softmax of an `rows x k` matrix.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = libm::exp(s - max);
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `x^gamma` on `[0, 1]` with `0^0 = 1` and `0^gamma = 0` for `gamma > 0`.
pub(crate) fn power(x: f64, gamma: f64) -> f64 {
    if x == 0.0 {
        if gamma == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        libm::pow(x, gamma)
    }
}

/// Smallest base used when differentiating `x^gamma` for `gamma < 1`.
pub const POWER_GRAD_FLOOR: f64 = 1e-6;

pub(crate) fn power_derivative(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        0.0
    } else if gamma < 1.0 {
        gamma * libm::pow(x.max(POWER_GRAD_FLOOR), gamma - 1.0)
    } else {
        gamma * power(x, gamma - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [1., 0., 0., 1., 1., 1.];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4., 5., 10., 11.]);
        // a^T stored as 3x2
        let at = [1., 4., 2., 5., 3., 6.];
        let bt = [1., 0., 1., 0., 1., 1.];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, c);
    }

    #[test]
    fn power_endpoints() {
        assert_eq!(power(0.0, 0.0), 1.0);
        assert_eq!(power(0.0, 0.04), 0.0);
        assert_eq!(power(1.0, 25.0), 1.0);
        assert!(power_derivative(0.0, 0.04).is_finite());
        assert_eq!(power_derivative(0.0, 1.0), 1.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
