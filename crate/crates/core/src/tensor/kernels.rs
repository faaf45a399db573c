//! Raw slice kernels shared by the tape and by mask-free inference.

use crate::error::{Error, Result};

/// `c = op(a)·op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored with the
/// opposite orientation (`k×m` / `n×k`) in row-major order.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose lengths are asserted on entry.
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

/// Geometry of a valid (unpadded) convolution over an `h×w×c` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Contract("convolution stride must be >= 1".into()));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.in_c == 0 {
            return Err(Error::Contract("kernel extents must be >= 1".into()));
        }
        if self.kernel_h > self.in_h || self.kernel_w > self.in_w {
            return Err(Error::dim(
                "im2col",
                &[self.in_h, self.in_w, self.in_c],
                &[self.kernel_h, self.kernel_w],
            ));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel_w) / self.stride + 1
    }

    pub fn patches(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one vectorized patch, `kernel_h·kernel_w·in_c`.
    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }
}

/// Unrolls every patch of a batch of HWC images into rows.
///
/// Output is `(batch·patches) × patch_len`; rows follow (image, out_y, out_x)
/// in row-major order and columns follow (dy, dx, channel).
pub fn im2col(input: &[f64], batch: usize, g: &ConvGeometry) -> Vec<f64> {
    debug_assert_eq!(input.len(), batch * g.input_len());
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let row_len = g.kernel_w * g.in_c;
    let mut out = vec![0.0; batch * oh * ow * pl];
    let mut dst = 0;
    for b in 0..batch {
        let img = &input[b * g.input_len()..(b + 1) * g.input_len()];
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..g.kernel_h {
                    let y = oy * g.stride + dy;
                    let start = (y * g.in_w + ox * g.stride) * g.in_c;
                    out[dst..dst + row_len].copy_from_slice(&img[start..start + row_len]);
                    dst += row_len;
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im_accumulate(cols: &[f64], batch: usize, g: &ConvGeometry, input_grad: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let row_len = g.kernel_w * g.in_c;
    let mut src = 0;
    for b in 0..batch {
        let img = &mut input_grad[b * g.input_len()..(b + 1) * g.input_len()];
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..g.kernel_h {
                    let y = oy * g.stride + dy;
                    let start = (y * g.in_w + ox * g.stride) * g.in_c;
                    img[start..start + row_len]
                        .iter_mut()
                        .zip(&cols[src..src + row_len])
                        .for_each(|(d, s)| *d += s);
                    src += row_len;
                }
            }
        }
    }
}

/// 2×2 stride-2 max pooling over a batch of HWC maps. Odd trailing rows or
/// columns are dropped. Returns the pooled values and, per output element,
/// the flat input index that won.
pub fn max_pool2(input: &[f64], batch: usize, h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * oh * ow * c);
    let mut arg = Vec::with_capacity(out.capacity());
    for b in 0..batch {
        let base = b * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = base + ((2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = input[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        // strict comparison keeps the first maximum on ties
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (out, arg)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_picks_window_max() {
        // 1 image, 2x2, 1 channel
        let (v, a) = max_pool2(&[1.0, 4.0, 3.0, 2.0], 1, 2, 2, 1);
        assert_eq!(v, vec![4.0]);
        assert_eq!(a, vec![1]);
    }

    #[test]
    fn stable_scalar_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
    }
}
