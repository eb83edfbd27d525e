//! Dense loops shared by the integer and floating-point paths.
//!
//! Every reduction runs in a fixed order, so results are bit-identical across
//! runs for both integer and float element types.

use std::ops::{AddAssign, Mul};

use crate::scalar::Scalar;

pub(crate) trait Element: Copy + Default + Send + Sync {
    type Acc: Copy + Default + AddAssign + Mul<Output = Self::Acc>;
    fn widen(self) -> Self::Acc;
}

impl Element for i32 {
    type Acc = i64;
    #[inline(always)]
    fn widen(self) -> i64 {
        self as i64
    }
}

impl<T: Scalar> Element for T {
    type Acc = T;
    #[inline(always)]
    fn widen(self) -> T {
        self
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`, all row-major.
pub(crate) fn gemm_nn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], out: &mut [E::Acc]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l].widen();
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv.widen();
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`.
pub(crate) fn gemm_nt<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], out: &mut [E::Acc]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::Acc::default();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x.widen() * y.widen();
            }
            out[i * n + j] += acc;
        }
    }
}

pub(crate) fn transpose<E: Copy + Default>(rows: usize, cols: usize, a: &[E]) -> Vec<E> {
    let mut t = vec![E::default(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Geometry of a 2-D cross-correlation over NCHW input with OIHW kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub(crate) fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub(crate) fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub(crate) fn in_pixels(&self) -> usize {
        self.height * self.width
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        if self.stride == 0 {
            return Err("stride must be positive".into());
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err("kernel must be non-empty".into());
        }
        if self.kernel_h > self.height + 2 * self.pad || self.kernel_w > self.width + 2 * self.pad {
            return Err(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h,
                self.kernel_w,
                self.height + 2 * self.pad,
                self.width + 2 * self.pad
            ));
        }
        Ok(())
    }

    /// Unfold one sample (`C x H x W`) into a `(C*KH*KW) x (OH*OW)` matrix.
    pub(crate) fn im2col<E: Copy + Default>(&self, sample: &[E], col: &mut Vec<E>) {
        let (oh, ow) = (self.out_height(), self.out_width());
        col.clear();
        col.resize(self.patch_len() * oh * ow, E::default());
        let pad = self.pad as isize;
        for c in 0..self.in_channels {
            let plane = &sample[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for y in 0..oh {
                        let iy = (y * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for x in 0..ow {
                            let ix = (x * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < self.width as isize {
                                dst[y * ow + x] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold a column matrix back onto one sample, summing overlaps.
    pub(crate) fn col2im<A: Copy + AddAssign>(&self, col: &[A], sample: &mut [A]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let pad = self.pad as isize;
        for c in 0..self.in_channels {
            let plane = &mut sample[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for y in 0..oh {
                        let iy = (y * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for x in 0..ow {
                            let ix = (x * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < self.width as isize {
                                plane[iy as usize * self.width + ix as usize] += src[y * ow + x];
                            }
                        }
                    }
                }
            }
        }
    }
}
