//! im2col / col2im kernels shared by convolution, transposed convolution and
//! their backward passes.
//!
//! The whole batch is lowered into a single column matrix so each layer costs
//! one big matmul instead of `B` tiny ones.

use ndarray::{Array2, ArrayView4, ArrayViewMut4};

/// Spatial geometry of a sliding-window lowering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "stride must be >= 1");
        let span_h = height + 2 * pad;
        let span_w = width + 2 * pad;
        assert!(span_h >= kernel && span_w >= kernel, "kernel larger than padded input");
        let out_h = (span_h - kernel) / stride + 1;
        let out_w = (span_w - kernel) / stride + 1;
        ConvGeom { channels, height, width, kernel, stride, pad, out_h, out_w }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn windows(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Lower a batch `[B, C, H, W]` into `[C*k*k, B*out_h*out_w]`.
///
/// Column index is `b * windows + (oh * out_w + ow)`; row index is
/// `(c * k + ki) * k + kj`. Out-of-bounds taps (padding) contribute zero.
pub fn im2col_batch(x: ArrayView4<'_, f64>, g: &ConvGeom) -> Array2<f64> {
    let batch = x.shape()[0];
    debug_assert_eq!(x.shape()[1], g.channels);
    debug_assert_eq!(x.shape()[2], g.height);
    debug_assert_eq!(x.shape()[3], g.width);
    let mut cols = Array2::<f64>::zeros((g.rows(), batch * g.windows()));
    for b in 0..batch {
        let col_base = b * g.windows();
        for c in 0..g.channels {
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (c * g.kernel + ki) * g.kernel + kj;
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            cols[[row, col_base + oh * g.out_w + ow]] =
                                x[[b, c, ih as usize, iw as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of [`im2col_batch`]: accumulate `[C*k*k, B*windows]`
/// back into an image batch `[B, C, H, W]`. Overlapping taps sum.
pub fn col2im_batch(cols: &Array2<f64>, g: &ConvGeom, mut out: ArrayViewMut4<'_, f64>) {
    let batch = out.shape()[0];
    debug_assert_eq!(out.shape()[1], g.channels);
    debug_assert_eq!(cols.shape()[0], g.rows());
    debug_assert_eq!(cols.shape()[1], batch * g.windows());
    for b in 0..batch {
        let col_base = b * g.windows();
        for c in 0..g.channels {
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (c * g.kernel + ki) * g.kernel + kj;
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            out[[b, c, ih as usize, iw as usize]] +=
                                cols[[row, col_base + oh * g.out_w + ow]];
                        }
                    }
                }
            }
        }
    }
}

/// Output spatial side of a transposed convolution.
pub fn conv_transpose_out(in_side: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (in_side - 1) * stride + kernel - 2 * pad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Array2};

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel, stride 1, no pad: cols is just a flattened copy.
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(b, c, h, w)| (b * 100 + c * 10 + h * 2 + w) as f64);
        let g = ConvGeom::new(3, 2, 2, 1, 1, 0);
        let cols = im2col_batch(x.view(), &g);
        assert_eq!(cols.shape(), &[3, 2 * 4]);
        assert_eq!(cols[[1, 0]], x[[0, 1, 0, 0]]);
        assert_eq!(cols[[2, 4 + 3]], x[[1, 2, 1, 1]]);
    }

    #[test]
    fn col2im_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c (adjointness).
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1);
        let x = Array4::from_shape_fn((3, 2, 5, 4), |(b, c, h, w)| {
            ((b * 7 + c * 13 + h * 3 + w * 11) % 17) as f64 * 0.25 - 1.0
        });
        let cols_shape = (g.rows(), 3 * g.windows());
        let c = Array2::from_shape_fn(cols_shape, |(i, j)| ((i * 31 + j * 5) % 23) as f64 * 0.1 - 1.0);
        let lhs: f64 = (&im2col_batch(x.view(), &g) * &c).sum();
        let mut back = Array4::<f64>::zeros((3, 2, 5, 4));
        col2im_batch(&c, &g, back.view_mut());
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "adjoint mismatch: {lhs} vs {rhs}");
    }

    #[test]
    fn transpose_output_side() {
        assert_eq!(conv_transpose_out(1, 4, 1, 0), 4);
        assert_eq!(conv_transpose_out(4, 4, 2, 1), 8);
        assert_eq!(conv_transpose_out(8, 4, 2, 1), 16);
        assert_eq!(conv_transpose_out(4, 4, 4, 0), 16);
    }
}
