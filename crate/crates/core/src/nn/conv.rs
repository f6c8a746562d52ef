//! im2col/col2im kernels for NHWC convolutions.
//!
//! Convolutions are lowered to matrix products: `im2col` gathers input
//! patches into a `[batch*out_h*out_w, k*k*channels]` matrix, the kernel is
//! stored pre-flattened as `[k*k*channels, out_channels]`, and the product
//! is already the NHWC output. Transposed convolution reuses the same two
//! kernels with the roles of gather and scatter swapped.

use super::tensor::Tensor;

/// Geometry of one convolution: input plane, square kernel, stride, zero
/// padding and the derived output plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        in_h: usize,
        in_w: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(stride >= 1, "stride must be >= 1, got {stride}");
        assert!(
            in_h + 2 * pad >= kernel && in_w + 2 * pad >= kernel,
            "kernel {kernel} larger than padded input {in_h}x{in_w} (pad {pad})"
        );
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        ConvGeom {
            batch,
            in_h,
            in_w,
            channels,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    /// Output plane size of the matching transposed convolution:
    /// `(in - 1) * stride + kernel - 2 * pad`.
    pub fn transpose_out(
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> (usize, usize) {
        (
            (in_h - 1) * stride + kernel - 2 * pad,
            (in_w - 1) * stride + kernel - 2 * pad,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Gather patches of `src` (`[batch, in_h, in_w, channels]`) into a
/// `[batch*out_h*out_w, k*k*channels]` matrix. Out-of-range taps read zero.
pub(crate) fn im2col(src: &Tensor, g: &ConvGeom) -> Tensor {
    assert_eq!(
        src.shape(),
        &[g.batch, g.in_h, g.in_w, g.channels],
        "im2col input shape"
    );
    let mut cols = Tensor::zeros(&[g.out_positions(), g.patch_len()]);
    let c = g.channels;
    let src_d = src.data();
    let cols_d = cols.data_mut();
    let row_stride = g.in_w * c;
    let img_stride = g.in_h * row_stride;
    let mut out_row = 0usize;
    for b in 0..g.batch {
        let img = b * img_stride;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let base = out_row * g.patch_len();
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src_off = img + iy as usize * row_stride + ix as usize * c;
                        let dst_off = base + (ky * g.kernel + kx) * c;
                        cols_d[dst_off..dst_off + c].copy_from_slice(&src_d[src_off..src_off + c]);
                    }
                }
                out_row += 1;
            }
        }
    }
    cols
}

/// Scatter-add a `[batch*out_h*out_w, k*k*channels]` patch matrix back onto
/// the `[batch, in_h, in_w, channels]` plane — the adjoint of [`im2col`].
pub(crate) fn col2im(cols: &Tensor, g: &ConvGeom, dst: &mut Tensor) {
    assert_eq!(
        cols.shape(),
        &[g.out_positions(), g.patch_len()],
        "col2im cols shape"
    );
    assert_eq!(
        dst.shape(),
        &[g.batch, g.in_h, g.in_w, g.channels],
        "col2im output shape"
    );
    let c = g.channels;
    let cols_d = cols.data();
    let dst_d = dst.data_mut();
    let row_stride = g.in_w * c;
    let img_stride = g.in_h * row_stride;
    let mut col_row = 0usize;
    for b in 0..g.batch {
        let img = b * img_stride;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let base = col_row * g.patch_len();
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst_off = img + iy as usize * row_stride + ix as usize * c;
                        let src_off = base + (ky * g.kernel + kx) * c;
                        for i in 0..c {
                            dst_d[dst_off + i] += cols_d[src_off + i];
                        }
                    }
                }
                col_row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::gemm_nn;

    /// Direct (quadruple-loop) convolution used as the oracle.
    fn conv_direct(src: &Tensor, kernel: &Tensor, g: &ConvGeom, out_c: usize) -> Tensor {
        let mut out = Tensor::zeros(&[g.batch, g.out_h, g.out_w, out_c]);
        for b in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for oc in 0..out_c {
                        let mut acc = 0.0;
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.in_h as isize
                                    || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                for ic in 0..g.channels {
                                    let sv = src.data()[((b * g.in_h + iy as usize) * g.in_w
                                        + ix as usize)
                                        * g.channels
                                        + ic];
                                    let kv = kernel.data()
                                        [((ky * g.kernel + kx) * g.channels + ic) * out_c + oc];
                                    acc += sv * kv;
                                }
                            }
                        }
                        let idx = ((b * g.out_h + oy) * g.out_w + ox) * out_c + oc;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let g = ConvGeom::new(2, 6, 6, 3, 4, 2, 1);
        let out_c = 5;
        let src = Tensor::from_vec(
            &[2, 6, 6, 3],
            (0..2 * 6 * 6 * 3)
                .map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0)
                .collect(),
        );
        let kernel = Tensor::from_vec(
            &[g.patch_len(), out_c],
            (0..g.patch_len() * out_c)
                .map(|i| ((i * 53 % 97) as f64) / 48.0 - 1.0)
                .collect(),
        );
        let cols = im2col(&src, &g);
        let mut out = Tensor::zeros(&[g.out_positions(), out_c]);
        gemm_nn(&cols, &kernel, &mut out, 0.0);
        let oracle = conv_direct(&src, &kernel, &g, out_c);
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// col2im is the adjoint of im2col: <im2col(x), y> == <x, col2im(y)>.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(1, 5, 5, 2, 3, 2, 1);
        let x = Tensor::from_vec(
            &[1, 5, 5, 2],
            (0..50).map(|i| (i as f64 * 0.7).sin()).collect(),
        );
        let y = Tensor::from_vec(
            &[g.out_positions(), g.patch_len()],
            (0..g.out_positions() * g.patch_len())
                .map(|i| (i as f64 * 0.3).cos())
                .collect(),
        );
        let lhs: f64 = im2col(&x, &g)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let mut back = Tensor::zeros(&[1, 5, 5, 2]);
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transpose_output_size_inverts_strided_conv() {
        // 4 -> (4-1)*2 + 4 - 2 = 8, and conv(8, k4 s2 p1) -> 4 again.
        let (oh, ow) = ConvGeom::transpose_out(4, 4, 4, 2, 1);
        assert_eq!((oh, ow), (8, 8));
        let g = ConvGeom::new(1, oh, ow, 1, 4, 2, 1);
        assert_eq!((g.out_h, g.out_w), (4, 4));
    }
}
