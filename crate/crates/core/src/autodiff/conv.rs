//! im2col convolution kernels shared by the forward op and its backward rule.

use crate::linalg::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize) -> Self {
        let pad = (kernel - 1) / 2;
        ConvGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfold one image `[C, H, W]` into `[C*k*k, H'*W']`.
pub(crate) fn im2col(g: &ConvGeometry, image: &[f64], col: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold `[C*k*k, H'*W']` back into an image gradient, accumulating overlaps.
pub(crate) fn col2im(g: &ConvGeometry, col: &[f64], image: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass over a batch; returns output and the unfolded columns for reuse in backward.
pub(crate) fn conv_forward(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    input: &[f64],
    weight: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; batch * rows * ncols];
    let mut out = vec![0.0; batch * out_channels * ncols];
    for b in 0..batch {
        let col = &mut cols[b * rows * ncols..(b + 1) * rows * ncols];
        im2col(g, &input[b * g.input_len()..(b + 1) * g.input_len()], col);
        gemm(
            out_channels,
            rows,
            ncols,
            weight,
            false,
            col,
            false,
            0.0,
            &mut out[b * out_channels * ncols..(b + 1) * out_channels * ncols],
        );
    }
    (out, cols)
}

pub(crate) fn conv_backward_weight(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    cols: &[f64],
    upstream: &[f64],
) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut dw = vec![0.0; out_channels * rows];
    for b in 0..batch {
        gemm(
            out_channels,
            ncols,
            rows,
            &upstream[b * out_channels * ncols..(b + 1) * out_channels * ncols],
            false,
            &cols[b * rows * ncols..(b + 1) * rows * ncols],
            true,
            1.0,
            &mut dw,
        );
    }
    dw
}

pub(crate) fn conv_backward_input(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    weight: &[f64],
    upstream: &[f64],
) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut dx = vec![0.0; batch * g.input_len()];
    let mut dcol = vec![0.0; rows * ncols];
    for b in 0..batch {
        gemm(
            rows,
            out_channels,
            ncols,
            weight,
            true,
            &upstream[b * out_channels * ncols..(b + 1) * out_channels * ncols],
            false,
            0.0,
            &mut dcol,
        );
        col2im(g, &dcol, &mut dx[b * g.input_len()..(b + 1) * g.input_len()]);
    }
    dx
}
