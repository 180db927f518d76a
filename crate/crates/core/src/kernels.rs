//! Low-level forward/backward kernels over flat NCHW buffers. The graph in
//! [`crate::autodiff`] validates shapes before calling into these.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// `floor((extent + 2·padding − kernel) / stride) + 1`, which may be < 1.
    pub fn output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> i64 {
        let span = extent as i64 + 2 * padding as i64 - kernel as i64;
        if span < 0 {
            return 0;
        }
        span / stride as i64 + 1
    }

    pub fn out_height(&self) -> usize {
        Self::output_extent(self.height, self.kernel, self.stride, self.padding) as usize
    }

    pub fn out_width(&self) -> usize {
        Self::output_extent(self.width, self.kernel, self.stride, self.padding) as usize
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside
/// the image.
fn valid_cols(g: &ConvGeometry, kx: usize, ow: usize) -> (usize, usize) {
    let pad = g.padding as isize;
    let first = (pad - kx as isize).max(0);
    let lo = ((first + g.stride as isize - 1) / g.stride as isize) as usize;
    let last = g.width as isize - 1 + pad - kx as isize;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / g.stride + 1).min(ow)
    };
    (lo.min(hi), hi)
}

/// Unfolds one CHW image into a `(C·k·k) × (H'·W')` patch matrix.
fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, col: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let start = (lo * g.stride + kx) as isize - pad;
                    if g.stride == 1 {
                        let start = start as usize;
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, ix) in out_row[lo..hi]
                            .iter_mut()
                            .zip((start as usize..).step_by(g.stride))
                        {
                            *v = src[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds patch gradients back onto the image.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, image: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(g, kx, ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let start = ((lo * g.stride + kx) as isize - pad) as usize;
                    let s = &src[oy * ow + lo..oy * ow + hi];
                    for (v, ix) in s.iter().zip((start..).step_by(g.stride)) {
                        dst[ix] = dst[ix] + *v;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * cols;
    let mut out = vec![T::zero(); batch * out_size];
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..batch {
        im2col(&input[b * in_size..(b + 1) * in_size], g, &mut col);
        let dst = &mut out[b * out_size..(b + 1) * out_size];
        for (co, chunk) in dst.chunks_exact_mut(cols).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        T::gemm(
            g.out_channels,
            rows,
            cols,
            T::one(),
            kernel,
            rows as isize,
            1,
            &col,
            cols as isize,
            1,
            T::one(),
            dst,
            cols as isize,
            1,
        );
    }
    out
}

/// Gradients of a convolution. Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    batch: usize,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * cols;
    let mut d_input = vec![T::zero(); input.len()];
    let mut d_kernel = vec![T::zero(); kernel.len()];
    let mut d_bias = vec![T::zero(); g.out_channels];
    let mut col = vec![T::zero(); rows * cols];
    let mut d_col = vec![T::zero(); rows * cols];
    for b in 0..batch {
        let go = &grad_out[b * out_size..(b + 1) * out_size];
        for (co, chunk) in go.chunks_exact(cols).enumerate() {
            d_bias[co] = d_bias[co] + chunk.iter().copied().sum::<T>();
        }
        im2col(&input[b * in_size..(b + 1) * in_size], g, &mut col);
        // dK += dY · colᵀ
        T::gemm(
            g.out_channels,
            cols,
            rows,
            T::one(),
            go,
            cols as isize,
            1,
            &col,
            1,
            cols as isize,
            T::one(),
            &mut d_kernel,
            rows as isize,
            1,
        );
        // dcol = Kᵀ · dY
        T::gemm(
            rows,
            g.out_channels,
            cols,
            T::one(),
            kernel,
            1,
            rows as isize,
            go,
            cols as isize,
            1,
            T::zero(),
            &mut d_col,
            cols as isize,
            1,
        );
        col2im(&d_col, g, &mut d_input[b * in_size..(b + 1) * in_size]);
    }
    (d_input, d_kernel, d_bias)
}

pub fn pool_extent(extent: usize, ceil_mode: bool) -> usize {
    if ceil_mode {
        extent.div_ceil(2)
    } else {
        extent / 2
    }
}

/// 2×2 stride-2 max pooling over `planes` HW planes. Returns the pooled
/// values and, per output cell, the flat input index of the winning cell
/// (first occurrence in row-major order on ties).
pub fn maxpool2x2_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    height: usize,
    width: usize,
    ceil_mode: bool,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (
        pool_extent(height, ceil_mode),
        pool_extent(width, ceil_mode),
    );
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = usize::MAX;
                let mut best = T::neg_infinity();
                for dy in 0..2 {
                    let y = oy * 2 + dy;
                    if y >= height {
                        continue;
                    }
                    for dx in 0..2 {
                        let x = ox * 2 + dx;
                        if x >= width {
                            continue;
                        }
                        let idx = base + y * width + x;
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}
