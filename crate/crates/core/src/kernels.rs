//! Raw numeric kernels behind the differentiable ops: im2col convolution,
//! pooling and matrix products over row-major buffers.

use crate::float::Float;

/// Shape bookkeeping for a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial extent along one axis, or `None` when it would be empty.
    pub fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = size + 2 * padding;
        if stride == 0 || kernel == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn out_h(&self) -> usize {
        Self::out_extent(self.height, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    pub fn out_w(&self) -> usize {
        Self::out_extent(self.width, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    /// Rows of the column matrix: `C * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: `N * OH * OW`.
    pub fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds an `N x C x H x W` input into a `(C*k*k) x (N*OH*OW)` matrix.
pub fn im2col<F: Float>(input: &[F], g: &ConvGeometry) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let ncols = g.batch * ohw;
    let k = g.kernel;
    let mut cols = vec![F::ZERO; g.patch_len() * ncols];
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &input[(n * g.in_channels + c) * plane..][..plane];
                    for y in 0..oh {
                        let iy = (y * g.stride + kh) as isize - g.padding as isize;
                        let dst = &mut dst_row[n * ohw + y * ow..][..ow];
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        for (x, d) in dst.iter_mut().enumerate() {
                            let ix = (x * g.stride + kw) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<F: Float>(cols: &[F], g: &ConvGeometry, out: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let ncols = g.batch * ohw;
    let k = g.kernel;
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut out[(n * g.in_channels + c) * plane..][..plane];
                    for y in 0..oh {
                        let iy = (y * g.stride + kh) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[n * ohw + y * ow..][..ow];
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        for (x, &s) in src.iter().enumerate() {
                            let ix = (x * g.stride + kw) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns `(output NCHW, column matrix)`.
pub fn conv2d_forward<F: Float>(
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    g: &ConvGeometry,
) -> (Vec<F>, Vec<F>) {
    let cols = im2col(input, g);
    let ncols = g.cols();
    let ohw = g.out_h() * g.out_w();
    let mut out_mat = vec![F::ZERO; g.out_channels * ncols];
    F::gemm(
        g.out_channels,
        g.patch_len(),
        ncols,
        F::ONE,
        weight,
        g.patch_len() as isize,
        1,
        &cols,
        ncols as isize,
        1,
        F::ZERO,
        &mut out_mat,
        ncols as isize,
        1,
    );
    // [Cout, N, OHW] -> [N, Cout, OHW]
    let mut out = vec![F::ZERO; g.batch * g.out_channels * ohw];
    for co in 0..g.out_channels {
        let b = bias.map_or(F::ZERO, |b| b[co]);
        for n in 0..g.batch {
            let src = &out_mat[co * ncols + n * ohw..][..ohw];
            let dst = &mut out[(n * g.out_channels + co) * ohw..][..ohw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    (out, cols)
}

/// Gradients of a convolution given the upstream gradient in NCHW layout.
/// Returns `(d_input, d_weight, d_bias)`; `d_input` is skipped when not needed.
pub fn conv2d_backward<F: Float>(
    grad_out: &[F],
    cols: &[F],
    weight: &[F],
    g: &ConvGeometry,
    need_input_grad: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let ncols = g.cols();
    let ohw = g.out_h() * g.out_w();
    let patch = g.patch_len();
    // [N, Cout, OHW] -> [Cout, N*OHW]
    let mut dmat = vec![F::ZERO; g.out_channels * ncols];
    let mut dbias = vec![F::ZERO; g.out_channels];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let src = &grad_out[(n * g.out_channels + co) * ohw..][..ohw];
            dmat[co * ncols + n * ohw..][..ohw].copy_from_slice(src);
            dbias[co] += src.iter().copied().sum::<F>();
        }
    }
    let mut dweight = vec![F::ZERO; g.out_channels * patch];
    // dW = dY * cols^T
    F::gemm(
        g.out_channels,
        ncols,
        patch,
        F::ONE,
        &dmat,
        ncols as isize,
        1,
        cols,
        1,
        ncols as isize,
        F::ZERO,
        &mut dweight,
        patch as isize,
        1,
    );
    let dinput = need_input_grad.then(|| {
        // dcols = W^T * dY
        let mut dcols = vec![F::ZERO; patch * ncols];
        F::gemm(
            patch,
            g.out_channels,
            ncols,
            F::ONE,
            weight,
            1,
            patch as isize,
            &dmat,
            ncols as isize,
            1,
            F::ZERO,
            &mut dcols,
            ncols as isize,
            1,
        );
        let mut dx = vec![F::ZERO; g.batch * g.in_channels * g.height * g.width];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dinput, dweight, dbias)
}

/// Max pooling over `k x k` windows. Returns output values and, for each
/// output, the flat input index that produced it (first maximum wins).
pub fn max_pool2d<F: Float>(
    input: &[F],
    shape: [usize; 4],
    kernel: usize,
    stride: usize,
) -> (Vec<F>, Vec<usize>, [usize; 4]) {
    let [n, c, h, w] = shape;
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (y * stride) * w + x * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (y * stride + ky) * w + x * stride + kx;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx, [n, c, oh, ow])
}

/// Row-major `[m x k] * [k x n]`.
pub fn matmul<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; m * n];
    F::gemm(m, k, n, F::ONE, a, k as isize, 1, b, n as isize, 1, F::ZERO, &mut c, n as isize, 1);
    c
}
