//! Tape-free numeric kernels shared by the autodiff ops and the pruned
//! inference path.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Shape bookkeeping for one 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::Dimension(format!("conv2d input: expected rank 4, got {input:?}"))),
        };
        let (cout, wc, kh, kw) = match *weight {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(Error::Dimension(format!("conv2d weight: expected rank 4, got {weight:?}"))),
        };
        if wc != cin {
            return Err(Error::Dimension(format!(
                "conv2d weight: expects {wc} input channels, input has {cin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Dimension(format!("conv2d weight: kernel must be odd and square, got {kh}x{kw}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Argument(format!("conv2d: stride must be 1 or 2, got {stride}")));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Dimension(format!("conv2d input: {h}x{w} too small for kernel {k} with padding {pad}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { n, cin, h, w, cout, k, stride, pad, ho, wo })
    }

    pub fn out_area(&self) -> usize {
        self.ho * self.wo
    }

    /// Rows of the unfolded input matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Columns of the unfolded input matrix.
    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Output positions `o` in `0..out` whose input coordinate
/// `o * stride + offset - pad` falls inside `0..len`.
fn valid_range(out: usize, len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    // o * stride + offset >= pad  and  o * stride + offset < len + pad
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    let hi = if len + pad > offset { (len + pad - offset).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `x` (`[n, cin, h, w]`) into a `[cin*k*k, n*ho*wo]` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let p = g.out_area();
    let mut cols = vec![T::zero(); g.patch_len() * ncols];
    for c in 0..g.cin {
        for ki in 0..g.k {
            let (oh_lo, oh_hi) = valid_range(g.ho, g.h, g.stride, ki, g.pad);
            for kj in 0..g.k {
                let (ow_lo, ow_hi) = valid_range(g.wo, g.w, g.stride, kj, g.pad);
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * p..(n + 1) * p];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let src_row = &src[ih * g.w..(ih + 1) * g.w];
                        let dst_seg = &mut dst[oh * g.wo + ow_lo..oh * g.wo + ow_hi];
                        let iw0 = ow_lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            dst_seg.copy_from_slice(&src_row[iw0..iw0 + dst_seg.len()]);
                        } else {
                            for (j, d) in dst_seg.iter_mut().enumerate() {
                                *d = src_row[iw0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `dx`.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.cols();
    let p = g.out_area();
    for c in 0..g.cin {
        for ki in 0..g.k {
            let (oh_lo, oh_hi) = valid_range(g.ho, g.h, g.stride, ki, g.pad);
            for kj in 0..g.k {
                let (ow_lo, ow_hi) = valid_range(g.wo, g.w, g.stride, kj, g.pad);
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
                    let src = &src_row[n * p..(n + 1) * p];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let dst_row = &mut dst[ih * g.w..(ih + 1) * g.w];
                        let src_seg = &src[oh * g.wo + ow_lo..oh * g.wo + ow_hi];
                        let iw0 = ow_lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            for (d, &s) in dst_row[iw0..iw0 + src_seg.len()].iter_mut().zip(src_seg) {
                                *d = *d + s;
                            }
                        } else {
                            for (j, &s) in src_seg.iter().enumerate() {
                                let d = &mut dst_row[iw0 + j * g.stride];
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns the `[n, cout, ho, wo]` output and the
/// unfolded input (kept for the backward pass).
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let ncols = g.cols();
    let kk = g.patch_len();
    let mut y = vec![T::zero(); g.cout * ncols];
    T::gemm(
        g.cout, kk, ncols, T::one(), weight, kk as isize, 1, &cols, ncols as isize, 1, T::zero(), &mut y,
        ncols as isize, 1,
    );
    (channel_major_to_batch_major(&y, g.n, g.cout, g.out_area()), cols)
}

/// Accumulates the weight gradient of a convolution. `dyp` is the
/// upstream gradient in channel-major layout (`[cout, n*ho*wo]`).
pub fn conv2d_backward_weight<T: Scalar>(dyp: &[T], cols: &[T], g: &ConvGeom, dw: &mut [T]) {
    let ncols = g.cols();
    let kk = g.patch_len();
    T::gemm(g.cout, ncols, kk, T::one(), dyp, ncols as isize, 1, cols, 1, ncols as isize, T::one(), dw, kk as isize, 1);
}

/// Accumulates the input gradient of a convolution (see
/// [`conv2d_backward_weight`] for the layout of `dyp`).
pub fn conv2d_backward_input<T: Scalar>(dyp: &[T], weight: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.cols();
    let kk = g.patch_len();
    if kk == 0 {
        return;
    }
    let mut dcols = vec![T::zero(); kk * ncols];
    T::gemm(
        kk, g.cout, ncols, T::one(), weight, 1, kk as isize, dyp, ncols as isize, 1, T::zero(), &mut dcols,
        ncols as isize, 1,
    );
    col2im_add(&dcols, g, dx);
}

/// `[c, n*p]` -> `[n, c, p]`
pub fn channel_major_to_batch_major<T: Scalar>(y: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ci in 0..c {
        for ni in 0..n {
            let src = &y[ci * n * p + ni * p..ci * n * p + (ni + 1) * p];
            out[(ni * c + ci) * p..(ni * c + ci + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[n, c, p]` -> `[c, n*p]`
pub fn batch_major_to_channel_major<T: Scalar>(y: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ni in 0..n {
        for ci in 0..c {
            let src = &y[(ni * c + ci) * p..(ni * c + ci + 1) * p];
            out[ci * n * p + ni * p..ci * n * p + (ni + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// Numerically stable softmax of each row of a `[rows, cols]` matrix,
/// with the logits divided by `temperature` first.
pub fn softmax_rows<T: Scalar>(logits: &[T], cols: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x / temperature));
        let mut total = T::zero();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x / temperature - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
