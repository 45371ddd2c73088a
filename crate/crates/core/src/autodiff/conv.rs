//! im2col-based 2D convolution kernels.
//!
//! Work is split over the batch and, for large planes, over fixed-size blocks
//! of output columns. Block boundaries do not depend on the thread count and
//! weight gradients are reduced in sample order, so results are bit-identical
//! regardless of the rayon pool size.

use super::Real;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    #[inline]
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    #[inline]
    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    #[inline]
    fn out_len(&self) -> usize {
        self.out_ch * self.out_plane()
    }
}

/// Output extent along one axis, `None` when the kernel does not fit.
pub(crate) fn output_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `ox` whose input column `ox * stride + kx - pad`
/// lies inside `[0, in_w)`.
fn valid_columns(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let first = g.padding.saturating_sub(kx).div_ceil(g.stride);
    let last = if g.in_w + g.padding > kx {
        ((g.in_w + g.padding - kx - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (first.min(last), last)
}

/// Unfolds one sample `(C, H, W)` into a `(C*kh*kw, out_h*out_w)` matrix.
fn im2col<T: Real>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_ch {
        let src = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let ix0 = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                    } else {
                        for (out, v) in line[lo..hi].iter_mut().zip(src_row[ix0..].iter().step_by(g.stride)) {
                            *out = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds patch columns back into `(C, H, W)`.
fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], grad_input: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_ch {
        let dst = &mut grad_input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns per parallel work item in [`forward`].
const COLUMN_CHUNK: usize = 1024;

pub(crate) fn forward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.out_len()];
    if batch == 0 {
        return out;
    }
    let k = g.patch_len();
    let p = g.out_plane();
    out.par_chunks_mut(g.out_len())
        .zip(input.par_chunks(g.in_len()))
        .for_each(|(out_n, in_n)| {
            let mut cols = vec![T::zero(); k * p];
            im2col(g, in_n, &mut cols);
            let fill_bias = |dst: &mut [T], n: usize| {
                if let Some(b) = bias {
                    for (oc, row) in dst.chunks_mut(n).enumerate() {
                        row.fill(b[oc]);
                    }
                }
            };
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if p < 2 * COLUMN_CHUNK {
                fill_bias(out_n, p);
                T::gemm(
                    g.out_ch, k, p, T::one(),
                    weight, k as isize, 1,
                    &cols, p as isize, 1,
                    beta,
                    out_n, p as isize, 1,
                );
                return;
            }
            // Large planes: split output columns into fixed-size chunks so a
            // single image also spreads across threads.
            let parts: Vec<(usize, Vec<T>)> = (0..p)
                .step_by(COLUMN_CHUNK)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|p0| {
                    let n = COLUMN_CHUNK.min(p - p0);
                    let mut c = vec![T::zero(); g.out_ch * n];
                    fill_bias(&mut c, n);
                    T::gemm(
                        g.out_ch, k, n, T::one(),
                        weight, k as isize, 1,
                        &cols[p0..], p as isize, 1,
                        beta,
                        &mut c, n as isize, 1,
                    );
                    (p0, c)
                })
                .collect();
            for (p0, c) in parts {
                let n = c.len() / g.out_ch;
                for (oc, row) in c.chunks(n).enumerate() {
                    out_n[oc * p + p0..oc * p + p0 + n].copy_from_slice(row);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let k = g.patch_len();
    let p = g.out_plane();

    let grad_input = need_input.then(|| {
        let mut gi = vec![T::zero(); batch * g.in_len()];
        gi.par_chunks_mut(g.in_len())
            .zip(grad_out.par_chunks(g.out_len()))
            .for_each(|(gi_n, go_n)| {
                let mut cols = vec![T::zero(); k * p];
                // dcols = W^T * dY
                T::gemm(
                    k, g.out_ch, p, T::one(),
                    weight, 1, k as isize,
                    go_n, p as isize, 1,
                    T::zero(),
                    &mut cols, p as isize, 1,
                );
                col2im(g, &cols, gi_n);
            });
        gi
    });

    let grad_weight = need_weight.then(|| {
        let per_sample: Vec<Vec<T>> = input
            .par_chunks(g.in_len())
            .zip(grad_out.par_chunks(g.out_len()))
            .map(|(in_n, go_n)| {
                let mut cols = vec![T::zero(); k * p];
                im2col(g, in_n, &mut cols);
                let mut gw = vec![T::zero(); g.out_ch * k];
                // dW = dY * cols^T
                T::gemm(
                    g.out_ch, p, k, T::one(),
                    go_n, p as isize, 1,
                    &cols, 1, p as isize,
                    T::zero(),
                    &mut gw, k as isize, 1,
                );
                gw
            })
            .collect();
        let mut total = vec![T::zero(); g.out_ch * k];
        for gw in per_sample {
            for (t, v) in total.iter_mut().zip(gw) {
                *t = *t + v;
            }
        }
        total
    });

    let grad_bias = need_bias.then(|| {
        let mut gb = vec![T::zero(); g.out_ch];
        for go_n in grad_out.chunks(g.out_len()) {
            for (oc, chunk) in go_n.chunks(p).enumerate() {
                gb[oc] = chunk.iter().fold(gb[oc], |acc, &v| acc + v);
            }
        }
        gb
    });

    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}
