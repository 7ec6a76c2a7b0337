//! Slice-level kernels behind the convolution and matrix ops.
//!
//! Convolutions lower to GEMM through im2col. Layouts are NCHW, kernels are
//! `[F, C, kh, kw]` for conv2d and `[C, F, kh, kw]` for its transpose.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a convolution reading a `channels×height×width` image.
    pub fn new(channels: usize, height: usize, width: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Filter counts at or below this use the direct path for stride-1 convs:
/// the column matrix would be large and the GEMM degenerate.
const DIRECT_MAX_FILTERS: usize = 4;

fn use_direct(g: &ConvGeom, filters: usize) -> bool {
    g.stride == 1 && filters <= DIRECT_MAX_FILTERS
}

/// Visits every (tap, output row) pair of a stride-1 conv with the clipped
/// horizontal span: `f(tap, in_offset, out_offset, len)`.
fn for_each_tap_row(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let pad = g.pad as isize;
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let tap = (c * g.kh + ky) * g.kw + kx;
                let shift = kx as isize - pad;
                let lo = (-shift).max(0) as usize;
                let hi = (g.width as isize - shift).min(g.out_w as isize);
                if hi <= lo as isize {
                    continue;
                }
                let len = hi as usize - lo;
                for oy in 0..g.out_h {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = (c * g.height + iy as usize) * g.width + (lo as isize + shift) as usize;
                    f(tap, src, oy * g.out_w + lo, len);
                }
            }
        }
    }
}

/// Unfolds one image into a `(C·kh·kw) × (out_h·out_w)` column matrix.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major and contiguous.
pub(crate) fn matmul_into<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (k, 1), b, (n, 1), beta, c, (n, 1));
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_into<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (k, 1), b, (1, k), beta, c, (n, 1));
}

/// `c[m×n] (+)= a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_at_into<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (1, m), b, (n, 1), beta, c, (n, 1));
}

/// conv2d forward over a batch. `input` is `N×C×H×W`, result `N×F×out_h×out_w`.
pub(crate) fn conv2d_forward<T: Scalar>(input: &[T], batch: usize, g: &ConvGeom, kernel: &[T], bias: &[T], filters: usize) -> Vec<T> {
    let k = g.col_rows();
    let hw = g.col_cols();
    let mut out = vec![T::zero(); batch * filters * hw];
    if use_direct(g, filters) {
        for n in 0..batch {
            let img = &input[n * g.image_len()..(n + 1) * g.image_len()];
            for f in 0..filters {
                let dst = &mut out[(n * filters + f) * hw..(n * filters + f + 1) * hw];
                dst.fill(bias[f]);
                let w = &kernel[f * k..(f + 1) * k];
                for_each_tap_row(g, |tap, si, di, len| {
                    let wv = w[tap];
                    dst[di..di + len].iter_mut().zip(&img[si..si + len]).for_each(|(d, &x)| *d += wv * x);
                });
            }
        }
        return out;
    }
    let mut col = vec![T::zero(); k * hw];
    for n in 0..batch {
        im2col(&input[n * g.image_len()..(n + 1) * g.image_len()], g, &mut col);
        let dst = &mut out[n * filters * hw..(n + 1) * filters * hw];
        for (f, chunk) in dst.chunks_mut(hw).enumerate() {
            chunk.fill(bias[f]);
        }
        matmul_into(filters, k, hw, kernel, &col, dst, true);
    }
    out
}

/// Gradients of conv2d. Returns `(d_input, d_kernel, d_bias)`; `d_input` only if requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    filters: usize,
    grad_out: &[T],
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let k = g.col_rows();
    let hw = g.col_cols();
    let mut d_kernel = vec![T::zero(); filters * k];
    let mut d_bias = vec![T::zero(); filters];
    let mut d_input = want_input.then(|| vec![T::zero(); batch * g.image_len()]);
    if use_direct(g, filters) {
        for n in 0..batch {
            let img = &input[n * g.image_len()..(n + 1) * g.image_len()];
            for f in 0..filters {
                let go = &grad_out[(n * filters + f) * hw..(n * filters + f + 1) * hw];
                d_bias[f] += go.iter().copied().sum::<T>();
                let dk = &mut d_kernel[f * k..(f + 1) * k];
                for_each_tap_row(g, |tap, si, di, len| {
                    dk[tap] += go[di..di + len].iter().zip(&img[si..si + len]).fold(T::zero(), |s, (&a, &b)| s + a * b);
                });
                if let Some(dx) = d_input.as_mut() {
                    let dx = &mut dx[n * g.image_len()..(n + 1) * g.image_len()];
                    let w = &kernel[f * k..(f + 1) * k];
                    for_each_tap_row(g, |tap, si, di, len| {
                        let wv = w[tap];
                        dx[si..si + len].iter_mut().zip(&go[di..di + len]).for_each(|(d, &x)| *d += wv * x);
                    });
                }
            }
        }
        return (d_input, d_kernel, d_bias);
    }
    let mut col = vec![T::zero(); k * hw];
    for n in 0..batch {
        let go = &grad_out[n * filters * hw..(n + 1) * filters * hw];
        for (f, chunk) in go.chunks(hw).enumerate() {
            d_bias[f] += chunk.iter().copied().sum::<T>();
        }
        im2col(&input[n * g.image_len()..(n + 1) * g.image_len()], g, &mut col);
        matmul_bt_into(filters, hw, k, go, &col, &mut d_kernel, true);
        if let Some(dx) = d_input.as_mut() {
            matmul_at_into(k, filters, hw, kernel, go, &mut col, false);
            col2im(&col, g, &mut dx[n * g.image_len()..(n + 1) * g.image_len()]);
        }
    }
    (d_input, d_kernel, d_bias)
}

/// Transposed conv forward. `g` describes the conv2d that maps the *output*
/// image (`g.channels = F`, `g.height = out_h`) down to the input grid.
pub(crate) fn conv_t_forward<T: Scalar>(input: &[T], batch: usize, in_channels: usize, g: &ConvGeom, kernel: &[T], bias: &[T]) -> Vec<T> {
    let k = g.col_rows();
    let hw = g.col_cols();
    let out_len = g.image_len();
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = vec![T::zero(); k * hw];
    for n in 0..batch {
        let x = &input[n * in_channels * hw..(n + 1) * in_channels * hw];
        matmul_at_into(k, in_channels, hw, kernel, x, &mut col, false);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        for (f, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[f]);
        }
        col2im(&col, g, dst);
    }
    out
}

pub(crate) fn conv_t_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    in_channels: usize,
    g: &ConvGeom,
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let k = g.col_rows();
    let hw = g.col_cols();
    let out_len = g.image_len();
    let plane = g.height * g.width;
    let mut d_kernel = vec![T::zero(); in_channels * k];
    let mut d_bias = vec![T::zero(); g.channels];
    let mut d_input = want_input.then(|| vec![T::zero(); batch * in_channels * hw]);
    let mut col = vec![T::zero(); k * hw];
    for n in 0..batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        for (f, chunk) in go.chunks(plane).enumerate() {
            d_bias[f] += chunk.iter().copied().sum::<T>();
        }
        im2col(go, g, &mut col);
        let x = &input[n * in_channels * hw..(n + 1) * in_channels * hw];
        matmul_bt_into(in_channels, hw, k, x, &col, &mut d_kernel, true);
        if let Some(dx) = d_input.as_mut() {
            matmul_into(in_channels, k, hw, kernel, &col, &mut dx[n * in_channels * hw..(n + 1) * in_channels * hw], false);
        }
    }
    (d_input, d_kernel, d_bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let img: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let col_probe: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; col_probe.len()];
        im2col(&img, &g, &mut col);
        let mut back = vec![0.0; img.len()];
        col2im(&col_probe, &g, &mut back);
        let lhs: f64 = col.iter().zip(&col_probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn direct_path_matches_gemm_path() {
        // Three filters take the direct path; the same problem padded to
        // five filters goes through im2col.
        let g = ConvGeom::new(2, 6, 5, 3, 3, 1, 1).unwrap();
        let batch = 2;
        let k = g.col_rows();
        let hw = g.col_cols();
        let input: Vec<f64> = (0..batch * g.image_len()).map(|i| (i as f64 * 0.31).sin()).collect();
        let kernel5: Vec<f64> = (0..5 * k).map(|i| (i as f64 * 0.17).cos()).collect();
        let bias5: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
        let direct = conv2d_forward(&input, batch, &g, &kernel5[..3 * k], &bias5[..3], 3);
        let gemm = conv2d_forward(&input, batch, &g, &kernel5, &bias5, 5);
        let grad5: Vec<f64> = (0..batch * 5 * hw).map(|i| (i as f64 * 0.07).sin()).collect();
        let mut grad3 = vec![0.0; batch * 3 * hw];
        let mut grad5_masked = grad5.clone();
        for n in 0..batch {
            for f in 0..5 {
                let plane = &mut grad5_masked[(n * 5 + f) * hw..(n * 5 + f + 1) * hw];
                if f < 3 {
                    grad3[(n * 3 + f) * hw..(n * 3 + f + 1) * hw].copy_from_slice(plane);
                } else {
                    plane.fill(0.0);
                }
            }
            for f in 0..3 {
                for p in 0..hw {
                    assert!((direct[(n * 3 + f) * hw + p] - gemm[(n * 5 + f) * hw + p]).abs() < 1e-12);
                }
            }
        }
        let (dx3, dk3, db3) = conv2d_backward(&input, batch, &g, &kernel5[..3 * k], 3, &grad3, true);
        let (dx5, dk5, db5) = conv2d_backward(&input, batch, &g, &kernel5, 5, &grad5_masked, true);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&dx3.unwrap(), &dx5.unwrap()));
        assert!(close(&dk3, &dk5[..3 * k]));
        assert!(close(&db3, &db5[..3]));
    }

    #[test]
    fn geometry_arithmetic() {
        let g = ConvGeom::new(3, 8, 8, 3, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        assert!(ConvGeom::new(1, 2, 2, 5, 5, 1, 1).is_none());
    }
}
