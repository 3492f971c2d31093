//! Raw NCHW kernels shared by the graph ops. Everything here is
//! single-threaded and has a fixed summation order, so results are bitwise
//! reproducible for a given build.

use crate::real::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.k) / self.stride + 1;
        (ho, wo)
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.n * ho * wo
    }
}

/// Output columns `ow` whose input column `ow·stride + kj − pad` is inside `[0, w)`.
fn valid_range(out: usize, stride: usize, offset: isize, w: usize) -> (usize, usize) {
    // smallest ow with ow·s + offset >= 0
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    // largest ow with ow·s + offset <= w − 1
    let hi_excl = if (w as isize - 1 - offset) < 0 {
        0
    } else {
        ((w as isize - 1 - offset) as usize) / stride + 1
    };
    let hi = hi_excl.min(out);
    (lo.min(hi), hi)
}

/// `x [N,C,H,W]` → `cols [C·k·k, N·Ho·Wo]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let ncols = g.n * ho * wo;
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                let offset = kj as isize - g.pad as isize;
                let (lo, hi) = valid_range(wo, g.stride, offset, g.w);
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oh in 0..ho {
                        let dst = &mut dst_row[(n * ho + oh) * wo..(n * ho + oh + 1) * wo];
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize || lo >= hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let first = (lo * g.stride) as isize + offset;
                        let first = first as usize;
                        if g.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src_row[first..first + (hi - lo)]);
                        } else {
                            for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src_row[first + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into `dx`, accumulating.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let ncols = g.n * ho * wo;
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                let offset = kj as isize - g.pad as isize;
                let (lo, hi) = valid_range(wo, g.stride, offset, g.w);
                if lo >= hi {
                    continue;
                }
                let first = ((lo * g.stride) as isize + offset) as usize;
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[(n * ho + oh) * wo..(n * ho + oh + 1) * wo];
                        let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (i, &s) in src[lo..hi].iter().enumerate() {
                            dst_row[first + i * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. `w` is `[Cout, C, k, k]`; returns `[N, Cout, Ho, Wo]`.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, cout: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); rows * ncols];
    im2col(x, g, &mut cols);
    let mut mat = vec![T::zero(); cout * ncols];
    gemm(cout, rows, ncols, w, false, &cols, false, T::zero(), &mut mat);
    let mut out = vec![T::zero(); g.n * cout * hw];
    for co in 0..cout {
        let b = bias.map(|b| b[co]).unwrap_or_else(T::zero);
        for n in 0..g.n {
            let src = &mat[co * ncols + n * hw..co * ncols + (n + 1) * hw];
            let dst = &mut out[(n * cout + co) * hw..(n * cout + co + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

/// Convolution backward. Returns `(dx, dw, db)`, each only if requested.
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    cout: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let rows = g.col_rows();
    let ncols = g.col_cols();
    // dout [N, Cout, HW] -> [Cout, N·HW]
    let mut dmat = vec![T::zero(); cout * ncols];
    for n in 0..g.n {
        for co in 0..cout {
            let src = &dout[(n * cout + co) * hw..(n * cout + co + 1) * hw];
            dmat[co * ncols + n * hw..co * ncols + (n + 1) * hw].copy_from_slice(src);
        }
    }
    let db = want_db.then(|| {
        (0..cout)
            .map(|co| dmat[co * ncols..(co + 1) * ncols].iter().copied().sum())
            .collect()
    });
    let dw = want_dw.then(|| {
        let mut cols = vec![T::zero(); rows * ncols];
        im2col(x, g, &mut cols);
        let mut dw = vec![T::zero(); cout * rows];
        gemm(cout, ncols, rows, &dmat, false, &cols, true, T::zero(), &mut dw);
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); rows * ncols];
        gemm(rows, cout, ncols, w, true, &dmat, false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

/// Average pooling with zero padding counted in the divisor (`k·k`).
pub fn avg_pool_forward<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let inv = T::one() / T::lit((g.k * g.k) as f64);
    let mut out = vec![T::zero(); g.n * g.c * ho * wo];
    for p in 0..g.n * g.c {
        let src = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            acc += src[ih as usize * g.w + iw as usize];
                        }
                    }
                }
                dst[oh * wo + ow] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Real>(dout: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let inv = T::one() / T::lit((g.k * g.k) as f64);
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for p in 0..g.n * g.c {
        let src = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oh in 0..ho {
            for ow in 0..wo {
                let v = src[oh * wo + ow] * inv;
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst[ih as usize * g.w + iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Separable "valid" correlation with the same 1-D kernel along both axes.
/// `planes` is the number of `h×w` planes.
pub fn blur_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    let k = kernel.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![T::zero(); h * wo];
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..wo {
                let mut acc = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    acc += kv * src[i * w + j + t];
                }
                tmp[i * wo + j] = acc;
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[(i + t) * wo + j];
                }
                dst[i * wo + j] = acc;
            }
        }
    }
    out
}

pub fn blur_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    let k = kernel.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut dx = vec![T::zero(); planes * h * w];
    let mut dtmp = vec![T::zero(); h * wo];
    for p in 0..planes {
        dtmp.fill(T::zero());
        let src = &dout[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let g = src[i * wo + j];
                for (t, &kv) in kernel.iter().enumerate() {
                    dtmp[(i + t) * wo + j] += kv * g;
                }
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..wo {
                let g = dtmp[i * wo + j];
                for (t, &kv) in kernel.iter().enumerate() {
                    dst[i * w + j + t] += kv * g;
                }
            }
        }
    }
    dx
}

pub fn upsample2x_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[i * w2 + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
            }
        }
    }
    dx
}

/// Per-plane normalization to zero mean and unit (biased) variance.
pub fn instance_norm_forward<T: Real>(x: &[T], planes: usize, hw: usize, eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let inv_n = T::one() / T::lit(hw as f64);
    for p in 0..planes {
        let src = &x[p * hw..(p + 1) * hw];
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv = T::one() / (var + eps).sqrt();
        for (d, &s) in out[p * hw..(p + 1) * hw].iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
    }
    out
}

pub fn instance_norm_backward<T: Real>(x: &[T], y: &[T], dy: &[T], planes: usize, hw: usize, eps: T) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    let inv_n = T::one() / T::lit(hw as f64);
    for p in 0..planes {
        let src = &x[p * hw..(p + 1) * hw];
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv = T::one() / (var + eps).sqrt();
        let yp = &y[p * hw..(p + 1) * hw];
        let gp = &dy[p * hw..(p + 1) * hw];
        let mean_g = gp.iter().copied().sum::<T>() * inv_n;
        let mean_gy = gp.iter().zip(yp).map(|(&g, &yv)| g * yv).sum::<T>() * inv_n;
        for ((d, &g), &yv) in dx[p * hw..(p + 1) * hw].iter_mut().zip(gp).zip(yp) {
            *d = inv * (g - mean_g - yv * mean_gy);
        }
    }
    dx
}

/// Per-sample Gram matrix `X Xᵀ / (C·H·W)` with `X` the `[C, H·W]` view.
pub fn gram_forward<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * c];
    let norm = T::one() / T::lit((c * hw) as f64);
    for s in 0..n {
        let xs = &x[s * c * hw..(s + 1) * c * hw];
        let os = &mut out[s * c * c..(s + 1) * c * c];
        gemm(c, hw, c, xs, false, xs, true, T::zero(), os);
        for v in os.iter_mut() {
            *v *= norm;
        }
    }
    out
}

pub fn gram_backward<T: Real>(x: &[T], dg: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    let norm = T::one() / T::lit((c * hw) as f64);
    let mut sym = vec![T::zero(); c * c];
    for s in 0..n {
        let g = &dg[s * c * c..(s + 1) * c * c];
        for i in 0..c {
            for j in 0..c {
                sym[i * c + j] = (g[i * c + j] + g[j * c + i]) * norm;
            }
        }
        let xs = &x[s * c * hw..(s + 1) * c * hw];
        gemm(
            c,
            c,
            hw,
            &sym,
            false,
            xs,
            false,
            T::zero(),
            &mut dx[s * c * hw..(s + 1) * c * hw],
        );
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], cout: usize, g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; g.n * cout * ho * wo];
        for n in 0..g.n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                                    let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                    if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c + c) * g.h + ih as usize) * g.w + iw as usize]
                                        * w[((co * g.c + c) * g.k + ki) * g.k + kj];
                                }
                            }
                        }
                        out[((n * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let g = ConvGeom {
                n: 2,
                c: 3,
                h: 7,
                w: 7,
                k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 3 * 49).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
            let fast = conv2d_forward(&x, &w, None, 4, &g);
            let slow = naive_conv(&x, &w, 4, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            n: 2,
            c: 2,
            h: 5,
            w: 5,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn avg_pool_counts_padding() {
        let g = ConvGeom {
            n: 1,
            c: 1,
            h: 2,
            w: 2,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let out = avg_pool_forward(&[1.0f64, 1.0, 1.0, 1.0], &g);
        assert_eq!(out, vec![4.0 / 9.0]);
    }

    #[test]
    fn gram_of_identity_rows() {
        // two channels, two spatial positions: rows [1,0] and [0,1]
        let g = gram_forward(&[1.0f64, 0.0, 0.0, 1.0], 1, 2, 2);
        assert_eq!(g, vec![0.25, 0.0, 0.0, 0.25]);
    }
}
