//! Convolution kernels built on im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;
use ndarray::ArrayViewMut2;

use super::Real;

/// `C = alpha * op(A) · op(B) + beta * C` with row-major operands.
///
/// `A` is `m×k` (stored `k×m` when `ta`), `B` is `k×n` (stored `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let av = if ta {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Geometry of a 2-D convolution over one group of channels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds channels `[c0, c0 + cg)` of an NCHW tensor with `c_total` channels into a
/// `[cg·k·k, n·ho·wo]` column matrix.
pub(crate) fn im2col<T: Real>(x: &[T], c_total: usize, c0: usize, cg: usize, g: ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    let plane = g.h * g.w;
    let opl = g.ho * g.wo;
    for ci in 0..cg {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * c_total + c0 + ci) * plane..][..plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let base = n * opl + oy * g.wo;
                        if iy < 0 || iy >= g.h as isize {
                            dst[base..base + g.wo].iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            dst[base + ox] = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into channels `[c0, c0 + cg)`.
pub(crate) fn col2im<T: Real>(cols: &[T], c_total: usize, c0: usize, cg: usize, g: ConvGeom, x: &mut [T]) {
    let ncols = g.cols();
    let plane = g.h * g.w;
    let opl = g.ho * g.wo;
    for ci in 0..cg {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut x[(n * c_total + c0 + ci) * plane..][..plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * opl + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = &mut dst[iy as usize * g.w + ix as usize];
                                *d = *d + src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies channels `[c0, c0+cg)` of `[n, c_total, p]` into a `[cg, n·p]` matrix.
pub(crate) fn gather_channels<T: Real>(x: &[T], n: usize, c_total: usize, c0: usize, cg: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cg * n * p];
    for ci in 0..cg {
        for b in 0..n {
            out[ci * n * p + b * p..][..p].copy_from_slice(&x[(b * c_total + c0 + ci) * p..][..p]);
        }
    }
    out
}

/// Inverse of [`gather_channels`], writing (not accumulating).
pub(crate) fn scatter_channels<T: Real>(
    m: &[T],
    n: usize,
    c_total: usize,
    c0: usize,
    cg: usize,
    p: usize,
    x: &mut [T],
) {
    for ci in 0..cg {
        for b in 0..n {
            x[(b * c_total + c0 + ci) * p..][..p].copy_from_slice(&m[ci * n * p + b * p..][..p]);
        }
    }
}

/// Parameters of a (possibly grouped) convolution. Weight layout `[out, in/groups, k, k]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    w: &[T],
    bias: Option<&[T]>,
    s: ConvSpec,
) -> (Vec<T>, [usize; 4]) {
    let [n, c, h, wd] = shape;
    debug_assert_eq!(c, s.in_c);
    let ho = conv_out_dim(h, s.k, s.stride, s.pad);
    let wo = conv_out_dim(wd, s.k, s.stride, s.pad);
    let g = ConvGeom {
        n,
        h,
        w: wd,
        k: s.k,
        stride: s.stride,
        pad: s.pad,
        ho,
        wo,
    };
    let cg = s.in_c / s.groups;
    let og = s.out_c / s.groups;
    let rows = cg * s.k * s.k;
    let p = ho * wo;
    let mut cols = vec![T::zero(); rows * n * p];
    let mut out_g = vec![T::zero(); og * n * p];
    let mut out = vec![T::zero(); n * s.out_c * p];
    for gi in 0..s.groups {
        im2col(x, c, gi * cg, cg, g, &mut cols);
        let wg = &w[gi * og * rows..(gi + 1) * og * rows];
        gemm(
            og,
            rows,
            n * p,
            T::one(),
            wg,
            false,
            &cols,
            false,
            T::zero(),
            &mut out_g,
        );
        scatter_channels(&out_g, n, s.out_c, gi * og, og, p, &mut out);
    }
    if let Some(b) = bias {
        for bn in 0..n {
            for o in 0..s.out_c {
                out[(bn * s.out_c + o) * p..][..p]
                    .iter_mut()
                    .for_each(|v| *v = *v + b[o]);
            }
        }
    }
    (out, [n, s.out_c, ho, wo])
}

/// Returns `(dx, dw, db)` for [`conv2d_forward`].
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    w: &[T],
    dy: &[T],
    s: ConvSpec,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let [n, c, h, wd] = shape;
    let ho = conv_out_dim(h, s.k, s.stride, s.pad);
    let wo = conv_out_dim(wd, s.k, s.stride, s.pad);
    let g = ConvGeom {
        n,
        h,
        w: wd,
        k: s.k,
        stride: s.stride,
        pad: s.pad,
        ho,
        wo,
    };
    let cg = s.in_c / s.groups;
    let og = s.out_c / s.groups;
    let rows = cg * s.k * s.k;
    let p = ho * wo;
    let mut cols = vec![T::zero(); rows * n * p];
    let mut dcols = vec![T::zero(); rows * n * p];
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = if need_dx { Some(vec![T::zero(); x.len()]) } else { None };
    for gi in 0..s.groups {
        let dyg = gather_channels(dy, n, s.out_c, gi * og, og, p);
        im2col(x, c, gi * cg, cg, g, &mut cols);
        let dwg = &mut dw[gi * og * rows..(gi + 1) * og * rows];
        gemm(og, n * p, rows, T::one(), &dyg, false, &cols, true, T::zero(), dwg);
        if let Some(dx) = dx.as_mut() {
            let wg = &w[gi * og * rows..(gi + 1) * og * rows];
            gemm(rows, og, n * p, T::one(), wg, true, &dyg, false, T::zero(), &mut dcols);
            col2im(&dcols, c, gi * cg, cg, g, dx);
        }
    }
    let mut db = vec![T::zero(); s.out_c];
    for bn in 0..n {
        for (o, d) in db.iter_mut().enumerate() {
            *d = *d + dy[(bn * s.out_c + o) * p..][..p].iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

/// Transposed convolution (groups = 1). Weight layout `[in, out, k, k]`.
pub(crate) fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    w: &[T],
    bias: Option<&[T]>,
    s: ConvSpec,
) -> (Vec<T>, [usize; 4]) {
    let [n, c, h, wd] = shape;
    debug_assert_eq!(c, s.in_c);
    let ho = (h - 1) * s.stride + s.k - 2 * s.pad;
    let wo = (wd - 1) * s.stride + s.k - 2 * s.pad;
    // The output plane plays the role of a convolution input whose output grid is h×wd.
    let g = ConvGeom {
        n,
        h: ho,
        w: wo,
        k: s.k,
        stride: s.stride,
        pad: s.pad,
        ho: h,
        wo: wd,
    };
    let p = h * wd;
    let rows = s.out_c * s.k * s.k;
    let xm = gather_channels(x, n, c, 0, c, p);
    let mut cols = vec![T::zero(); rows * n * p];
    gemm(rows, c, n * p, T::one(), w, true, &xm, false, T::zero(), &mut cols);
    let mut out = vec![T::zero(); n * s.out_c * ho * wo];
    col2im(&cols, s.out_c, 0, s.out_c, g, &mut out);
    if let Some(b) = bias {
        let op = ho * wo;
        for bn in 0..n {
            for o in 0..s.out_c {
                out[(bn * s.out_c + o) * op..][..op]
                    .iter_mut()
                    .for_each(|v| *v = *v + b[o]);
            }
        }
    }
    (out, [n, s.out_c, ho, wo])
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    w: &[T],
    dy: &[T],
    s: ConvSpec,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let [n, c, h, wd] = shape;
    let ho = (h - 1) * s.stride + s.k - 2 * s.pad;
    let wo = (wd - 1) * s.stride + s.k - 2 * s.pad;
    let g = ConvGeom {
        n,
        h: ho,
        w: wo,
        k: s.k,
        stride: s.stride,
        pad: s.pad,
        ho: h,
        wo: wd,
    };
    let p = h * wd;
    let rows = s.out_c * s.k * s.k;
    let mut dcols = vec![T::zero(); rows * n * p];
    im2col(dy, s.out_c, 0, s.out_c, g, &mut dcols);
    let xm = gather_channels(x, n, c, 0, c, p);
    let mut dw = vec![T::zero(); w.len()];
    gemm(c, n * p, rows, T::one(), &xm, false, &dcols, true, T::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dxm = vec![T::zero(); c * n * p];
        gemm(c, rows, n * p, T::one(), w, false, &dcols, false, T::zero(), &mut dxm);
        let mut dx = vec![T::zero(); x.len()];
        scatter_channels(&dxm, n, c, 0, c, p, &mut dx);
        dx
    });
    let op = ho * wo;
    let mut db = vec![T::zero(); s.out_c];
    for bn in 0..n {
        for (o, d) in db.iter_mut().enumerate() {
            *d = *d + dy[(bn * s.out_c + o) * op..][..op].iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}
