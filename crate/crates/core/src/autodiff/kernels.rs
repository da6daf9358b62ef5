//! Convolution kernels built on im2col and a blocked GEMM.
//!
//! A transposed convolution is evaluated as the input-gradient of the strided
//! convolution with the same geometry, so both directions share `im2col` /
//! `col2im` and the adjoint relationship holds by construction.

use rayon::prelude::*;

/// Geometry of a cross-correlation from `[c_in, h, w]` to `[c_out, ho, wo]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices, where `a` is
/// `m x k` after the optional transpose and `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Per-channel sums of a `[batch, channels, plane]` buffer.
fn channel_sums(dy: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for (i, chunk) in dy.chunks(plane).enumerate() {
        out[i % channels] += chunk.iter().sum::<f64>();
    }
    out
}

/// Sums per-sample buffers in sample order, independent of thread count.
fn ordered_sum(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for part in parts {
        acc.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
    }
    acc
}

/// Forward cross-correlation over a batch. `weight` is `[c_out, c_in, k, k]`.
pub(crate) fn conv_forward(x: &[f64], batch: usize, weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; batch * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(o, xs)| {
            if g.is_pointwise() {
                gemm(g.c_out, g.c_in, g.out_pixels(), weight, false, xs, false, 0.0, o);
            } else {
                let mut col = vec![0.0; g.col_rows() * g.out_pixels()];
                im2col(xs, g, &mut col);
                gemm(g.c_out, g.col_rows(), g.out_pixels(), weight, false, &col, false, 0.0, o);
            }
            if let Some(b) = bias {
                add_bias(o, b, g.out_pixels());
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

/// Backward of [`conv_forward`] for the requested inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    batch: usize,
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let krows = g.col_rows();
    let p = g.out_pixels();
    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = x
        .par_chunks(g.in_len())
        .zip(dy.par_chunks(g.out_len()))
        .map(|(xs, dys)| {
            let dw = want_dw.then(|| {
                let mut dw = vec![0.0; g.c_out * krows];
                if g.is_pointwise() {
                    gemm(g.c_out, p, krows, dys, false, xs, true, 0.0, &mut dw);
                } else {
                    let mut col = vec![0.0; krows * p];
                    im2col(xs, g, &mut col);
                    gemm(g.c_out, p, krows, dys, false, &col, true, 0.0, &mut dw);
                }
                dw
            });
            let dx = want_dx.then(|| {
                let mut dx = vec![0.0; g.in_len()];
                if g.is_pointwise() {
                    gemm(krows, g.c_out, p, weight, true, dys, false, 0.0, &mut dx);
                } else {
                    let mut dcol = vec![0.0; krows * p];
                    gemm(krows, g.c_out, p, weight, true, dys, false, 0.0, &mut dcol);
                    col2im_add(&dcol, g, &mut dx);
                }
                dx
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = want_dx.then(|| Vec::with_capacity(batch * g.in_len()));
    let mut dw_parts = Vec::new();
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let Some(dw) = dw {
            dw_parts.push(dw);
        }
    }
    ConvGrads {
        dx: dx_all,
        dw: want_dw.then(|| ordered_sum(dw_parts, g.c_out * krows)),
        db: want_db.then(|| channel_sums(dy, g.c_out, p)),
    }
}

/// Transposed convolution: the adjoint of the strided convolution described by
/// `g`, mapping `[g.c_out, g.ho, g.wo]` to `[g.c_in, g.h, g.w]`.
/// `weight` is `[g.c_out, g.c_in, k, k]` in conv terms, i.e. `[c_in', c_out', k, k]`
/// from the transposed layer's point of view.
pub(crate) fn conv_transpose_forward(x: &[f64], batch: usize, weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let krows = g.col_rows();
    let p = g.out_pixels();
    let mut out = vec![0.0; batch * g.in_len()];
    out.par_chunks_mut(g.in_len())
        .zip(x.par_chunks(g.out_len()))
        .for_each(|(o, xs)| {
            let mut col = vec![0.0; krows * p];
            gemm(krows, g.c_out, p, weight, true, xs, false, 0.0, &mut col);
            col2im_add(&col, g, o);
            if let Some(b) = bias {
                add_bias(o, b, g.h * g.w);
            }
        });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward(
    x: &[f64],
    batch: usize,
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let krows = g.col_rows();
    let p = g.out_pixels();
    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = x
        .par_chunks(g.out_len())
        .zip(dy.par_chunks(g.in_len()))
        .map(|(xs, dys)| {
            let mut dcol = vec![0.0; krows * p];
            im2col(dys, g, &mut dcol);
            let dx = want_dx.then(|| {
                let mut dx = vec![0.0; g.out_len()];
                gemm(g.c_out, krows, p, weight, false, &dcol, false, 0.0, &mut dx);
                dx
            });
            let dw = want_dw.then(|| {
                let mut dw = vec![0.0; g.c_out * krows];
                gemm(g.c_out, p, krows, xs, false, &dcol, true, 0.0, &mut dw);
                dw
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = want_dx.then(|| Vec::with_capacity(batch * g.out_len()));
    let mut dw_parts = Vec::new();
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let Some(dw) = dw {
            dw_parts.push(dw);
        }
    }
    ConvGrads {
        dx: dx_all,
        dw: want_dw.then(|| ordered_sum(dw_parts, g.c_out * krows)),
        db: want_db.then(|| channel_sums(dy, g.c_in, g.h * g.w)),
    }
}
