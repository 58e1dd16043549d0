//! Raw forward/backward kernels over flat slices. Shapes are validated by the
//! callers in `autograd`.

use crate::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: h.div_ceil(stride),
            w_out: w.div_ceil(stride),
        }
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.positions()
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let p = g.positions();
    let mut out = vec![T::zero(); batch * g.out_len()];
    let mut cols = vec![T::zero(); g.patch() * p];
    for n in 0..batch {
        im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        let o = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        for (co, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm_acc(g.c_out, g.patch(), p, kernel, &cols, o);
    }
    out
}

/// Accumulates gradients for input, kernel and bias. Any of the outputs may be
/// skipped by passing `None`.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let p = g.positions();
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * p];
    let kt = dx.as_ref().map(|_| transpose(g.c_out, patch, kernel));
    let mut dcols = vec![T::zero(); if dx.is_some() { patch * p } else { 0 }];
    for n in 0..batch {
        let d = &dout[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in d.chunks(p).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dk.as_deref_mut() {
            im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            let cols_t = transpose(patch, p, &cols);
            gemm_acc(g.c_out, p, patch, d, &cols_t, dk);
        }
        if let (Some(dx), Some(kt)) = (dx.as_deref_mut(), kt.as_ref()) {
            dcols.fill(T::zero());
            gemm_acc(patch, g.c_out, p, kt, d, &mut dcols);
            col2im_acc(g, &dcols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
}

/// `out[N×m] = x[N×n] · wᵀ + b`
pub(crate) fn dense_forward<T: Real>(
    batch: usize,
    n: usize,
    m: usize,
    x: &[T],
    w: &[T],
    b: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    let wt = transpose(m, n, w);
    gemm_acc(batch, n, m, x, &wt, &mut out);
    out
}

pub(crate) fn upsample2x_forward<T: Real>(planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for pl in 0..planes {
        for y in 0..h2 {
            let src = &x[(pl * h + y / 2) * w..][..w];
            let dst = &mut out[(pl * h2 + y) * w2..][..w2];
            for (xo, v) in dst.iter_mut().enumerate() {
                *v = src[xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(
    planes: usize,
    h: usize,
    w: usize,
    dout: &[T],
    dx: &mut [T],
) {
    let (h2, w2) = (2 * h, 2 * w);
    for pl in 0..planes {
        for y in 0..h2 {
            let src = &dout[(pl * h2 + y) * w2..][..w2];
            let dst = &mut dx[(pl * h + y / 2) * w..][..w];
            for (xo, &v) in src.iter().enumerate() {
                dst[xo / 2] += v;
            }
        }
    }
}
