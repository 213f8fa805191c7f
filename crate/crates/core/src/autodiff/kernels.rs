//! Forward and backward kernels on raw buffers. Each function is pure; the
//! graph in `mod.rs` owns shape checks and bookkeeping.

use rayon::prelude::*;

use crate::tensor::{gemm, Element, MatRef, Shape};

/// Output-row chunk used to split large GEMMs across threads. Fixed so the
/// summation order of every output element is independent of thread count.
const ROW_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Lower one sample `[cin, h, w]` into a `[cin*kh*kw, ho*wo]` patch matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.out_positions();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

/// Scatter-add a patch matrix back onto one sample `[cin, h, w]`.
fn col2im<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_positions();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
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
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = a * b` where `a` is `[m, k]`, split into fixed row chunks.
fn gemm_rows_par<T: Element>(a: &[T], m: usize, k: usize, b: MatRef<'_, T>, out: &mut [T]) {
    let n = out.len() / m.max(1);
    out.par_chunks_mut(ROW_CHUNK * n)
        .enumerate()
        .for_each(|(chunk, dst)| {
            let rows = dst.len() / n;
            let r0 = chunk * ROW_CHUNK;
            gemm(
                MatRef::new(&a[r0 * k..(r0 + rows) * k], rows, k),
                b,
                T::zero(),
                dst,
            );
        });
}

pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.out_positions();
    let k = g.patch_len();
    let sample_in = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    out.par_chunks_mut(g.cout * p)
        .enumerate()
        .for_each(|(n, dst)| {
            let xs = &x[n * sample_in..(n + 1) * sample_in];
            let owned;
            let col: &[T] = if g.is_pointwise() {
                xs
            } else {
                let mut c = vec![T::zero(); k * p];
                im2col(xs, g, &mut c);
                owned = c;
                &owned
            };
            gemm_rows_par(weight, g.cout, k, MatRef::new(col, k, p), dst);
            if let Some(b) = bias {
                for (co, row) in dst.chunks_mut(p).enumerate() {
                    for v in row.iter_mut() {
                        *v = *v + b[co];
                    }
                }
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    gy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let p = g.out_positions();
    let k = g.patch_len();
    let sample_in = g.cin * g.h * g.w;

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); g.n * sample_in];
        dx.par_chunks_mut(sample_in)
            .enumerate()
            .for_each(|(n, dxs)| {
                let gys = &gy[n * g.cout * p..(n + 1) * g.cout * p];
                let mut dcol = vec![T::zero(); k * p];
                // dcol = W^T [k, cout] * gy [cout, p]
                gemm(
                    MatRef::new(weight, g.cout, k).t(),
                    MatRef::new(gys, g.cout, p),
                    T::zero(),
                    &mut dcol,
                );
                if g.is_pointwise() {
                    dxs.copy_from_slice(&dcol);
                } else {
                    col2im(&dcol, g, dxs);
                }
            });
        dx
    });

    let dw = need_dw.then(|| {
        let per_sample: Vec<Vec<T>> = (0..g.n)
            .into_par_iter()
            .map(|n| {
                let xs = &x[n * sample_in..(n + 1) * sample_in];
                let gys = &gy[n * g.cout * p..(n + 1) * g.cout * p];
                let owned;
                let col: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    let mut c = vec![T::zero(); k * p];
                    im2col(xs, g, &mut c);
                    owned = c;
                    &owned
                };
                let mut dw = vec![T::zero(); g.cout * k];
                // dW = gy [cout, p] * col^T [p, k]
                gemm(
                    MatRef::new(gys, g.cout, p),
                    MatRef::new(col, k, p).t(),
                    T::zero(),
                    &mut dw,
                );
                dw
            })
            .collect();
        let mut acc = vec![T::zero(); g.cout * k];
        for part in per_sample {
            for (a, v) in acc.iter_mut().zip(part) {
                *a = *a + v;
            }
        }
        acc
    });

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let off = (n * g.cout + co) * p;
                *d = *d + gy[off..off + p].iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads { dx, dw, db }
}

/// Neumaier-compensated sum. Loss values add up many terms into a large
/// total, and plain accumulation leaves rounding noise there that swamps
/// small finite differences.
pub fn compensated_sum<T: Element>(values: impl IntoIterator<Item = T>) -> T {
    let (mut sum, mut carry) = (T::zero(), T::zero());
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry = carry + ((sum - t) + v);
        } else {
            carry = carry + ((v - t) + sum);
        }
        sum = t;
    }
    sum + carry
}

pub fn pixel_shuffle_forward<T: Element>(x: &[T], shape: Shape, r: usize) -> Vec<T> {
    let [n, cin, h, w] = shape;
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src_c = ci * r * r + (oy % r) * r + (ox % r);
                    let src = ((ni * cin + src_c) * h + oy / r) * w + ox / r;
                    out[((ni * c + ci) * oh + oy) * ow + ox] = x[src];
                }
            }
        }
    }
    out
}

/// Inverse permutation of [`pixel_shuffle_forward`]; `shape` is the
/// shuffled-input shape `[n, c*r*r, h, w]`.
pub fn pixel_unshuffle<T: Element>(y: &[T], shape: Shape, r: usize) -> Vec<T> {
    let [n, cin, h, w] = shape;
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); y.len()];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src_c = ci * r * r + (oy % r) * r + (ox % r);
                    let dst = ((ni * cin + src_c) * h + oy / r) * w + ox / r;
                    out[dst] = y[((ni * c + ci) * oh + oy) * ow + ox];
                }
            }
        }
    }
    out
}

/// Softmax over contiguous groups of `group` elements with max subtraction.
pub fn softmax_groups<T: Element>(x: &[T], group: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(group).zip(out.chunks_mut(group)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

pub fn softmax_groups_backward<T: Element>(y: &[T], gy: &[T], group: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ((ys, gs), dst) in y.chunks(group).zip(gy.chunks(group)).zip(gx.chunks_mut(group)) {
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(ys).zip(gs) {
            *d = yv * (gv - dot);
        }
    }
    gx
}

/// Normalized values and per-row inverse standard deviation.
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm_forward<T: Element>(
    x: &[T],
    rows: usize,
    c: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let cf = T::from_usize(c).unwrap();
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for i in 0..c {
            let xh = (row[i] - mean) * is;
            xhat[r * c + i] = xh;
            out[r * c + i] = xh * gamma[i] + beta[i];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Element>(
    cache: &LayerNormCache<T>,
    gamma: &[T],
    gy: &[T],
    rows: usize,
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cf = T::from_usize(c).unwrap();
    let mut dx = vec![T::zero(); gy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for r in 0..rows {
        let xh = &cache.xhat[r * c..(r + 1) * c];
        let g = &gy[r * c..(r + 1) * c];
        let dxhat: Vec<T> = (0..c).map(|i| g[i] * gamma[i]).collect();
        let mean_d = dxhat.iter().copied().sum::<T>() / cf;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / cf;
        for i in 0..c {
            dx[r * c + i] = cache.inv_std[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
            dgamma[i] = dgamma[i] + g[i] * xh[i];
            dbeta[i] = dbeta[i] + g[i];
        }
    }
    (dx, dgamma, dbeta)
}

/// Batched product of `[batch, m, k]` and `[batch, k, p]`, each matrix
/// optionally read transposed.
#[allow(clippy::too_many_arguments)]
pub fn batched_matmul<T: Element>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    a_t: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    b_t: bool,
    batch: usize,
) -> Vec<T> {
    let m = if a_t { a_cols } else { a_rows };
    let p = if b_t { b_rows } else { b_cols };
    let mut out = vec![T::zero(); batch * m * p];
    let (sa, sb) = (a_rows * a_cols, b_rows * b_cols);
    out.par_chunks_mut((m * p).max(1))
        .enumerate()
        .for_each(|(i, dst)| {
            let mut am = MatRef::new(&a[i * sa..(i + 1) * sa], a_rows, a_cols);
            if a_t {
                am = am.t();
            }
            let mut bm = MatRef::new(&b[i * sb..(i + 1) * sb], b_rows, b_cols);
            if b_t {
                bm = bm.t();
            }
            gemm(am, bm, T::zero(), dst);
        });
    out
}
