//! Direct-loop reference implementations. Slow and obvious on purpose: they
//! serve as oracles for the optimized kernels and share no code with them.

use crate::tensor::{Element, Tensor4};

/// Six nested loops over (n, cout, oy, ox, cin, ky, kx), cross-correlation
/// with zero padding.
pub fn conv2d_direct<T: Element>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Tensor4<T> {
    let [n, cin, h, w] = input.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    assert_eq!(cin, wcin);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor4::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(T::zero(), |bs| bs[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc = acc
                                    + input.at([b, ci, iy as usize, ix as usize])
                                        * weight.at([co, ci, ky, kx]);
                            }
                        }
                    }
                    out.set([b, co, oy, ox], acc);
                }
            }
        }
    }
    out
}

/// Triple-loop product of row-major `[m, k]` and `[k, p]`.
pub fn matmul_direct<T: Element>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        for j in 0..p {
            let mut acc = T::zero();
            for t in 0..k {
                acc = acc + a[i * k + t] * b[t * p + j];
            }
            out[i * p + j] = acc;
        }
    }
    out
}
