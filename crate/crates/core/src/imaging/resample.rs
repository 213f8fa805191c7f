//! Separable resampling with edge clamping: Keys bicubic (a = -0.5,
//! antialiased when shrinking) and normalized Gaussian blur.

use super::{ImageU8, Plane};
use crate::error::{FpanError, Result};

const CUBIC_A: f64 = -0.5;

pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Source indices and normalized weights for each output sample along one axis.
struct Taps {
    width: usize,
    index: Vec<usize>,
    weight: Vec<f64>,
}

fn bicubic_taps(in_len: usize, out_len: usize) -> Taps {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, support) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let width = support.ceil() as usize + 2;
    let mut index = Vec::with_capacity(out_len * width);
    let mut weight = Vec::with_capacity(out_len * width);
    for i in 0..out_len {
        // Pixel centres map as in MATLAB imresize (1-based coordinates).
        let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - support / 2.0).floor() as i64;
        let start = weight.len();
        for j in 0..width as i64 {
            let src = left + j;
            weight.push(kscale * cubic(kscale * (u - src as f64)));
            index.push((src - 1).clamp(0, in_len as i64 - 1) as usize);
        }
        let sum: f64 = weight[start..].iter().sum();
        for w in &mut weight[start..] {
            *w /= sum;
        }
    }
    Taps { width, index, weight }
}

fn gaussian_taps(len: usize, kernel: &[f64]) -> Taps {
    let width = kernel.len();
    let half = (width / 2) as i64;
    let mut index = Vec::with_capacity(len * width);
    let mut weight = Vec::with_capacity(len * width);
    for i in 0..len as i64 {
        for (j, &k) in kernel.iter().enumerate() {
            index.push((i + j as i64 - half).clamp(0, len as i64 - 1) as usize);
            weight.push(k);
        }
    }
    Taps { width, index, weight }
}

fn apply_rows(p: &Plane, taps: &Taps, out_w: usize) -> Plane {
    let mut data = Vec::with_capacity(out_w * p.height);
    for y in 0..p.height {
        let row = &p.data[y * p.width..(y + 1) * p.width];
        for x in 0..out_w {
            let r = x * taps.width..(x + 1) * taps.width;
            data.push(taps.index[r.clone()].iter().zip(&taps.weight[r]).map(|(&i, &w)| w * row[i]).sum());
        }
    }
    Plane {
        width: out_w,
        height: p.height,
        data,
    }
}

fn apply_cols(p: &Plane, taps: &Taps, out_h: usize) -> Plane {
    let mut data = vec![0.0; p.width * out_h];
    for y in 0..out_h {
        let r = y * taps.width..(y + 1) * taps.width;
        let out = &mut data[y * p.width..(y + 1) * p.width];
        for (&i, &w) in taps.index[r.clone()].iter().zip(&taps.weight[r]) {
            let src = &p.data[i * p.width..(i + 1) * p.width];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    Plane {
        width: p.width,
        height: out_h,
        data,
    }
}

/// Resize a plane to `out_w x out_h`. The scale factor on each axis is
/// `out / in`; shrinking widens the kernel by `1 / scale`.
pub fn bicubic_resize(p: &Plane, out_w: usize, out_h: usize) -> Result<Plane> {
    if out_w == 0 || out_h == 0 || p.width == 0 || p.height == 0 {
        return Err(FpanError::usage(format!(
            "bicubic resize {}x{} -> {out_w}x{out_h}: empty dimension",
            p.width, p.height
        )));
    }
    // Resize the dimension that shrinks most first, as imresize does.
    let sx = out_w as f64 / p.width as f64;
    let sy = out_h as f64 / p.height as f64;
    let rows = |q: &Plane| apply_rows(q, &bicubic_taps(q.width, out_w), out_w);
    let cols = |q: &Plane| apply_cols(q, &bicubic_taps(q.height, out_h), out_h);
    Ok(if sx <= sy { cols(&rows(p)) } else { rows(&cols(p)) })
}

/// Output size for a rational factor `num / den`, rounded up.
pub fn scaled_size(len: usize, num: usize, den: usize) -> usize {
    (len * num).div_ceil(den)
}

/// Bicubic resize of each RGB channel, then round and clamp.
pub fn resize_image(img: &ImageU8, out_w: usize, out_h: usize) -> Result<ImageU8> {
    let planes = [0, 1, 2].map(|c| bicubic_resize(&img.channel(c), out_w, out_h));
    let [r, g, b] = planes;
    ImageU8::from_planes(&[r?, g?, b?])
}

/// Normalized 1-D Gaussian of odd length.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(FpanError::usage(format!("gaussian kernel size {size} must be odd")));
    }
    if sigma <= 0.0 {
        return Err(FpanError::usage(format!("gaussian sigma {sigma} must be positive")));
    }
    let half = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    Ok(k.into_iter().map(|v| v / s).collect())
}

/// Separable Gaussian blur with replicated edges.
pub fn gaussian_blur(p: &Plane, size: usize, sigma: f64) -> Result<Plane> {
    let k = gaussian_kernel(size, sigma)?;
    let rows = apply_rows(p, &gaussian_taps(p.width, &k), p.width);
    Ok(apply_cols(&rows, &gaussian_taps(p.height, &k), p.height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn factor_one_is_identity() {
        let p = Plane::from_fn(9, 6, |x, y| (x * 7 + y * 13) as f64 % 11.0);
        let q = bicubic_resize(&p, 9, 6).unwrap();
        for (a, b) in p.data.iter().zip(&q.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn downscaled_ramp_stays_a_ramp() {
        let p = Plane::from_fn(32, 4, |x, _| 3.0 * x as f64 + 1.0);
        let q = bicubic_resize(&p, 16, 2).unwrap();
        // Output pixel i covers source pixels 2i and 2i+1, centre 2i + 0.5.
        // Clamping only disturbs taps within the widened support of an edge.
        for y in 0..2 {
            for x in 2..14 {
                let want = 3.0 * (2.0 * x as f64 + 0.5) + 1.0;
                assert!((q.at(x, y) - want).abs() < 1e-9, "x {x}: {} vs {want}", q.at(x, y));
            }
        }
    }

    #[test]
    fn upscaled_ramp_stays_a_ramp() {
        let p = Plane::from_fn(10, 3, |x, _| x as f64);
        let q = bicubic_resize(&p, 30, 9).unwrap();
        for x in 6..24 {
            let want = (x as f64 + 0.5) / 3.0 - 0.5;
            assert!((q.at(x, 4) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_output_rejected() {
        let p = Plane::filled(4, 4, 1.0);
        assert!(matches!(bicubic_resize(&p, 0, 2), Err(FpanError::Usage(_))));
    }

    #[test]
    fn gaussian_kernel_sums_to_one_and_rejects_even_sizes() {
        let k = gaussian_kernel(7, 1.6).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(k[3] > k[2] && k[2] > k[1] && (k[0] - k[6]).abs() < 1e-18);
        assert!(matches!(gaussian_kernel(6, 1.6), Err(FpanError::Usage(_))));
    }

    #[test]
    fn impulse_gives_sampled_gaussian() {
        let mut p = Plane::filled(15, 15, 0.0);
        p.data[7 * 15 + 7] = 1.0;
        let q = gaussian_blur(&p, 7, 1.6).unwrap();
        let z: f64 = (-3..=3).map(|d: i32| (-(d * d) as f64 / (2.0 * 1.6 * 1.6)).exp()).sum();
        for y in 0..15 {
            for x in 0..15 {
                let (dx, dy) = (x as f64 - 7.0, y as f64 - 7.0);
                let want = if dx.abs() <= 3.0 && dy.abs() <= 3.0 {
                    (-(dx * dx + dy * dy) / (2.0 * 1.6 * 1.6)).exp() / (z * z)
                } else {
                    0.0
                };
                assert!((q.at(x, y) - want).abs() < 1e-15);
            }
        }
        let peak = q.data.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(peak, q.at(7, 7));
    }

    #[test]
    fn separable_blur_matches_full_2d_convolution() {
        let p = Plane::from_fn(11, 9, |x, y| ((x * 31 + y * 17) % 23) as f64);
        let q = gaussian_blur(&p, 5, 1.1).unwrap();
        // Independent 2-D kernel with clamped reads.
        let half = 2i64;
        for y in 0..9i64 {
            for x in 0..11i64 {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let w = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.1 * 1.1)).exp();
                        let sx = (x + dx).clamp(0, 10) as usize;
                        let sy = (y + dy).clamp(0, 8) as usize;
                        acc += w * p.at(sx, sy);
                        norm += w;
                    }
                }
                assert!((q.at(x as usize, y as usize) - acc / norm).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn constants_are_preserved(v in 0.0f64..255.0, w in 3usize..20, h in 3usize..20, ow in 1usize..40, oh in 1usize..40) {
            let p = Plane::filled(w, h, v);
            for q in [bicubic_resize(&p, ow, oh).unwrap(), gaussian_blur(&p, 7, 1.6).unwrap()] {
                prop_assert!(q.data.iter().all(|x| (x - v).abs() <= 1e-10));
            }
        }
    }
}
