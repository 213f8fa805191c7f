//! ITU-R BT.601 studio-swing YCbCr, the convention of SR evaluation code.

use super::{ImageU8, Plane};
use crate::error::Result;

/// Rows map `(R, G, B) / 255` to `(Y, Cb, Cr)` offsets.
const FORWARD: [[f64; 3]; 3] = [
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
];
const OFFSET: [f64; 3] = [16.0, 128.0, 128.0];

fn inverse(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let cof = |r: usize, c: usize| {
        let (r0, r1) = ((r + 1) % 3, (r + 2) % 3);
        let (c0, c1) = ((c + 1) % 3, (c + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    std::array::from_fn(|i| std::array::from_fn(|j| cof(j, i) / det))
}

pub fn rgb_to_ycbcr_pixel(rgb: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| OFFSET[k] + (0..3).map(|c| FORWARD[k][c] * rgb[c] / 255.0).sum::<f64>())
}

pub fn ycbcr_to_rgb_pixel(ycc: [f64; 3]) -> [f64; 3] {
    let inv = inverse(FORWARD);
    std::array::from_fn(|c| 255.0 * (0..3).map(|k| inv[c][k] * (ycc[k] - OFFSET[k])).sum::<f64>())
}

/// Unquantized `[Y, Cb, Cr]` planes.
pub fn rgb_to_ycbcr(img: &ImageU8) -> [Plane; 3] {
    let n = img.width * img.height;
    let mut out: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
    for px in img.data.chunks_exact(3) {
        let ycc = rgb_to_ycbcr_pixel([px[0] as f64, px[1] as f64, px[2] as f64]);
        for k in 0..3 {
            out[k].push(ycc[k]);
        }
    }
    out.map(|data| Plane {
        width: img.width,
        height: img.height,
        data,
    })
}

pub fn ycbcr_to_rgb(planes: &[Plane; 3]) -> Result<ImageU8> {
    let n = planes[0].data.len();
    let mut rgb: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
    for i in 0..n {
        let px = ycbcr_to_rgb_pixel([planes[0].data[i], planes[1].data[i], planes[2].data[i]]);
        for c in 0..3 {
            rgb[c].push(px[c]);
        }
    }
    let (w, h) = (planes[0].width, planes[0].height);
    ImageU8::from_planes(&rgb.map(|data| Plane { width: w, height: h, data }))
}

/// Luma plane in `[16, 235]`, kept in floating point for metrics.
pub fn y_plane(img: &ImageU8) -> Plane {
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            OFFSET[0] + (FORWARD[0][0] * px[0] as f64 + FORWARD[0][1] * px[1] as f64 + FORWARD[0][2] * px[2] as f64) / 255.0
        })
        .collect();
    Plane {
        width: img.width,
        height: img.height,
        data,
    }
}
