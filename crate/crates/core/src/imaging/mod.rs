//! Images at the file boundary: PNG I/O, colour conversion, resampling,
//! degradations, dihedral transforms and self-ensemble inference.

pub mod color;
pub mod dataset;
pub mod degrade;
pub mod ensemble;
pub mod io;
pub mod resample;

pub use color::{rgb_to_ycbcr, y_plane, ycbcr_to_rgb};
pub use dataset::{list_pngs, Dataset, ImagePair};
pub use degrade::{degrade, degrade_all, DegradationKind, DegradationSpec};
pub use ensemble::{self_ensemble_sr, Bicubic, Identity, Upscaler};
pub use io::{load_png, save_png};
pub use resample::{bicubic_resize, gaussian_blur, gaussian_kernel, resize_image};

use crate::error::{FpanError, Result};
use crate::tensor::{Element, Tensor4};

/// 8-bit RGB image, row-major, interleaved, top-left origin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(FpanError::dim(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(ImageU8 { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        ImageU8 { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        ImageU8 { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One channel as a float plane.
    pub fn channel(&self, c: usize) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect(),
        }
    }

    /// Interleave three planes, rounding and clamping to `[0, 255]`.
    pub fn from_planes(planes: &[Plane; 3]) -> Result<Self> {
        let (w, h) = (planes[0].width, planes[0].height);
        if planes.iter().any(|p| p.width != w || p.height != h) {
            return Err(FpanError::dim("colour planes differ in size"));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            for p in planes {
                data.push(quantize(p.data[i]));
            }
        }
        Ok(ImageU8 { width: w, height: h, data })
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(FpanError::usage(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(ImageU8 { width: w, height: h, data })
    }

    /// Centre crop so both dimensions are multiples of `s`.
    pub fn crop_to_multiple(&self, s: usize) -> Self {
        let (w, h) = (self.width / s * s, self.height / s * s);
        self.crop((self.width - w) / 2, (self.height - h) / 2, w, h)
            .expect("crop lies inside the image")
    }

    /// Apply dihedral transform `id` (see [`dihedral_coords`]).
    pub fn dihedral(&self, id: u8) -> Self {
        let (w, h, data) = dihedral_apply(self.width, self.height, id, |i| {
            [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
        });
        ImageU8 {
            width: w,
            height: h,
            data: data.into_iter().flatten().collect(),
        }
    }
}

/// Single-channel float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(FpanError::dim(format!(
                "{width}x{height} plane needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Plane {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane { width, height, data }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Drop `border` pixels on every side.
    pub fn shave(&self, border: usize) -> Result<Self> {
        if 2 * border >= self.width || 2 * border >= self.height {
            return Err(FpanError::usage(format!(
                "cannot shave {border} pixels from a {}x{} plane",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width - 2 * border, self.height - 2 * border);
        Ok(Plane::from_fn(w, h, |x, y| self.at(x + border, y + border)))
    }

    pub fn dihedral(&self, id: u8) -> Self {
        let (width, height, data) = dihedral_apply(self.width, self.height, id, |i| self.data[i]);
        Plane { width, height, data }
    }
}

pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Where source pixel `(x, y)` of a `w x h` image lands under transform `id`,
/// and the transformed size. `id % 4` counts 90° counter-clockwise turns;
/// `id >= 4` mirrors horizontally before turning. Every `id` with a mirror
/// is its own inverse; a pure turn `k` is undone by `(4 - k) % 4`.
pub fn dihedral_coords(x: usize, y: usize, w: usize, h: usize, id: u8) -> (usize, usize, usize, usize) {
    let (mut x, mut y, mut w, mut h) = (x, y, w, h);
    if id >= 4 {
        x = w - 1 - x;
    }
    for _ in 0..id % 4 {
        // counter-clockwise: column x becomes row (w - 1 - x)
        (x, y, w, h) = (y, w - 1 - x, h, w);
    }
    (x, y, w, h)
}

pub fn dihedral_inverse(id: u8) -> u8 {
    if id >= 4 {
        id
    } else {
        (4 - id) % 4
    }
}

fn dihedral_apply<V: Copy + Default>(
    w: usize,
    h: usize,
    id: u8,
    get: impl Fn(usize) -> V,
) -> (usize, usize, Vec<V>) {
    assert!(id < 8, "dihedral id {id} out of range");
    let (_, _, ow, oh) = dihedral_coords(0, 0, w, h, id);
    let mut out = vec![V::default(); w * h];
    for y in 0..h {
        for x in 0..w {
            let (tx, ty, _, _) = dihedral_coords(x, y, w, h, id);
            out[ty * ow + tx] = get(y * w + x);
        }
    }
    (ow, oh, out)
}

/// `[1, 3, h, w]` tensor with samples scaled to `[0, 1]`.
pub fn image_to_tensor<T: Element>(img: &ImageU8) -> Tensor4<T> {
    Tensor4::from_fn([1, 3, img.height, img.width], |[_, c, y, x]| {
        T::from_f64_lossy(img.data[(y * img.width + x) * 3 + c] as f64 / 255.0)
    })
}

/// Stack equally sized images into one `[n, 3, h, w]` batch.
pub fn images_to_tensor<T: Element>(imgs: &[&ImageU8]) -> Result<Tensor4<T>> {
    let first = imgs.first().ok_or_else(|| FpanError::usage("empty image batch"))?;
    let (w, h) = (first.width, first.height);
    if imgs.iter().any(|i| i.width != w || i.height != h) {
        return Err(FpanError::dim("images in a batch differ in size"));
    }
    Ok(Tensor4::from_fn([imgs.len(), 3, h, w], |[n, c, y, x]| {
        T::from_f64_lossy(imgs[n].data[(y * w + x) * 3 + c] as f64 / 255.0)
    }))
}

/// Sample `n` of a `[N, 3, h, w]` tensor in `[0, 1]` as an 8-bit image.
pub fn tensor_to_image<T: Element>(t: &Tensor4<T>, n: usize) -> Result<ImageU8> {
    let [nn, c, h, w] = t.shape();
    if c != 3 || n >= nn {
        return Err(FpanError::dim(format!("cannot read image {n} from tensor {:?}", t.shape())));
    }
    Ok(ImageU8::from_fn(w, h, |x, y| {
        std::array::from_fn(|ch| quantize(t.at([n, ch, y, x]).to_f64_lossy() * 255.0))
    }))
}

/// Apply a dihedral transform to every `(n, c)` plane of a tensor.
pub fn dihedral_tensor<T: Element>(t: &Tensor4<T>, id: u8) -> Tensor4<T> {
    let [n, c, h, w] = t.shape();
    let (_, _, ow, oh) = dihedral_coords(0, 0, w, h, id);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &t.data()[plane * h * w..(plane + 1) * h * w];
        let (_, _, d) = dihedral_apply(w, h, id, |i| src[i]);
        out.data_mut()[plane * h * w..(plane + 1) * h * w].copy_from_slice(&d);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageU8 {
        ImageU8::from_fn(5, 3, |x, y| [x as u8, y as u8, (x * 10 + y) as u8])
    }

    #[test]
    fn dihedral_identity_and_inverse() {
        let img = sample();
        assert_eq!(img.dihedral(0), img);
        for id in 0..8 {
            let t = img.dihedral(id);
            if id % 2 == 1 {
                assert_eq!((t.width, t.height), (3, 5));
            }
            assert_eq!(t.dihedral(dihedral_inverse(id)), img, "id {id}");
        }
    }

    #[test]
    fn dihedral_transforms_are_distinct() {
        let img = ImageU8::from_fn(4, 4, |x, y| [(x + 4 * y) as u8, 0, 0]);
        let all: Vec<ImageU8> = (0..8).map(|id| img.dihedral(id)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i], all[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let img = ImageU8::from_fn(2, 1, |x, _| [x as u8, 0, 0]);
        let t = img.dihedral(1);
        // [a b] turned left puts b on top.
        assert_eq!((t.width, t.height), (1, 2));
        assert_eq!(t.pixel(0, 0)[0], 1);
        assert_eq!(t.pixel(0, 1)[0], 0);
    }

    #[test]
    fn tensor_dihedral_matches_image_dihedral() {
        let img = sample();
        for id in 0..8 {
            let t = dihedral_tensor(&image_to_tensor::<f64>(&img), id);
            assert_eq!(tensor_to_image(&t, 0).unwrap(), img.dihedral(id));
        }
    }

    #[test]
    fn crop_and_multiple() {
        let img = ImageU8::from_fn(7, 5, |x, y| [x as u8, y as u8, 0]);
        let c = img.crop_to_multiple(3);
        assert_eq!((c.width, c.height), (6, 3));
        assert_eq!(c.pixel(0, 0), [0, 1, 0]);
        assert!(img.crop(5, 0, 3, 1).is_err());
    }

    #[test]
    fn planes_round_trip() {
        let img = sample();
        let planes = [img.channel(0), img.channel(1), img.channel(2)];
        assert_eq!(ImageU8::from_planes(&planes).unwrap(), img);
    }

    #[test]
    fn shave_border() {
        let p = Plane::from_fn(6, 5, |x, y| (x + 10 * y) as f64);
        let s = p.shave(2).unwrap();
        assert_eq!((s.width, s.height), (2, 1));
        assert_eq!(s.data, vec![22.0, 23.0]);
        assert!(p.shave(3).is_err());
    }
}
