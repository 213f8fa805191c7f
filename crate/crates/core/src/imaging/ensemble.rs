//! Upscaler abstraction and eight-way dihedral self-ensemble.

use super::resample::bicubic_resize;
use super::{dihedral_inverse, dihedral_tensor, image_to_tensor, tensor_to_image, ImageU8, Plane};
use crate::error::Result;
use crate::model::Fpan;
use crate::tensor::{Element, Tensor4};

/// Anything that maps a `[n, 3, h, w]` batch in `[0, 1]` to `[n, 3, s*h, s*w]`.
pub trait Upscaler {
    fn scale(&self) -> usize;

    fn upscale_tensor(&self, lr: &Tensor4<f32>) -> Result<Tensor4<f32>>;

    fn upscale(&self, lr: &ImageU8) -> Result<ImageU8> {
        tensor_to_image(&self.upscale_tensor(&image_to_tensor(lr))?, 0)
    }
}

impl<T: Element> Upscaler for Fpan<T> {
    fn scale(&self) -> usize {
        self.config.scale
    }

    fn upscale_tensor(&self, lr: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        Ok(self.super_resolve(&lr.cast::<T>())?.cast())
    }
}

/// Returns its input unchanged; scale 1.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Upscaler for Identity {
    fn scale(&self) -> usize {
        1
    }

    fn upscale_tensor(&self, lr: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        Ok(lr.clone())
    }
}

/// Plain bicubic interpolation, the usual baseline.
#[derive(Clone, Copy, Debug)]
pub struct Bicubic(pub usize);

impl Upscaler for Bicubic {
    fn scale(&self) -> usize {
        self.0
    }

    fn upscale_tensor(&self, lr: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let [n, c, h, w] = lr.shape();
        let (oh, ow) = (h * self.0, w * self.0);
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        for plane in 0..n * c {
            let src = Plane {
                width: w,
                height: h,
                data: lr.data()[plane * h * w..(plane + 1) * h * w].iter().map(|&v| v as f64).collect(),
            };
            let up = bicubic_resize(&src, ow, oh)?;
            for (o, v) in out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow].iter_mut().zip(&up.data) {
                *o = (*v).clamp(0.0, 1.0) as f32;
            }
        }
        Ok(out)
    }
}

/// Super-resolve all eight dihedral transforms of `lr`, undo each transform,
/// average, then clamp and quantize.
pub fn self_ensemble_sr(model: &dyn Upscaler, lr: &ImageU8) -> Result<ImageU8> {
    let x = image_to_tensor::<f32>(lr);
    let mut acc: Option<Tensor4<f64>> = None;
    for id in 0..8 {
        let y = model.upscale_tensor(&dihedral_tensor(&x, id))?;
        let y = dihedral_tensor(&y, dihedral_inverse(id)).cast::<f64>();
        match &mut acc {
            None => acc = Some(y),
            Some(a) => {
                for (s, v) in a.data_mut().iter_mut().zip(y.data()) {
                    *s += v;
                }
            }
        }
    }
    let mean = acc.expect("eight passes").map(|v| v / 8.0);
    tensor_to_image(&mean, 0)
}
