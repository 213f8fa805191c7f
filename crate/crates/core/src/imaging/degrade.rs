//! Synthesis of LR inputs from HR images.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::resample::{gaussian_blur, resize_image};
use super::{quantize, ImageU8, Plane};
use crate::error::{FpanError, Result};

pub const BLUR_SIZE: usize = 7;
pub const BLUR_SIGMA: f64 = 1.6;
pub const NOISE_SIGMA: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradationKind {
    /// Bicubic downscaling.
    Bi,
    /// Gaussian blur, then keep every `s`-th pixel.
    Bd,
    /// Bicubic downscaling, then additive Gaussian noise.
    Dn,
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegradationKind::Bi => "BI",
            DegradationKind::Bd => "BD",
            DegradationKind::Dn => "DN",
        })
    }
}

impl FromStr for DegradationKind {
    type Err = FpanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BI" => Ok(DegradationKind::Bi),
            "BD" => Ok(DegradationKind::Bd),
            "DN" => Ok(DegradationKind::Dn),
            other => Err(FpanError::config(format!("unknown degradation '{other}' (expected BI, BD or DN)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub scale: usize,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn bicubic(scale: usize) -> Self {
        DegradationSpec {
            kind: DegradationKind::Bi,
            scale,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DegradationKind::Bi if (1..=4).contains(&self.scale) => Ok(()),
            DegradationKind::Bd | DegradationKind::Dn if self.scale == 3 => Ok(()),
            kind => Err(FpanError::config(format!(
                "{kind} degradation is not defined at x{}",
                self.scale
            ))),
        }
    }
}

/// Degrade an HR image whose dimensions are multiples of the scale.
pub fn degrade(hr: &ImageU8, spec: &DegradationSpec) -> Result<ImageU8> {
    spec.validate()?;
    let s = spec.scale;
    if !hr.width.is_multiple_of(s) || !hr.height.is_multiple_of(s) {
        return Err(FpanError::usage(format!(
            "{}x{} image is not a multiple of x{s}; crop it first",
            hr.width, hr.height
        )));
    }
    let (w, h) = (hr.width / s, hr.height / s);
    match spec.kind {
        DegradationKind::Bi => resize_image(hr, w, h),
        DegradationKind::Bd => {
            let blurred = [0, 1, 2].map(|c| gaussian_blur(&hr.channel(c), BLUR_SIZE, BLUR_SIGMA));
            let [r, g, b] = blurred;
            let planes = [r?, g?, b?];
            // The centre pixel of every s x s cell, as nearest-neighbour imresize picks.
            let off = (s - 1) / 2;
            let sub = planes.map(|p| Plane::from_fn(w, h, |x, y| p.at(x * s + off, y * s + off)));
            ImageU8::from_planes(&sub)
        }
        DegradationKind::Dn => {
            let mut lr = resize_image(hr, w, h)?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
            for v in &mut lr.data {
                *v = quantize(*v as f64 + noise.sample(&mut rng));
            }
            Ok(lr)
        }
    }
}

/// Degrade a list of images in parallel; image `i` uses seed `spec.seed ^ i`.
pub fn degrade_all(hrs: &[ImageU8], spec: &DegradationSpec) -> Result<Vec<ImageU8>> {
    hrs.par_iter()
        .enumerate()
        .map(|(i, hr)| {
            let spec = DegradationSpec {
                seed: spec.seed ^ i as u64,
                ..*spec
            };
            degrade(hr, &spec)
        })
        .collect()
}
