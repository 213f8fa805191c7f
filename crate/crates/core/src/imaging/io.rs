use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};

use super::ImageU8;
use crate::error::{FpanError, Result};

/// Read an 8-bit PNG. Grey images are expanded to three equal channels and
/// alpha is dropped; 16-bit images are rejected.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageU8> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FpanError::io(path, e))?;
    let err = |message: String| FpanError::Image {
        path: path.to_path_buf(),
        message,
    };
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| err(e.to_string()))?;
    let rgb = match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => img.to_rgb8(),
        other => return Err(err(format!("unsupported pixel format {other:?} (8-bit only)"))),
    };
    let (w, h) = rgb.dimensions();
    ImageU8::new(w as usize, h as usize, rgb.into_raw())
}

pub fn save_png(img: &ImageU8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| FpanError::dim("image buffer does not match its size"))?;
    DynamicImage::ImageRgb8(buf)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => FpanError::io(path, io),
            other => FpanError::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageU8::from_fn(13, 7, |_, _| rng.random());
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        assert_eq!(load_png(&p).unwrap(), img);
    }

    #[test]
    fn grey_is_expanded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_fn(3, 2, |x, y| image::Luma([(x * 40 + y) as u8]))
            .save(&p)
            .unwrap();
        let img = load_png(&p).unwrap();
        assert_eq!(img.pixel(2, 1), [81, 81, 81]);
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        image::ImageBuffer::<image::Rgb<u16>, _>::from_pixel(2, 2, image::Rgb([1000u16, 2, 3]))
            .save(&p)
            .unwrap();
        assert!(matches!(load_png(&p), Err(FpanError::Image { .. })));
    }

    #[test]
    fn truncated_and_missing_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        save_png(&ImageU8::filled(16, 16, [1, 2, 3]), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        match load_png(&p) {
            Err(FpanError::Image { path, .. }) => assert_eq!(path, p),
            other => panic!("expected image error, got {other:?}"),
        }
        assert!(matches!(load_png(dir.path().join("missing.png")), Err(FpanError::Io { .. })));
    }
}
