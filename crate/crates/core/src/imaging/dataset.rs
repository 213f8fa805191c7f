use std::path::{Path, PathBuf};

use super::degrade::{degrade_all, DegradationSpec};
use super::io::load_png;
use super::ImageU8;
use crate::error::{FpanError, Result};

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| FpanError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| FpanError::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// An HR image with its LR counterpart.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub name: String,
    pub hr: ImageU8,
    pub lr: ImageU8,
}

/// A directory of HR PNGs, optionally with a sibling directory of
/// pre-generated LR PNGs under the same names.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub hr: Vec<ImageU8>,
    pub lr: Option<Vec<ImageU8>>,
}

impl Dataset {
    pub fn load(hr_dir: impl AsRef<Path>, lr_dir: Option<&Path>) -> Result<Self> {
        let paths = list_pngs(hr_dir.as_ref())?;
        let names: Vec<String> = paths
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect();
        let hr = paths.iter().map(load_png).collect::<Result<Vec<_>>>()?;
        let lr = match lr_dir {
            Some(d) => Some(names.iter().map(|n| load_png(d.join(n))).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        Ok(Dataset { names, hr, lr })
    }

    pub fn from_images(names: Vec<String>, hr: Vec<ImageU8>) -> Self {
        Dataset { names, hr, lr: None }
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    /// HR images cropped to a multiple of the scale, paired with LR images
    /// from disk or synthesized by `spec`.
    pub fn pairs(&self, spec: &DegradationSpec) -> Result<Vec<ImagePair>> {
        let s = spec.scale;
        let hrs: Vec<ImageU8> = self.hr.iter().map(|h| h.crop_to_multiple(s)).collect();
        let lrs = match &self.lr {
            Some(lr) => {
                for (i, (l, h)) in lr.iter().zip(&hrs).enumerate() {
                    if l.width * s != h.width || l.height * s != h.height {
                        return Err(FpanError::usage(format!(
                            "LR image {} is {}x{}, expected {}x{}",
                            self.names[i],
                            l.width,
                            l.height,
                            h.width / s,
                            h.height / s
                        )));
                    }
                }
                lr.clone()
            }
            None => degrade_all(&hrs, spec)?,
        };
        Ok(self
            .names
            .iter()
            .zip(hrs)
            .zip(lrs)
            .map(|((name, hr), lr)| ImagePair {
                name: name.clone(),
                hr,
                lr,
            })
            .collect())
    }
}
