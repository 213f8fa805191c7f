//! Y-channel PSNR/SSIM and parameter/FLOP accounting.

use std::fmt::Write as _;

use crate::error::{FpanError, Result};
use crate::imaging::{self_ensemble_sr, y_plane, ImagePair, ImageU8, Plane, Upscaler};
use crate::model::Fpan;
use crate::nn::ConvLayer;
use crate::tensor::Element;

pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_size(a: &ImageU8, b: &ImageU8) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(FpanError::usage(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// PSNR between two planes on the 0..255 scale; `f64::INFINITY` when equal.
pub fn psnr_planes(a: &Plane, b: &Plane) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(FpanError::usage("plane sizes differ"));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

/// PSNR on luma after shaving `scale` pixels from every border.
pub fn psnr_y(sr: &ImageU8, hr: &ImageU8, scale: usize) -> Result<f64> {
    check_same_size(sr, hr)?;
    psnr_planes(&y_plane(sr).shave(scale)?, &y_plane(hr).shave(scale)?)
}

/// 1-D normalized Gaussian window.
fn window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Gaussian-weighted sums over every fully contained window.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM between two planes.
pub fn ssim_planes(a: &Plane, b: &Plane) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(FpanError::usage("plane sizes differ"));
    }
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(FpanError::usage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let k = window();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a.data, w, h, &k);
    let mu_b = filter_valid(&b.data, w, h, &k);
    let aa = filter_valid(&prod(|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(|x, y| x * y), w, h, &k);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM on luma after shaving `scale` pixels from every border.
pub fn ssim_y(sr: &ImageU8, hr: &ImageU8, scale: usize) -> Result<f64> {
    check_same_size(sr, hr)?;
    let (a, b) = (y_plane(sr), y_plane(hr));
    if a.width < 2 * scale + SSIM_WINDOW || a.height < 2 * scale + SSIM_WINDOW {
        return Err(FpanError::usage(format!(
            "{}x{} image too small for SSIM after a {scale}-pixel shave",
            a.width, a.height
        )));
    }
    ssim_planes(&a.shave(scale)?, &b.shave(scale)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostEntry {
    pub layer: String,
    pub params: usize,
    pub flops: u64,
}

/// Parameter and FLOP breakdown. FLOPs count a multiply-add as two operations.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    /// LR input size the FLOPs refer to, `(height, width)`.
    pub input: (usize, usize),
    pub scale: usize,
}

impl CostReport {
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,flops\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.layer, e.params, e.flops);
        }
        let _ = writeln!(s, "total,{},{}", self.total_params(), self.total_flops());
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.layer.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "x{} at LR {}x{}\n{:<width$}  {:>12}  {:>16}\n",
            self.scale, self.input.1, self.input.0, "layer", "params", "flops"
        );
        for e in &self.entries {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", e.layer, e.params, e.flops);
        }
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "total", self.total_params(), self.total_flops());
        s
    }
}

fn push_conv(entries: &mut Vec<CostEntry>, l: &ConvLayer, h: usize, w: usize) -> (usize, usize) {
    entries.push(CostEntry {
        layer: l.name.clone(),
        params: l.param_count(),
        flops: l.flops(h, w),
    });
    l.out_size(h, w)
}

/// Per-layer parameters and FLOPs for an LR input of `lr_h x lr_w`.
pub fn cost_at<T: Element>(model: &Fpan<T>, lr_h: usize, lr_w: usize) -> CostReport {
    let mut entries = Vec::new();
    let e = &mut entries;
    let (h, w) = (lr_h, lr_w);
    push_conv(e, &model.head, h, w);
    for (g, block) in model.blocks.iter().enumerate() {
        for l in block.feedback.layers() {
            push_conv(e, l, h, w);
        }
        if let Some(a) = &block.attention {
            for level in &a.levels {
                let (mut hh, mut ww) = (h, w);
                for d in &level.downsamplers {
                    (hh, ww) = push_conv(e, d, hh, ww);
                }
                push_conv(e, &level.key, hh, ww);
                // weighted sum over positions: one multiply-add per channel and position
                e.push(CostEntry {
                    layer: format!("blocks.{g}.attn.pool{}", level.scale),
                    params: 0,
                    flops: 2 * (a.channels * hh * ww) as u64,
                });
            }
            push_conv(e, &a.transform.squeeze, 1, 1);
            e.push(CostEntry {
                layer: format!("blocks.{g}.attn.ln"),
                params: 2 * a.transform.squeeze.cout,
                flops: 0,
            });
            push_conv(e, &a.transform.expand, 1, 1);
        }
    }
    push_conv(e, &model.fusion_merge, h, w);
    push_conv(e, &model.fusion_conv, h, w);
    let (mut hh, mut ww) = (h, w);
    for (l, r) in &model.upsample {
        push_conv(e, l, hh, ww);
        (hh, ww) = (hh * r, ww * r);
    }
    push_conv(e, &model.tail, hh, ww);
    CostReport {
        entries,
        input: (lr_h, lr_w),
        scale: model.config.scale,
    }
}

/// Parameter breakdown (FLOPs at a nominal 1x1 input are not meaningful and are zeroed).
pub fn count_params<T: Element>(model: &Fpan<T>) -> CostReport {
    let mut r = cost_at(model, 1, 1);
    for e in &mut r.entries {
        e.flops = 0;
    }
    r.input = (0, 0);
    r
}

/// Costs for an HR output of `hr_h x hr_w`, i.e. an LR input `hr / scale`.
pub fn count_flops<T: Element>(model: &Fpan<T>, hr_h: usize, hr_w: usize) -> CostReport {
    let s = model.config.scale;
    cost_at(model, hr_h / s, hr_w / s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image metrics on the Y channel with an `s`-pixel shave.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub scale: usize,
    pub shave: usize,
}

impl EvalReport {
    pub fn average(&self) -> (f64, f64) {
        let n = self.rows.len() as f64;
        (
            self.rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            self.rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.psnr, r.ssim);
        }
        let (p, q) = self.average();
        let _ = writeln!(s, "average,{p},{q}");
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("x{} Y channel, shave {}\n", self.scale, self.shave);
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>9.4} dB  {:.6}", r.name, r.psnr, r.ssim);
        }
        let (p, q) = self.average();
        let _ = writeln!(s, "{:<24} {:>9.4} dB  {:.6}", "average", p, q);
        s
    }
}

/// Super-resolve every LR image and score it against its HR image.
pub fn evaluate(model: &dyn Upscaler, pairs: &[ImagePair], ensemble: bool) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(FpanError::data("no images to evaluate"));
    }
    let s = model.scale();
    let rows = pairs
        .iter()
        .map(|p| {
            let sr = if ensemble {
                self_ensemble_sr(model, &p.lr)?
            } else {
                model.upscale(&p.lr)?
            };
            Ok(EvalRow {
                name: p.name.clone(),
                psnr: psnr_y(&sr, &p.hr, s)?,
                ssim: ssim_y(&sr, &p.hr, s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        rows,
        scale: s,
        shave: s,
    })
}
