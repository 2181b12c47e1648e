//! Reference PSNR and SSIM, plus per-region (inside/outside mask) PSNR.
//!
//! SSIM follows the canonical settings: 11x11 Gaussian window with
//! sigma = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0, scored on luma
//! (0.299/0.587/0.114) by default with a per-channel-average alternative.

use std::fmt::Write as _;

use crate::img::{BinaryMask, ImagePlane};
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Global,
    Fg,
    Bg,
}

impl Region {
    pub fn name(&self) -> &'static str {
        match self {
            Region::Global => "global",
            Region::Fg => "fg",
            Region::Bg => "bg",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr_db: f64,
    /// SSIM is reported for the global region only.
    pub ssim: Option<f64>,
    pub region: Region,
    pub n_pixels: usize,
}

fn check_dims(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dims(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// 10*log10(peak^2 / MSE), +inf when the images are identical.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    check_dims(a, b)?;
    if peak <= 0.0 {
        return Err(Error::arg("peak must be positive"));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// How a multi-channel input is reduced before the SSIM score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SsimChannelMode {
    /// Convert to luma first (default).
    #[default]
    Luma,
    /// Score each channel separately and average.
    PerChannelAverage,
}

fn to_luma(img: &ImagePlane) -> ImagePlane {
    match img.channels {
        1 => img.clone(),
        3 => ImagePlane::from_fn(img.width, img.height, 1, |x, y, _| {
            0.299 * img.get(x, y, 0) + 0.587 * img.get(x, y, 1) + 0.114 * img.get(x, y, 2)
        }),
        c => panic!("luma conversion expects 1 or 3 channels, got {c}"),
    }
}

fn extract_channel(img: &ImagePlane, c: usize) -> ImagePlane {
    ImagePlane::from_fn(img.width, img.height, 1, |x, y, _| img.get(x, y, c))
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean local SSIM over valid window positions of a single-channel pair.
fn ssim_single(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1) * (SSIM_K1);
    let c2 = (SSIM_K2) * (SSIM_K2);
    let (w, h) = (a.width, a.height);
    let out_w = w - SSIM_WINDOW + 1;
    let out_h = h - SSIM_WINDOW + 1;

    // Separable Gaussian filtering of the five moment maps.
    let filter = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        // horizontal pass: (h, out_w)
        let mut tmp = vec![0.0f64; h * out_w];
        for y in 0..h {
            for x in 0..out_w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    acc += kv * f(x + i, y);
                }
                tmp[y * out_w + x] = acc;
            }
        }
        let mut out = vec![0.0f64; out_h * out_w];
        for y in 0..out_h {
            for x in 0..out_w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[(y + i) * out_w + x];
                }
                out[y * out_w + x] = acc;
            }
        }
        out
    };

    let av = |x: usize, y: usize| a.get(x, y, 0) as f64;
    let bv = |x: usize, y: usize| b.get(x, y, 0) as f64;
    let mu_a = filter(&av);
    let mu_b = filter(&bv);
    let aa = filter(&|x, y| av(x, y) * av(x, y));
    let bb = filter(&|x, y| bv(x, y) * bv(x, y));
    let ab = filter(&|x, y| av(x, y) * bv(x, y));

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = aa[i] - ma * ma;
        let var_b = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    ssim_with_mode(a, b, SsimChannelMode::Luma)
}

pub fn ssim_with_mode(a: &ImagePlane, b: &ImagePlane, mode: SsimChannelMode) -> Result<f64> {
    check_dims(a, b)?;
    match (mode, a.channels) {
        (_, 1) => ssim_single(a, b),
        (SsimChannelMode::Luma, 3) => ssim_single(&to_luma(a), &to_luma(b)),
        (SsimChannelMode::PerChannelAverage, c) => {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += ssim_single(&extract_channel(a, ch), &extract_channel(b, ch))?;
            }
            Ok(acc / c as f64)
        }
        (_, c) => Err(Error::arg(format!("ssim expects 1 or 3 channels, got {c}"))),
    }
}

/// PSNR restricted to masked (fg) and unmasked (bg) pixels, plus the global
/// report. Empty regions yield `None` rather than an error.
pub fn region_metrics(
    a: &ImagePlane,
    b: &ImagePlane,
    mask: &BinaryMask,
) -> Result<(Option<MetricReport>, Option<MetricReport>, MetricReport)> {
    check_dims(a, b)?;
    if mask.width != a.width || mask.height != a.height {
        return Err(Error::dims("mask dimensions differ from images"));
    }
    let mut sq = [0.0f64; 2]; // indexed by mask value
    let mut count = [0usize; 2];
    for y in 0..a.height {
        for x in 0..a.width {
            let m = mask.get(x, y) as usize;
            count[m] += 1;
            for c in 0..a.channels {
                let d = a.get(x, y, c) as f64 - b.get(x, y, c) as f64;
                sq[m] += d * d;
            }
        }
    }
    let ch = a.channels as f64;
    let report = |region: Region, sq: f64, n: usize| MetricReport {
        psnr_db: psnr_from_mse(sq / (n as f64 * ch), 1.0),
        ssim: None,
        region,
        n_pixels: n,
    };
    let fg = (count[1] > 0).then(|| report(Region::Fg, sq[1], count[1]));
    let bg = (count[0] > 0).then(|| report(Region::Bg, sq[0], count[0]));
    let total = count[0] + count[1];
    let mut global = report(Region::Global, sq[0] + sq[1], total);
    global.ssim = Some(ssim(a, b)?);
    Ok((fg, bg, global))
}

/// One evaluation CSV row. +inf is encoded as the literal string "inf".
pub fn csv_row(image_id: &str, report: &MetricReport) -> String {
    let fmt = |v: f64| {
        if v.is_infinite() {
            "inf".to_string()
        } else {
            format!("{v:.6}")
        }
    };
    let ssim = report.ssim.map(|s| fmt(s)).unwrap_or_default();
    format!(
        "{image_id},{},{},{},{}",
        report.region.name(),
        fmt(report.psnr_db),
        ssim,
        report.n_pixels
    )
}

pub const CSV_HEADER: &str = "image_id,region,psnr_db,ssim,n_pixels";

/// Assemble the full CSV report from per-image rows, appending aggregate
/// rows (arithmetic mean per region) at the end.
pub fn csv_report(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (id, report) in rows {
        writeln!(out, "{}", csv_row(id, report)).unwrap();
    }
    for region in [Region::Global, Region::Fg, Region::Bg] {
        let group: Vec<&MetricReport> = rows
            .iter()
            .filter(|(_, r)| r.region == region)
            .map(|(_, r)| r)
            .collect();
        if group.is_empty() {
            continue;
        }
        let mean_psnr = group.iter().map(|r| r.psnr_db).sum::<f64>() / group.len() as f64;
        let ssims: Vec<f64> = group.iter().filter_map(|r| r.ssim).collect();
        let mean_ssim =
            (!ssims.is_empty()).then(|| ssims.iter().sum::<f64>() / ssims.len() as f64);
        let n: usize = group.iter().map(|r| r.n_pixels).sum();
        let agg = MetricReport {
            psnr_db: mean_psnr,
            ssim: mean_ssim,
            region,
            n_pixels: n,
        };
        writeln!(out, "{}", csv_row("aggregate", &agg)).unwrap();
    }
    out
}
