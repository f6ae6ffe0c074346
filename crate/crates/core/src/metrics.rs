//! Kernel PSNR and luma PSNR/SSIM.

use alloc::vec;
use alloc::vec::Vec;

use crate::degrade::Image;
use crate::kernel::Kernel;
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("kernel sides differ: {0} vs {1}")]
    KernelSide(usize, usize),
    #[error("image extents differ")]
    Extents,
    #[error("border crop of {border} leaves nothing of a {height}x{width} image")]
    Crop { border: usize, height: usize, width: usize },
    #[error("image must be at least 11x11 for SSIM, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("luma conversion needs 1 or 3 channels, got {0}")]
    Channels(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub kernel_psnr: f64,
    pub image_psnr: Option<f64>,
    pub image_ssim: Option<f64>,
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * math::log10(1.0 / mse)
    }
}

/// `10·log₁₀(1 / MSE)` over all grid entries; identical kernels give `+∞`.
pub fn kernel_psnr(estimate: &Kernel, truth: &Kernel) -> Result<f64, MetricError> {
    if estimate.side() != truth.side() {
        return Err(MetricError::KernelSide(estimate.side(), truth.side()));
    }
    let n = estimate.weights().len() as f64;
    let mse = estimate
        .weights()
        .iter()
        .zip(truth.weights())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

/// BT.601 luma on `[0, 1]` inputs: `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`.
/// Single-channel images pass through unchanged.
pub fn to_luma(x: &Image) -> Result<Image, MetricError> {
    match x.channels() {
        1 => Ok(x.clone()),
        3 => {
            let (r, g, b) = (x.plane(0), x.plane(1), x.plane(2));
            let y = r
                .iter()
                .zip(g)
                .zip(b)
                .map(|((r, g), b)| (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)
                .collect();
            Ok(Image::new(x.height(), x.width(), 1, y).expect("extents preserved"))
        }
        c => Err(MetricError::Channels(c)),
    }
}

/// PSNR (peak 1) on luma after cropping `border` pixels from every side.
pub fn image_psnr(a: &Image, b: &Image, border: usize) -> Result<f64, MetricError> {
    if !a.same_extents(b) {
        return Err(MetricError::Extents);
    }
    let (h, w) = (a.height(), a.width());
    if 2 * border >= h || 2 * border >= w {
        return Err(MetricError::Crop {
            border,
            height: h,
            width: w,
        });
    }
    let (ya, yb) = (to_luma(a)?, to_luma(b)?);
    let mut sum = 0.0;
    for i in border..h - border {
        for j in border..w - border {
            let d = ya.get(0, i, j) - yb.get(0, i, j);
            sum += d * d;
        }
    }
    let n = ((h - 2 * border) * (w - 2 * border)) as f64;
    Ok(psnr_from_mse(sum / n))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = math::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Valid-mode separable Gaussian filter of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, k)| k * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, k)| k * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma with an 11×11 Gaussian window (σ = 1.5),
/// averaged over all window positions fully inside the image.
pub fn image_ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    if !a.same_extents(b) {
        return Err(MetricError::Extents);
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall(h, w));
    }
    let (ya, yb) = (to_luma(a)?, to_luma(b)?);
    let (x, y) = (ya.data(), yb.data());
    let taps = gaussian_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let e_xx = filter_valid(&xx, h, w, &taps);
    let e_yy = filter_valid(&yy, h, w, &taps);
    let e_xy = filter_valid(&xy, h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mu_x.len() as f64)
}
