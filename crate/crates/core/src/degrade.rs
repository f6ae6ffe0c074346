//! Classical degradation `y = (x ⊗ k)↓s + n` and its adjoint.
//!
//! Blur is a true convolution (kernel flipped) over a replicate-padded image,
//! evaluated only at the retained samples `0, s, 2s, …` of each axis.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::kernel::Kernel;
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DegradeError {
    #[error("image {height}x{width} is smaller than the {side}x{side} kernel")]
    ImageTooSmall { height: usize, width: usize, side: usize },
    #[error("invalid image: {0}")]
    InvalidImage(&'static str),
    #[error("scale factor must be at least 1")]
    BadScale,
    #[error("noise level {0} outside [0, 1]")]
    BadNoiseLevel(f64),
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
}

/// Planar image with values nominally in `[0, 1]`.
///
/// Pixels are stored channel by channel, each channel row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, DegradeError> {
        if height == 0 || width == 0 {
            return Err(DegradeError::InvalidImage("extents must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(DegradeError::InvalidImage("channels must be 1 or 3"));
        }
        if data.len() != height * width * channels {
            return Err(DegradeError::InvalidImage("pixel count does not match extents"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DegradeError::InvalidImage("non-finite pixel"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, DegradeError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Grayscale image from `f(row, col)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, DegradeError> {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn same_extents(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Copy with every pixel clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Nearest-neighbor enlargement by an integer factor.
    pub fn upsample_nearest(&self, scale: usize) -> Image {
        let (h, w) = (self.height * scale, self.width * scale);
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            for i in 0..h {
                for j in 0..w {
                    data.push(self.get(c, i / scale, j / scale));
                }
            }
        }
        Image {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    /// Crops the window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image, DegradeError> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(DegradeError::Shape("crop window outside image"));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            for i in top..top + height {
                for j in left..left + width {
                    data.push(self.get(c, i, j));
                }
            }
        }
        Ok(Image {
            height,
            width,
            channels: self.channels,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationConfig {
    pub scale: u32,
    /// Noise standard deviation as a fraction of the maximum pixel value.
    pub noise_level: f64,
    pub seed: u64,
}

impl DegradationConfig {
    pub fn noiseless(scale: u32) -> Self {
        Self {
            scale,
            noise_level: 0.0,
            seed: 0,
        }
    }
}

/// Replicate-padded copy of one plane, padded by `r` on every side.
fn pad_replicate(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = Vec::with_capacity(ph * pw);
    for i in 0..ph {
        let si = i.saturating_sub(r).min(h - 1);
        for j in 0..pw {
            let sj = j.saturating_sub(r).min(w - 1);
            out.push(plane[si * w + sj]);
        }
    }
    out
}

fn check_inputs(x: &Image, side: usize, weights: usize, scale: usize) -> Result<(), DegradeError> {
    if scale == 0 {
        return Err(DegradeError::BadScale);
    }
    if side % 2 == 0 || weights != side * side {
        return Err(DegradeError::Shape("kernel weights do not form an odd square grid"));
    }
    if x.height < side || x.width < side {
        return Err(DegradeError::ImageTooSmall {
            height: x.height,
            width: x.width,
            side,
        });
    }
    Ok(())
}

/// LR extents `(⌈H/s⌉, ⌈W/s⌉)`.
pub fn lr_extents(height: usize, width: usize, scale: usize) -> (usize, usize) {
    (height.div_ceil(scale), width.div_ceil(scale))
}

/// Noiseless blur + stride-`scale` subsampling with raw kernel weights.
///
/// The weights need not be normalized or non-negative, which lets the
/// estimators feed unprocessed flow outputs through the operator.
pub fn blur_downsample(x: &Image, weights: &[f64], side: usize, scale: usize) -> Result<Image, DegradeError> {
    check_inputs(x, side, weights.len(), scale)?;
    let (h, w) = (x.height, x.width);
    let m = side / 2;
    let pw = w + 2 * m;
    let (oh, ow) = lr_extents(h, w, scale);
    let mut data = Vec::with_capacity(oh * ow * x.channels);
    for c in 0..x.channels {
        let xp = pad_replicate(x.plane(c), h, w, m);
        for i in 0..oh {
            for j in 0..ow {
                // y[i,j] = Σ_ab xp[si + 2m − a, sj + 2m − b] · k[a,b]
                let (bi, bj) = (scale * i + 2 * m, scale * j + 2 * m);
                let mut acc = 0.0;
                for a in 0..side {
                    let row = (bi - a) * pw;
                    let krow = &weights[a * side..(a + 1) * side];
                    for (b, kv) in krow.iter().enumerate() {
                        acc += xp[row + bj - b] * kv;
                    }
                }
                data.push(acc);
            }
        }
    }
    Ok(Image {
        height: oh,
        width: ow,
        channels: x.channels,
        data,
    })
}

/// Adjoint of [`blur_downsample`]: returns `(∂/∂x, ∂/∂k)` for the given
/// upstream gradient on the LR grid. The image gradient is skipped when
/// `want_image` is false.
pub fn blur_downsample_grad(
    x: &Image,
    weights: &[f64],
    side: usize,
    scale: usize,
    upstream: &Image,
    want_image: bool,
) -> Result<(Option<Image>, Vec<f64>), DegradeError> {
    check_inputs(x, side, weights.len(), scale)?;
    let (h, w) = (x.height, x.width);
    let (oh, ow) = lr_extents(h, w, scale);
    if upstream.height != oh || upstream.width != ow || upstream.channels != x.channels {
        return Err(DegradeError::Shape("upstream gradient does not match LR extents"));
    }
    let m = side / 2;
    let (ph, pw) = (h + 2 * m, w + 2 * m);
    let mut gk = vec![0.0; side * side];
    let mut gx_all = if want_image { vec![0.0; h * w * x.channels] } else { Vec::new() };
    for c in 0..x.channels {
        let xp = pad_replicate(x.plane(c), h, w, m);
        let up = upstream.plane(c);
        let mut gxp = if want_image { vec![0.0; ph * pw] } else { Vec::new() };
        for i in 0..oh {
            for j in 0..ow {
                let g = up[i * ow + j];
                if g == 0.0 {
                    continue;
                }
                let (bi, bj) = (scale * i + 2 * m, scale * j + 2 * m);
                for a in 0..side {
                    let row = (bi - a) * pw;
                    for b in 0..side {
                        let p = row + bj - b;
                        gk[a * side + b] += g * xp[p];
                        if want_image {
                            gxp[p] += g * weights[a * side + b];
                        }
                    }
                }
            }
        }
        if want_image {
            // fold the replicate padding back onto the edge pixels
            let gx = &mut gx_all[c * h * w..(c + 1) * h * w];
            for i in 0..ph {
                let si = i.saturating_sub(m).min(h - 1);
                for j in 0..pw {
                    let sj = j.saturating_sub(m).min(w - 1);
                    gx[si * w + sj] += gxp[i * pw + j];
                }
            }
        }
    }
    let gx = if want_image {
        Some(Image {
            height: h,
            width: w,
            channels: x.channels,
            data: gx_all,
        })
    } else {
        None
    };
    Ok((gx, gk))
}

/// Blur with `k`, keep every `s`-th sample from the upper-left, then add
/// Gaussian noise of standard deviation `cfg.noise_level` drawn from the
/// `degrade/noise` stream of `cfg.seed`.
pub fn degrade(x: &Image, k: &Kernel, cfg: &DegradationConfig) -> Result<Image, DegradeError> {
    let y = blur_downsample(x, k.weights(), k.side(), cfg.scale as usize)?;
    if cfg.noise_level == 0.0 {
        return Ok(y);
    }
    add_image_noise(&y, cfg.noise_level, &mut rng::stream(cfg.seed, "degrade/noise"))
}

/// Exact adjoints of the noiseless part of [`degrade`].
pub fn degrade_grad(
    x: &Image,
    k: &Kernel,
    cfg: &DegradationConfig,
    upstream: &Image,
) -> Result<(Image, Kernel), DegradeError> {
    let (gx, gk) = blur_downsample_grad(x, k.weights(), k.side(), cfg.scale as usize, upstream, true)?;
    let gk = Kernel::new(k.side(), gk).map_err(|_| DegradeError::Shape("kernel"))?;
    Ok((gx.unwrap(), gk))
}

/// Adds i.i.d. `N(0, level²)` noise to every pixel.
pub fn add_image_noise<R: Rng + ?Sized>(x: &Image, level: f64, rng: &mut R) -> Result<Image, DegradeError> {
    if !(0.0..=1.0).contains(&level) {
        return Err(DegradeError::BadNoiseLevel(level));
    }
    if level == 0.0 {
        return Ok(x.clone());
    }
    let data = x
        .data
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            v + level * n
        })
        .collect();
    Ok(Image { data, ..x.clone() })
}
