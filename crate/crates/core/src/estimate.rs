//! Kernel estimation by searching the latent space of a frozen flow.
//!
//! Reference mode fits `z` so that blurring the known HR image with
//! `f⁻¹(z)` and subsampling reproduces the LR observation. Joint mode
//! alternates that latent step with Adam on the HR pixels under a total
//! variation penalty. A plain Gaussian parametrization is provided as the
//! baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::adam::Adam;
use crate::degrade::{blur_downsample, blur_downsample_grad, lr_extents, DegradeError, Image};
use crate::diff::{Tape, Tensor, Var};
use crate::flow::{project_to_sphere, FlowError, FlowModel, LatentVector};
use crate::kernel::{
    check_scale, kernel_side, render_kernel, render_kernel_vjp, shift_for_scale, sigma_range, GaussianKernelParams, Kernel,
    KernelError,
};
use crate::math;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Reference,
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub latent_lr: f64,
    pub image_lr: f64,
    /// λ in front of the TV penalty (joint mode).
    pub tv_weight: f64,
    /// Step size on `(σ₁, σ₂, φ)` for the parametric baseline.
    pub parametric_lr: f64,
    pub seed: u64,
    pub project_every_step: bool,
    /// Joint mode only: keep the HR image fixed at its initial value.
    pub freeze_image: bool,
}

impl EstimationConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            iterations: 1000,
            latent_lr: 0.1,
            image_lr: 0.005,
            tv_weight: 0.01,
            parametric_lr: 0.02,
            seed,
            project_every_step: true,
            freeze_image: false,
        }
    }

    fn validate(&self) -> Result<(), EstimateError> {
        if self.iterations == 0 {
            return Err(EstimateError::Config("iterations must be at least 1"));
        }
        for lr in [self.latent_lr, self.image_lr, self.parametric_lr] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(EstimateError::Config("learning rates must be positive"));
            }
        }
        if !(self.tv_weight >= 0.0) || !self.tv_weight.is_finite() {
            return Err(EstimateError::Config("tv weight must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    /// Clamped and renormalized kernel at the best iterate.
    pub kernel: Kernel,
    /// Best latent (flow estimators only).
    pub latent: Option<LatentVector>,
    /// Best Gaussian parameters (parametric baseline only).
    pub params: Option<GaussianKernelParams>,
    /// Best HR image (joint mode only).
    pub image: Option<Image>,
    /// Data fidelity at the start of every iteration.
    pub loss_trace: Vec<f64>,
    pub best_iteration: usize,
}

impl EstimationResult {
    pub fn best_loss(&self) -> f64 {
        self.loss_trace[self.best_iteration]
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimateError {
    #[error("invalid estimation config: {0}")]
    Config(&'static str),
    #[error("model must be frozen")]
    NotFrozen,
    #[error("model scale {model} does not match requested scale {requested}")]
    ScaleMismatch { model: u32, requested: u32 },
    #[error("HR image {hr:?} does not map to LR image {lr:?} at scale {scale}")]
    Extents {
        hr: (usize, usize, usize),
        lr: (usize, usize, usize),
        scale: usize,
    },
    #[error("LR image must be at least 16x16, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("latent is the zero vector")]
    DegenerateLatent,
    #[error("numeric failure at iteration {iteration}: {detail}")]
    Numeric {
        iteration: usize,
        detail: String,
        trace: Vec<f64>,
    },
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// `z · √D / ‖z‖`.
pub fn project_sphere(z: &LatentVector) -> Result<LatentVector, EstimateError> {
    project_to_sphere(z.values()).ok_or(EstimateError::DegenerateLatent)
}

/// `z ~ N(0, I)` projected to the sphere of radius `√D`.
pub fn init_latent<R: Rng + ?Sized>(model: &FlowModel, rng: &mut R) -> Result<LatentVector, EstimateError> {
    if !model.is_frozen() {
        return Err(EstimateError::NotFrozen);
    }
    project_sphere(&LatentVector(rng::normal_vec(rng, model.dim())))
}

fn check_model(model: &FlowModel) -> Result<usize, EstimateError> {
    if !model.is_frozen() {
        return Err(EstimateError::NotFrozen);
    }
    Ok(model.scale() as usize)
}

fn check_pair(y: &Image, x: &Image, scale: usize) -> Result<(), EstimateError> {
    let (h, w) = lr_extents(x.height(), x.width(), scale);
    if (h, w) != (y.height(), y.width()) || x.channels() != y.channels() {
        return Err(EstimateError::Extents {
            hr: (x.height(), x.width(), x.channels()),
            lr: (y.height(), y.width(), y.channels()),
            scale,
        });
    }
    Ok(())
}

/// Mean squared residual and its gradient with respect to the prediction.
fn fidelity(x: &Image, weights: &[f64], side: usize, scale: usize, y: &Image) -> Result<(f64, Image), EstimateError> {
    let mut r = blur_downsample(x, weights, side, scale)?;
    let n = r.data().len() as f64;
    let mut loss = 0.0;
    for (p, t) in r.data_mut().iter_mut().zip(y.data()) {
        let d = *p - t;
        loss += d * d;
        *p = 2.0 * d / n;
    }
    Ok((loss / n, r))
}

/// `f⁻¹(z)` recorded on a fresh tape, with `z` as the only leaf.
fn latent_graph(model: &FlowModel, z: &[f64]) -> Result<(Tape, Var, Var), FlowError> {
    let mut tape = Tape::new();
    let zt = Tensor::matrix(1, z.len(), z.to_vec()).map_err(|source| FlowError::Numeric { block: 0, source })?;
    let zv = tape.leaf(zt);
    let kv = model.inverse_on_tape(&mut tape, zv)?;
    Ok((tape, zv, kv))
}

/// Reference-mode data fidelity at `z` and its gradient with respect to `z`.
pub fn reference_loss_grad(y: &Image, x_ref: &Image, model: &FlowModel, z: &LatentVector) -> Result<(f64, Vec<f64>), EstimateError> {
    let scale = model.scale() as usize;
    check_pair(y, x_ref, scale)?;
    let side = model.side();
    let (tape, zv, kv) = latent_graph(model, z.values())?;
    let raw = tape.value(kv).data();
    let (loss, up) = fidelity(x_ref, raw, side, scale, y)?;
    let (_, gk) = blur_downsample_grad(x_ref, raw, side, scale, &up, false)?;
    let grads = tape
        .backward_seeded(kv, &gk)
        .map_err(|source| FlowError::Numeric { block: 0, source })?;
    Ok((loss, grads.get(zv).expect("leaf").data().to_vec()))
}

/// Mean anisotropic total variation over all pixels and channels.
pub fn total_variation(x: &Image) -> f64 {
    let (h, w) = (x.height(), x.width());
    let mut tv = 0.0;
    for c in 0..x.channels() {
        let p = x.plane(c);
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    tv += math::abs(p[(i + 1) * w + j] - p[i * w + j]);
                }
                if j + 1 < w {
                    tv += math::abs(p[i * w + j + 1] - p[i * w + j]);
                }
            }
        }
    }
    tv / x.data().len() as f64
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adds `weight · ∂TV/∂x` (subgradient, `sign(0) = 0`) to `grad`.
fn add_tv_grad(x: &Image, weight: f64, grad: &mut [f64]) {
    let (h, w) = (x.height(), x.width());
    let scale = weight / x.data().len() as f64;
    for c in 0..x.channels() {
        let off = c * h * w;
        let p = x.plane(c);
        for i in 0..h {
            for j in 0..w {
                let a = i * w + j;
                if i + 1 < h {
                    let b = a + w;
                    let g = scale * sign(p[b] - p[a]);
                    grad[off + b] += g;
                    grad[off + a] -= g;
                }
                if j + 1 < w {
                    let b = a + 1;
                    let g = scale * sign(p[b] - p[a]);
                    grad[off + b] += g;
                    grad[off + a] -= g;
                }
            }
        }
    }
}

struct ImageStep {
    adam: Adam,
    tv_weight: f64,
}

struct Best {
    loss: f64,
    iteration: usize,
    z: Vec<f64>,
    raw: Vec<f64>,
    image: Option<Image>,
}

fn numeric(iteration: usize, detail: impl core::fmt::Display, trace: &[f64]) -> EstimateError {
    EstimateError::Numeric {
        iteration,
        detail: format!("{detail}"),
        trace: trace.to_vec(),
    }
}

/// Shared latent loop. `observe` sees the latent after every update.
fn run_latent(
    y: &Image,
    mut x: Image,
    model: &FlowModel,
    cfg: &EstimationConfig,
    mut image_step: Option<ImageStep>,
    observe: &mut dyn FnMut(usize, &[f64]),
) -> Result<EstimationResult, EstimateError> {
    let scale = model.scale() as usize;
    let side = model.side();
    let mut z = init_latent(model, &mut rng::stream(cfg.seed, "estimate/latent"))?.0;
    let mut adam = Adam::new(z.len(), cfg.latent_lr);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best: Option<Best> = None;
    let keep_image = image_step.is_some() || cfg.mode == Mode::Joint;

    for it in 0..cfg.iterations {
        let (tape, zv, kv) = latent_graph(model, &z).map_err(|e| numeric(it, e, &trace))?;
        let raw = tape.value(kv).data();
        let (loss, mut up) = fidelity(&x, raw, side, scale, y)?;
        if !loss.is_finite() {
            return Err(numeric(it, "non-finite data fidelity", &trace));
        }
        trace.push(loss);
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(Best {
                loss,
                iteration: it,
                z: z.clone(),
                raw: raw.to_vec(),
                image: keep_image.then(|| x.clone()),
            });
        }

        if let Some(step) = image_step.as_mut() {
            let (gx, _) = blur_downsample_grad(&x, raw, side, scale, &up, true)?;
            let mut gx = gx.expect("image gradient requested").into_data();
            add_tv_grad(&x, step.tv_weight, &mut gx);
            step.adam.step(x.data_mut(), &gx);
            if x.data().iter().any(|v| !v.is_finite()) {
                return Err(numeric(it, "non-finite image update", &trace));
            }
            up = fidelity(&x, raw, side, scale, y)?.1;
        }

        let (_, gk) = blur_downsample_grad(&x, raw, side, scale, &up, false)?;
        let grads = tape.backward_seeded(kv, &gk).map_err(|e| numeric(it, e, &trace))?;
        adam.step(&mut z, grads.get(zv).expect("leaf").data());
        if cfg.project_every_step {
            z = project_to_sphere(&z).ok_or_else(|| numeric(it, "latent collapsed to zero", &trace))?.0;
        }
        observe(it, &z);
    }

    let best = best.expect("at least one iteration");
    let kernel = Kernel::new(side, best.raw)?.clamp_normalize()?;
    Ok(EstimationResult {
        kernel,
        latent: Some(LatentVector(best.z)),
        params: None,
        image: best.image,
        loss_trace: trace,
        best_iteration: best.iteration,
    })
}

/// Fits the latent so that the known HR image, blurred with `f⁻¹(z)` and
/// subsampled, matches `y`. Returns the lowest-fidelity iterate.
pub fn estimate_reference(y: &Image, x_ref: &Image, model: &FlowModel, cfg: &EstimationConfig) -> Result<EstimationResult, EstimateError> {
    cfg.validate()?;
    let scale = check_model(model)?;
    check_pair(y, x_ref, scale)?;
    run_latent(y, x_ref.clone(), model, cfg, None, &mut |_, _| {})
}

/// Joint estimation starting from the nearest-neighbour upsampling of `y`.
pub fn estimate_joint(y: &Image, model: &FlowModel, cfg: &EstimationConfig) -> Result<EstimationResult, EstimateError> {
    let scale = check_model(model)?;
    estimate_joint_from(y, &y.upsample_nearest(scale), model, cfg)
}

/// Joint estimation from an explicit initial HR image.
pub fn estimate_joint_from(y: &Image, x_init: &Image, model: &FlowModel, cfg: &EstimationConfig) -> Result<EstimationResult, EstimateError> {
    cfg.validate()?;
    let scale = check_model(model)?;
    if y.height() < 16 || y.width() < 16 {
        return Err(EstimateError::TooSmall(y.height(), y.width()));
    }
    check_pair(y, x_init, scale)?;
    let step = (!cfg.freeze_image).then(|| ImageStep {
        adam: Adam::new(x_init.data().len(), cfg.image_lr),
        tv_weight: cfg.tv_weight,
    });
    let cfg = EstimationConfig {
        mode: Mode::Joint,
        ..cfg.clone()
    };
    run_latent(y, x_init.clone(), model, &cfg, step, &mut |_, _| {})
}

fn box_project(p: &mut [f64; 3], lo: f64, hi: f64) {
    p[0] = p[0].clamp(lo, hi);
    p[1] = p[1].clamp(lo, hi);
}

fn to_params(p: &[f64; 3], offset: (f64, f64)) -> GaussianKernelParams {
    GaussianKernelParams {
        sigma1: p[0],
        sigma2: p[1],
        angle: p[2],
        center_offset: offset,
    }
}

/// Baseline: Adam on `(σ₁, σ₂, φ)` of a shifted Gaussian with the same loss
/// as [`estimate_reference`]. Widths start at the midpoint of the legal
/// range and are clamped back into it after every step; the angle starts
/// from the `estimate/angle` stream.
pub fn estimate_parametric(y: &Image, x_ref: &Image, scale: u32, cfg: &EstimationConfig) -> Result<EstimationResult, EstimateError> {
    cfg.validate()?;
    check_scale(scale)?;
    let s = scale as usize;
    check_pair(y, x_ref, s)?;
    let side = kernel_side(scale);
    let (lo, hi) = sigma_range(scale);
    let offset = shift_for_scale(scale);
    let mid = 0.5 * (lo + hi);
    let angle = rng::stream(cfg.seed, "estimate/angle").random_range(0.0..core::f64::consts::PI);
    let mut p = [mid, mid, angle];
    let mut adam = Adam::new(3, cfg.parametric_lr);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, usize, [f64; 3])> = None;

    for it in 0..cfg.iterations {
        let params = to_params(&p, offset);
        let k = render_kernel(&params, side).map_err(|e| numeric(it, e, &trace))?;
        let (loss, up) = fidelity(x_ref, k.weights(), side, s, y)?;
        if !loss.is_finite() {
            return Err(numeric(it, "non-finite data fidelity", &trace));
        }
        trace.push(loss);
        if best.is_none_or(|b| loss < b.0) {
            best = Some((loss, it, p));
        }
        let (_, gk) = blur_downsample_grad(x_ref, k.weights(), side, s, &up, false)?;
        let g = render_kernel_vjp(&params, side, &gk)?;
        adam.step(&mut p, &g);
        box_project(&mut p, lo, hi);
    }

    let (_, best_iteration, p) = best.expect("at least one iteration");
    let params = to_params(&p, offset);
    Ok(EstimationResult {
        kernel: render_kernel(&params, side)?,
        latent: None,
        params: Some(params),
        image: None,
        loss_trace: trace,
        best_iteration,
    })
}
