//! Anisotropic Gaussian blur kernels: parameter sampling, rendering on the
//! `(4s+3)²` grid, and multiplicative perturbation.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("unsupported scale factor {0} (expected 2, 3 or 4)")]
    UnsupportedScale(u32),
    #[error("kernel side must be odd and positive, got {0}")]
    BadSide(usize),
    #[error("kernel has {got} weights, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("covariance is singular (sigma {0} below 1e-6)")]
    SingularCovariance(f64),
    #[error("invalid kernel parameter: {0}")]
    InvalidParams(&'static str),
    #[error("perturbation amplitude {0} outside [0, 1]")]
    BadAmplitude(f64),
    #[error("kernel has no positive mass")]
    Degenerate,
}

/// Validates a training/evaluation scale factor.
pub fn check_scale(scale: u32) -> Result<u32, KernelError> {
    match scale {
        2..=4 => Ok(scale),
        s => Err(KernelError::UnsupportedScale(s)),
    }
}

/// Side length `4s + 3` of the kernel grid for scale `s`.
pub fn kernel_side(scale: u32) -> usize {
    4 * scale as usize + 3
}

/// Legal width interval `[0.175 s, 2.5 s]`.
pub fn sigma_range(scale: u32) -> (f64, f64) {
    (0.175 * scale as f64, 2.5 * scale as f64)
}

/// Offset of the Gaussian mean from the grid midpoint that aligns the kernel
/// with stride-`s` sampling anchored at index 0.
pub fn shift_for_scale(scale: u32) -> (f64, f64) {
    let d = -0.5 * (scale.max(1) as f64 - 1.0);
    (d, d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernelParams {
    pub sigma1: f64,
    pub sigma2: f64,
    /// Rotation of the first principal axis, radians.
    pub angle: f64,
    /// Sub-pixel `(dy, dx)` shift of the mean relative to the grid midpoint.
    pub center_offset: (f64, f64),
}

impl GaussianKernelParams {
    pub fn isotropic(sigma: f64) -> Self {
        Self {
            sigma1: sigma,
            sigma2: sigma,
            angle: 0.0,
            center_offset: (0.0, 0.0),
        }
    }

    pub fn in_range(&self, scale: u32) -> bool {
        let (lo, hi) = sigma_range(scale);
        (lo..=hi).contains(&self.sigma1) && (lo..=hi).contains(&self.sigma2) && (0.0..PI).contains(&self.angle)
    }
}

/// Draws widths uniformly from the legal interval and an angle from `[0, π)`.
/// The mean carries the stride-alignment offset when `shifted` is set.
pub fn sample_params_with<R: Rng + ?Sized>(
    scale: u32,
    rng: &mut R,
    shifted: bool,
) -> Result<GaussianKernelParams, KernelError> {
    check_scale(scale)?;
    let (lo, hi) = sigma_range(scale);
    let sigma1 = rng.random_range(lo..=hi);
    let sigma2 = rng.random_range(lo..=hi);
    let angle = rng.random::<f64>() * PI;
    let center_offset = if shifted { shift_for_scale(scale) } else { (0.0, 0.0) };
    Ok(GaussianKernelParams {
        sigma1,
        sigma2,
        angle,
        center_offset,
    })
}

pub fn sample_params<R: Rng + ?Sized>(scale: u32, rng: &mut R) -> Result<GaussianKernelParams, KernelError> {
    sample_params_with(scale, rng, true)
}

/// Square grid of blur weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    side: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(side: usize, weights: Vec<f64>) -> Result<Self, KernelError> {
        if side == 0 || side % 2 == 0 {
            return Err(KernelError::BadSide(side));
        }
        if weights.len() != side * side {
            return Err(KernelError::BadLength {
                expected: side * side,
                got: weights.len(),
            });
        }
        Ok(Self { side, weights })
    }

    /// Unit weight at the grid midpoint.
    pub fn delta(side: usize) -> Result<Self, KernelError> {
        let mut w = vec![0.0; side * side];
        if side % 2 == 1 {
            w[(side / 2) * side + side / 2] = 1.0;
        }
        Self::new(side, w)
    }

    pub fn uniform(side: usize) -> Result<Self, KernelError> {
        let n = side * side;
        Self::new(side, vec![1.0 / n as f64; n])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.side + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Total magnitude of negative weights.
    pub fn negative_mass(&self) -> f64 {
        self.weights.iter().filter(|&&w| w < 0.0).map(|w| -w).sum()
    }

    /// Clamps negatives to zero and rescales to unit sum.
    pub fn clamp_normalize(&self) -> Result<Self, KernelError> {
        let clamped: Vec<f64> = self.weights.iter().map(|&w| w.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(KernelError::Degenerate);
        }
        Ok(Self {
            side: self.side,
            weights: clamped.into_iter().map(|w| w / total).collect(),
        })
    }
}

struct Rendered {
    unnormalized: Vec<f64>,
    total: f64,
    // rotated coordinates per grid entry
    u1: Vec<f64>,
    u2: Vec<f64>,
}

fn render_raw(p: &GaussianKernelParams, side: usize) -> Result<Rendered, KernelError> {
    if side == 0 || side % 2 == 0 {
        return Err(KernelError::BadSide(side));
    }
    for s in [p.sigma1, p.sigma2] {
        if !s.is_finite() || s < 1e-6 {
            return Err(KernelError::SingularCovariance(s));
        }
    }
    if !p.angle.is_finite() || !p.center_offset.0.is_finite() || !p.center_offset.1.is_finite() {
        return Err(KernelError::InvalidParams("non-finite angle or offset"));
    }
    let mid = (side - 1) as f64 / 2.0;
    let (ci, cj) = (mid + p.center_offset.0, mid + p.center_offset.1);
    let (c, s) = (math::cos(p.angle), math::sin(p.angle));
    let (inv1, inv2) = (1.0 / (p.sigma1 * p.sigma1), 1.0 / (p.sigma2 * p.sigma2));
    let n = side * side;
    let mut unnormalized = Vec::with_capacity(n);
    let mut u1 = Vec::with_capacity(n);
    let mut u2 = Vec::with_capacity(n);
    for i in 0..side {
        for j in 0..side {
            let di = i as f64 - ci;
            let dj = j as f64 - cj;
            // Rᵀ d with R the rotation by `angle`
            let a = c * di + s * dj;
            let b = -s * di + c * dj;
            unnormalized.push(math::exp(-0.5 * (a * a * inv1 + b * b * inv2)));
            u1.push(a);
            u2.push(b);
        }
    }
    let total: f64 = unnormalized.iter().sum();
    if !(total > 0.0) {
        return Err(KernelError::Degenerate);
    }
    Ok(Rendered {
        unnormalized,
        total,
        u1,
        u2,
    })
}

/// Evaluates `exp(−½ dᵀ Σ⁻¹ d)` on the grid with
/// `Σ = R(angle)·diag(σ₁², σ₂²)·R(angle)ᵀ` and normalizes to unit sum.
pub fn render_kernel(p: &GaussianKernelParams, side: usize) -> Result<Kernel, KernelError> {
    let r = render_raw(p, side)?;
    Ok(Kernel {
        side,
        weights: r.unnormalized.into_iter().map(|g| g / r.total).collect(),
    })
}

/// Pulls an upstream gradient on the kernel weights back to
/// `(sigma1, sigma2, angle)`.
pub fn render_kernel_vjp(p: &GaussianKernelParams, side: usize, upstream: &[f64]) -> Result<[f64; 3], KernelError> {
    let r = render_raw(p, side)?;
    if upstream.len() != side * side {
        return Err(KernelError::BadLength {
            expected: side * side,
            got: upstream.len(),
        });
    }
    let (s1, s2) = (p.sigma1, p.sigma2);
    let gk_dot_k: f64 = upstream
        .iter()
        .zip(&r.unnormalized)
        .map(|(u, g)| u * g / r.total)
        .sum();
    let mut out = [0.0; 3];
    for (idx, out_slot) in out.iter_mut().enumerate() {
        let mut sum_gprime = 0.0;
        let mut sum_up_gprime = 0.0;
        for e in 0..side * side {
            let (a, b) = (r.u1[e], r.u2[e]);
            let dq = match idx {
                0 => -2.0 * a * a / (s1 * s1 * s1),
                1 => -2.0 * b * b / (s2 * s2 * s2),
                _ => 2.0 * a * b * (1.0 / (s1 * s1) - 1.0 / (s2 * s2)),
            };
            let gprime = -0.5 * r.unnormalized[e] * dq;
            sum_gprime += gprime;
            sum_up_gprime += upstream[e] * gprime;
        }
        *out_slot = (sum_up_gprime - gk_dot_k * sum_gprime) / r.total;
    }
    Ok(out)
}

/// Multiplies each weight by `1 + u`, `u ~ U[−amplitude, amplitude]`, clamps
/// negatives and renormalizes.
pub fn perturb_kernel<R: Rng + ?Sized>(k: &Kernel, amplitude: f64, rng: &mut R) -> Result<Kernel, KernelError> {
    if !(0.0..=1.0).contains(&amplitude) {
        return Err(KernelError::BadAmplitude(amplitude));
    }
    let noisy: Vec<f64> = k
        .weights
        .iter()
        .map(|&w| {
            let u = if amplitude > 0.0 {
                rng.random_range(-amplitude..=amplitude)
            } else {
                0.0
            };
            w * (1.0 + u)
        })
        .collect();
    Kernel::new(k.side, noisy)?.clamp_normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn max_abs_diff(a: &Kernel, b: &Kernel) -> f64 {
        a.weights()
            .iter()
            .zip(b.weights())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn sides_and_ranges() {
        assert_eq!(kernel_side(2), 11);
        assert_eq!(kernel_side(3), 15);
        assert_eq!(kernel_side(4), 19);
        let (lo, hi) = sigma_range(2);
        assert!((lo - 0.35).abs() < 1e-15 && (hi - 5.0).abs() < 1e-15);
    }

    #[test]
    fn unsupported_scale() {
        let mut rng = stream(0, "t");
        assert_eq!(sample_params(5, &mut rng), Err(KernelError::UnsupportedScale(5)));
        assert_eq!(sample_params(1, &mut rng), Err(KernelError::UnsupportedScale(1)));
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let a = sample_params(3, &mut stream(11, "k")).unwrap();
        let b = sample_params(3, &mut stream(11, "k")).unwrap();
        assert_eq!(a, b);
        assert!(a.in_range(3));
        assert_eq!(a.center_offset, (-1.0, -1.0));
    }

    #[test]
    fn shift_values() {
        assert_eq!(shift_for_scale(1), (0.0, 0.0));
        assert_eq!(shift_for_scale(2), (-0.5, -0.5));
        assert_eq!(shift_for_scale(3), (-1.0, -1.0));
        assert_eq!(shift_for_scale(4), (-1.5, -1.5));
    }

    #[test]
    fn isotropic_kernel_ignores_angle() {
        let mut p = GaussianKernelParams::isotropic(1.7);
        p.center_offset = (-0.5, -0.5);
        let base = render_kernel(&p, 11).unwrap();
        for angle in [0.3, 1.0, 2.0, 3.1] {
            p.angle = angle;
            assert!(max_abs_diff(&base, &render_kernel(&p, 11).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn axis_swap_symmetry() {
        let mut rng = stream(5, "sym");
        for _ in 0..50 {
            let p = sample_params(2, &mut rng).unwrap();
            let q = GaussianKernelParams {
                sigma1: p.sigma2,
                sigma2: p.sigma1,
                angle: (p.angle + PI / 2.0) % PI,
                ..p
            };
            let d = max_abs_diff(&render_kernel(&p, 11).unwrap(), &render_kernel(&q, 11).unwrap());
            assert!(d < 1e-10, "{d}");
        }
    }

    #[test]
    fn center_weight_matches_direct_density() {
        // Independent evaluation of the bivariate normal with Σ = I.
        let side = 11;
        let mut total = 0.0;
        for i in 0..side {
            for j in 0..side {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                total += (-(di * di + dj * dj) / 2.0).exp();
            }
        }
        let expected_center = 1.0 / total;
        let k = render_kernel(&GaussianKernelParams::isotropic(1.0), side).unwrap();
        assert!((k.get(5, 5) - expected_center).abs() < 1e-15);
        assert!((k.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_sigma_rejected() {
        let p = GaussianKernelParams::isotropic(1e-7);
        assert!(matches!(render_kernel(&p, 11), Err(KernelError::SingularCovariance(_))));
        assert_eq!(render_kernel(&GaussianKernelParams::isotropic(1.0), 10), Err(KernelError::BadSide(10)));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = stream(9, "vjp");
        for _ in 0..20 {
            let p = sample_params(2, &mut rng).unwrap();
            let up: Vec<f64> = (0..121).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |q: &GaussianKernelParams| -> f64 {
                render_kernel(q, 11).unwrap().weights().iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let g = render_kernel_vjp(&p, 11, &up).unwrap();
            let h = 1e-6;
            for (idx, gi) in g.iter().enumerate() {
                let (mut lo, mut hi) = (p, p);
                match idx {
                    0 => {
                        lo.sigma1 -= h;
                        hi.sigma1 += h
                    }
                    1 => {
                        lo.sigma2 -= h;
                        hi.sigma2 += h
                    }
                    _ => {
                        lo.angle -= h;
                        hi.angle += h
                    }
                }
                let fd = (f(&hi) - f(&lo)) / (2.0 * h);
                assert!((fd - gi).abs() <= 1e-6 * (1.0 + fd.abs()), "{idx}: {fd} vs {gi}");
            }
        }
    }

    #[test]
    fn perturbation_properties() {
        let k = render_kernel(&sample_params(2, &mut stream(1, "p")).unwrap(), 11).unwrap();
        let same = perturb_kernel(&k, 0.0, &mut stream(2, "n")).unwrap();
        assert!(max_abs_diff(&k, &same) < 1e-15);
        let noisy = perturb_kernel(&k, 0.4, &mut stream(2, "n")).unwrap();
        assert!((noisy.sum() - 1.0).abs() < 1e-9);
        assert!(noisy.weights().iter().all(|&w| w >= 0.0));
        assert_eq!(perturb_kernel(&k, 1.5, &mut stream(2, "n")), Err(KernelError::BadAmplitude(1.5)));
    }

    #[test]
    fn perturbation_matches_scripted_formula() {
        let k = render_kernel(&sample_params(2, &mut stream(3, "p")).unwrap(), 11).unwrap();
        let got = perturb_kernel(&k, 0.4, &mut stream(4, "n")).unwrap();
        // Same draws replayed by hand.
        let mut rng = stream(4, "n");
        let raw: Vec<f64> = k
            .weights()
            .iter()
            .map(|w| w * (1.0 + rng.random_range(-0.4..=0.4)))
            .collect();
        let total: f64 = raw.iter().map(|w| w.max(0.0)).sum();
        for (g, r) in got.weights().iter().zip(&raw) {
            assert!((g - r.max(0.0) / total).abs() < 1e-15);
        }
    }

    #[test]
    fn all_zero_perturbation_is_degenerate() {
        let k = Kernel::new(3, vec![0.0; 9]).unwrap();
        assert_eq!(perturb_kernel(&k, 0.4, &mut stream(0, "z")), Err(KernelError::Degenerate));
    }
}
