use rand::Rng;

use super::{FlowError, FlowModel, LatentVector};
use crate::kernel::Kernel;
use crate::math;
use crate::rng;

/// A drawn kernel together with statistics of the raw flow output.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub kernel: Kernel,
    pub latent: LatentVector,
    /// Sum of the raw weights before clamping.
    pub raw_sum: f64,
    /// Total magnitude of the raw negative weights.
    pub raw_negative_mass: f64,
    /// Sum of the raw weight magnitudes.
    pub raw_abs_mass: f64,
}

impl Sample {
    /// Negative mass as a fraction of the total absolute mass.
    pub fn negative_fraction(&self) -> f64 {
        self.raw_negative_mass / self.raw_abs_mass
    }
}

/// Rescales `z` onto the sphere of radius `√D`. `None` for the zero vector.
pub fn project_to_sphere(z: &[f64]) -> Option<LatentVector> {
    let norm = math::norm2(z);
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    let r = math::sqrt(z.len() as f64) / norm;
    Some(LatentVector(z.iter().map(|v| v * r).collect()))
}

/// Draws `z ~ N(0, I)`, optionally projects it to `‖z‖ = √D`, inverts it
/// and clamps and renormalizes the result.
pub fn sample<R: Rng + ?Sized>(model: &FlowModel, rng: &mut R, project: bool) -> Result<Sample, FlowError> {
    if !model.is_frozen() {
        return Err(FlowError::NotFrozen);
    }
    let z = rng::normal_vec(rng, model.dim());
    let latent = if project {
        project_to_sphere(&z).ok_or(FlowError::Config("degenerate latent draw"))?
    } else {
        LatentVector(z)
    };
    let raw = model.flow_inverse(&latent)?;
    let raw_abs_mass = raw.weights().iter().map(|w| math::abs(*w)).sum();
    Ok(Sample {
        raw_sum: raw.sum(),
        raw_negative_mass: raw.negative_mass(),
        raw_abs_mass,
        kernel: raw.clamp_normalize()?,
        latent,
    })
}
