use alloc::boxed::Box;
use alloc::vec::Vec;

use super::{FlowError, FlowModel};
use crate::adam::Adam;
use crate::kernel::{kernel_side, render_kernel, sample_params_with};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Train on kernels carrying the stride-alignment offset.
    pub shifted: bool,
    pub log_every: usize,
}

impl TrainConfig {
    /// 50,000 iterations of batch 100 at learning rate 1e-4.
    pub fn standard(seed: u64) -> Self {
        Self {
            iterations: 50_000,
            batch_size: 100,
            learning_rate: 1e-4,
            seed,
            shifted: true,
            log_every: 100,
        }
    }
}

/// Training stopped on a numeric failure; `last_good` holds the state
/// before the failing step.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("training aborted at iteration {iteration}: {source}")]
pub struct TrainError {
    pub iteration: usize,
    pub source: FlowError,
    pub last_good: Box<FlowModel>,
}

/// Per-iteration report passed to the observer.
pub struct Progress<'a> {
    /// 1-based iteration that just completed.
    pub iteration: usize,
    /// Batch NLL evaluated before the update.
    pub nll: f64,
    pub model: &'a FlowModel,
    /// Whether this iteration falls on the logging cadence.
    pub log_point: bool,
}

/// Fits the flow by Adam on the NLL of freshly sampled Gaussian kernels.
///
/// Batches come from the `train/batch` stream of `cfg.seed`. The model is
/// frozen on success.
pub fn train(
    mut model: FlowModel,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&Progress<'_>),
) -> Result<FlowModel, TrainError> {
    let fail = |iteration, source, last_good: &FlowModel| TrainError {
        iteration,
        source,
        last_good: Box::new(last_good.clone()),
    };
    let scale = model.scale();
    let side = kernel_side(scale);
    if side * side != model.dim() {
        return Err(fail(0, FlowError::Config("model dimension does not match the scale's kernel grid"), &model));
    }
    if cfg.batch_size == 0 {
        return Err(fail(0, FlowError::EmptyBatch, &model));
    }
    model.unfreeze();
    let mut batch_rng = rng::stream(cfg.seed, "train/batch");
    let mut adam = Adam::new(model.parameter_count(), cfg.learning_rate);
    let mut params = model.parameters();
    let mut rows = Vec::with_capacity(cfg.batch_size * model.dim());
    for it in 1..=cfg.iterations {
        rows.clear();
        for _ in 0..cfg.batch_size {
            let p = sample_params_with(scale, &mut batch_rng, cfg.shifted).map_err(|e| fail(it, e.into(), &model))?;
            let k = render_kernel(&p, side).map_err(|e| fail(it, e.into(), &model))?;
            rows.extend_from_slice(k.weights());
        }
        let snapshot = model.clone();
        let (nll, grads) = match model.nll_gradient_step(&rows, true) {
            Ok(v) => v,
            Err(e) => return Err(fail(it, e, &snapshot)),
        };
        adam.step(&mut params, &grads);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(fail(
                it,
                FlowError::Loss(crate::diff::DiffError::NonFinite { op: "adam" }),
                &snapshot,
            ));
        }
        model.set_parameters(&params);
        observer(&Progress {
            iteration: it,
            nll,
            model: &model,
            log_point: cfg.log_every > 0 && it % cfg.log_every == 0,
        });
    }
    model.freeze();
    Ok(model)
}
