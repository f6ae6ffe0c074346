//! Invertible flow between kernel space and a standard normal latent space.
//!
//! Each block applies, in the kernel → latent direction:
//!
//! 1. a per-dimension affine normalization `(x − μ)·e^{ℓ}/√(σ² + ε) + β`,
//!    where `μ, σ²` are running statistics (momentum 0.1) that are only
//!    updated by training and `ℓ, β` are learned;
//! 2. a fixed permutation of the dimensions;
//! 3. an affine coupling: one half of the dimensions is scaled by
//!    `exp(c ⊙ tanh(S(h)))` and shifted by `T(h)`, where `h` is the other half,
//!    `S, T` are fully connected tanh networks and `c` is a learned cap.
//!
//! Even blocks transform the second half, odd blocks the first.

mod codec;
mod sample;
mod train;

pub use codec::{load, save, CodecError};
pub use sample::{project_to_sphere, sample, Sample};
pub use train::{train, Progress, TrainConfig, TrainError};

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::kernel::{kernel_side, Kernel, KernelError};
use crate::math;
use crate::rng;

/// Variance floor inside the normalization layer.
pub const NORM_EPS: f64 = 1e-5;
/// Momentum of the running normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("numeric failure in flow block {block}: {source}")]
    Numeric { block: usize, source: DiffError },
    #[error("numeric failure in loss assembly: {0}")]
    Loss(DiffError),
    #[error("input has {got} values per sample, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("model must be frozen for this operation")]
    NotFrozen,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid flow configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Architecture and seed of a fresh model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub scale: u32,
    pub dim: usize,
    pub blocks: usize,
    pub depth: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl FlowConfig {
    /// Five blocks, depth-3 networks of width `5(s+1)` on `(4s+3)²` kernels.
    pub fn for_scale(scale: u32, seed: u64) -> Self {
        let side = kernel_side(scale);
        Self {
            scale,
            dim: side * side,
            blocks: 5,
            depth: 3,
            hidden: 5 * (scale as usize + 1),
            seed,
        }
    }
}

/// Fully connected layer computing `x·W + b`, with `W` stored `[rows = in, cols = out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Stack of dense layers with tanh between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, depth: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let rows = if l == 0 { input } else { hidden };
            let cols = if l + 1 == depth { output } else { hidden };
            let (weights, biases) = if l + 1 == depth {
                (vec![0.0; rows * cols], vec![0.0; cols])
            } else {
                let bound = 1.0 / math::sqrt(rows as f64);
                (
                    (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
                    (0..cols).map(|_| rng.random_range(-bound..bound)).collect(),
                )
            };
            layers.push(Dense {
                rows,
                cols,
                weights,
                biases,
            });
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].cols
    }
}

/// Invertible per-dimension affine with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub log_scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl Normalization {
    /// Exactly the identity map: `σ² + ε = 1`.
    fn identity(dim: usize) -> Self {
        Self {
            log_scale: vec![0.0; dim],
            shift: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0 - NORM_EPS; dim],
        }
    }

    /// `Σ ℓ − ½ Σ ln(σ² + ε)`; independent of the input.
    pub fn log_det(&self) -> f64 {
        self.log_scale.iter().sum::<f64>() - 0.5 * self.running_var.iter().map(|v| math::ln(v + NORM_EPS)).sum::<f64>()
    }

    fn update(&mut self, rows: &[f64], dim: usize) {
        let n = rows.len() / dim;
        for d in 0..dim {
            let mean = (0..n).map(|r| rows[r * dim + d]).sum::<f64>() / n as f64;
            let var = if n > 1 {
                (0..n).map(|r| { let d0 = rows[r * dim + d] - mean; d0 * d0 }).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            self.running_mean[d] = (1.0 - NORM_MOMENTUM) * self.running_mean[d] + NORM_MOMENTUM * mean;
            self.running_var[d] = (1.0 - NORM_MOMENTUM) * self.running_var[d] + NORM_MOMENTUM * var;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowBlock {
    pub norm: Normalization,
    pub perm: Vec<usize>,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
    /// Per-dimension bound on the coupling log-scale.
    pub scale_cap: Vec<f64>,
}

/// Latent code of a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        math::norm2(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    scale: u32,
    dim: usize,
    blocks: Vec<FlowBlock>,
    frozen: bool,
}

/// Halves `[0, ⌈D/2⌉)` and `[⌈D/2⌉, D)`.
fn split_point(dim: usize) -> usize {
    dim.div_ceil(2)
}

/// `(conditioning range, transformed range)` for block `b`.
fn coupling_ranges(dim: usize, b: usize) -> ((usize, usize), (usize, usize)) {
    let h = split_point(dim);
    if b % 2 == 0 {
        ((0, h), (h, dim))
    } else {
        ((h, dim), (0, h))
    }
}

struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

struct BoundBlock {
    log_scale: Var,
    shift: Var,
    cap: Var,
    scale_net: BoundMlp,
    shift_net: BoundMlp,
}

/// Forward pass outputs on a tape.
pub(crate) struct ForwardPass {
    pub z: Var,
    /// Sum of log-determinants over the whole batch.
    pub log_det_total: Var,
    pub log_det_per_sample: Vec<f64>,
}

impl FlowModel {
    pub fn new(cfg: &FlowConfig) -> Result<Self, FlowError> {
        if cfg.dim < 2 {
            return Err(FlowError::Config("latent dimension must be at least 2"));
        }
        if cfg.blocks == 0 || cfg.depth == 0 || cfg.hidden == 0 {
            return Err(FlowError::Config("blocks, depth and hidden width must be positive"));
        }
        if cfg.scale > u8::MAX as u32 || cfg.blocks > u8::MAX as usize {
            return Err(FlowError::Config("scale and block count must fit in a byte"));
        }
        let mut perm_rng = rng::stream(cfg.seed, "model/perm");
        let mut init_rng = rng::stream(cfg.seed, "model/init");
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let mut perm: Vec<usize> = (0..cfg.dim).collect();
            perm.shuffle(&mut perm_rng);
            let ((c0, c1), (t0, t1)) = coupling_ranges(cfg.dim, b);
            let (cond, out) = (c1 - c0, t1 - t0);
            blocks.push(FlowBlock {
                norm: Normalization::identity(cfg.dim),
                perm,
                scale_net: Mlp::new(cond, cfg.hidden, out, cfg.depth, &mut init_rng),
                shift_net: Mlp::new(cond, cfg.hidden, out, cfg.depth, &mut init_rng),
                scale_cap: vec![1.0; out],
            });
        }
        Ok(Self {
            scale: cfg.scale,
            dim: cfg.dim,
            blocks,
            frozen: false,
        })
    }

    /// A fresh model whose permutations are the identity as well, so the
    /// whole map is exactly `z = k` with zero log-determinant.
    pub fn identity(cfg: &FlowConfig) -> Result<Self, FlowError> {
        let mut model = Self::new(cfg)?;
        for b in &mut model.blocks {
            b.perm = (0..cfg.dim).collect();
        }
        Ok(model)
    }

    /// Assembles a model from explicit blocks, validating every shape.
    pub fn from_blocks(scale: u32, dim: usize, blocks: Vec<FlowBlock>, frozen: bool) -> Result<Self, FlowError> {
        if dim < 2 || blocks.is_empty() {
            return Err(FlowError::Config("need at least two dimensions and one block"));
        }
        for (b, block) in blocks.iter().enumerate() {
            validate_block(dim, b, block).map_err(FlowError::Config)?;
        }
        Ok(Self {
            scale,
            dim,
            blocks,
            frozen,
        })
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Side of the kernel grid, when `dim` is a perfect square.
    pub fn side(&self) -> usize {
        let s = math::sqrt(self.dim as f64) as usize;
        if s * s == self.dim {
            s
        } else {
            0
        }
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [FlowBlock] {
        &mut self.blocks
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Fixes the normalization statistics.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Trainable values in a fixed order: per block `ℓ, β, c`, then the
    /// scale network and the shift network, each layer as weights then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for b in &self.blocks {
            out.extend_from_slice(&b.norm.log_scale);
            out.extend_from_slice(&b.norm.shift);
            out.extend_from_slice(&b.scale_cap);
            for net in [&b.scale_net, &b.shift_net] {
                for l in &net.layers {
                    out.extend_from_slice(&l.weights);
                    out.extend_from_slice(&l.biases);
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                2 * self.dim
                    + b.scale_cap.len()
                    + [&b.scale_net, &b.shift_net]
                        .iter()
                        .flat_map(|n| n.layers.iter())
                        .map(|l| l.weights.len() + l.biases.len())
                        .sum::<usize>()
            })
            .sum()
    }

    pub fn set_parameters(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.parameter_count(), "parameter vector length");
        let mut it = values.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().unwrap());
        for b in &mut self.blocks {
            fill(&mut b.norm.log_scale);
            fill(&mut b.norm.shift);
            fill(&mut b.scale_cap);
            for net in [&mut b.scale_net, &mut b.shift_net] {
                for l in &mut net.layers {
                    fill(&mut l.weights);
                    fill(&mut l.biases);
                }
            }
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundBlock> {
        let put = |tape: &mut Tape, shape: Vec<usize>, data: &[f64]| {
            let t = Tensor::new(shape, data.to_vec()).expect("model parameters are finite");
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let log_scale = put(tape, vec![self.dim], &b.norm.log_scale);
            let shift = put(tape, vec![self.dim], &b.norm.shift);
            let cap = put(tape, vec![b.scale_cap.len()], &b.scale_cap);
            let mut nets = [&b.scale_net, &b.shift_net].map(|net| BoundMlp {
                layers: Vec::with_capacity(net.layers.len()),
            });
            for (bound, net) in nets.iter_mut().zip([&b.scale_net, &b.shift_net]) {
                for l in &net.layers {
                    let w = put(tape, vec![l.rows, l.cols], &l.weights);
                    let bias = put(tape, vec![l.cols], &l.biases);
                    bound.layers.push((w, bias));
                }
            }
            let [scale_net, shift_net] = nets;
            out.push(BoundBlock {
                log_scale,
                shift,
                cap,
                scale_net,
                shift_net,
            });
        }
        out
    }

    /// Variables in the order of [`FlowModel::parameters`].
    fn bound_vars(bound: &[BoundBlock]) -> Vec<Var> {
        let mut vars = Vec::new();
        for b in bound {
            vars.extend([b.log_scale, b.shift, b.cap]);
            for net in [&b.scale_net, &b.shift_net] {
                for &(w, bias) in &net.layers {
                    vars.extend([w, bias]);
                }
            }
        }
        vars
    }

    fn mlp(tape: &mut Tape, net: &BoundMlp, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for (idx, &(w, b)) in net.layers.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add(lin, b)?;
            if idx + 1 < net.layers.len() {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Coupling log-scale `c ⊙ tanh(S(cond))` and shift `T(cond)`.
    fn coupling_terms(tape: &mut Tape, bb: &BoundBlock, cond: Var) -> Result<(Var, Var), DiffError> {
        let raw = Self::mlp(tape, &bb.scale_net, cond)?;
        let bounded = tape.tanh(raw)?;
        let s = tape.mul(bounded, bb.cap)?;
        let t = Self::mlp(tape, &bb.shift_net, cond)?;
        Ok((s, t))
    }

    /// Kernel → latent on a tape. With `update_stats`, each block's running
    /// statistics absorb the incoming batch before the block is applied.
    fn forward_tape(
        &mut self,
        tape: &mut Tape,
        bound: &[BoundBlock],
        x: Var,
        update_stats: bool,
    ) -> Result<ForwardPass, FlowError> {
        let batch = tape.value(x).rows();
        let mut acc = Accumulator::new(batch);
        let mut h = x;
        for b in 0..self.blocks.len() {
            if update_stats {
                let rows = tape.value(h).data().to_vec();
                self.blocks[b].norm.update(&rows, self.dim);
            }
            h = block_forward(&self.blocks[b], b, self.dim, tape, &bound[b], h, &mut acc)?;
        }
        acc.finish(h)
    }

    fn forward_shared(&self, tape: &mut Tape, bound: &[BoundBlock], x: Var) -> Result<ForwardPass, FlowError> {
        let mut acc = Accumulator::new(tape.value(x).rows());
        let mut h = x;
        for (b, block) in self.blocks.iter().enumerate() {
            h = block_forward(block, b, self.dim, tape, &bound[b], h, &mut acc)?;
        }
        acc.finish(h)
    }

    /// Latent → kernel on a tape. Model parameters enter as constants.
    pub fn inverse_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var, FlowError> {
        let bound = self.bind(tape, false);
        self.inverse_bound(tape, &bound, z)
    }

    fn inverse_bound(&self, tape: &mut Tape, bound: &[BoundBlock], z: Var) -> Result<Var, FlowError> {
        let dim = self.dim;
        if tape.value(z).cols() != dim {
            return Err(FlowError::Dimension {
                expected: dim,
                got: tape.value(z).cols(),
            });
        }
        let mut h = z;
        for b in (0..self.blocks.len()).rev() {
            let at = |source| FlowError::Numeric { block: b, source };
            let bb = &bound[b];
            let ((c0, c1), (t0, t1)) = coupling_ranges(dim, b);
            let cond = tape.slice(h, c0, c1).map_err(at)?;
            let tr_out = tape.slice(h, t0, t1).map_err(at)?;
            let (s, t) = Self::coupling_terms(tape, bb, cond).map_err(at)?;
            let diff = tape.sub(tr_out, t).map_err(at)?;
            let neg_s = tape.scale_shift(s, -1.0, 0.0).map_err(at)?;
            let inv = tape.exp(neg_s).map_err(at)?;
            let tr = tape.mul(diff, inv).map_err(at)?;
            let permuted = if b % 2 == 0 {
                tape.concat(&[cond, tr])
            } else {
                tape.concat(&[tr, cond])
            }
            .map_err(at)?;

            let perm = &self.blocks[b].perm;
            let mut inverse_perm = vec![0; dim];
            for (j, &p) in perm.iter().enumerate() {
                inverse_perm[p] = j;
            }
            let normed = tape.permute(permuted, &inverse_perm).map_err(at)?;

            let (mean, _, std) = norm_constants(&self.blocks[b].norm, dim, tape);
            let unshifted = tape.sub(normed, bb.shift).map_err(at)?;
            let neg_ls = tape.scale_shift(bb.log_scale, -1.0, 0.0).map_err(at)?;
            let e = tape.exp(neg_ls).map_err(at)?;
            let a_inv = tape.mul(e, std).map_err(at)?;
            let scaled = tape.mul(unshifted, a_inv).map_err(at)?;
            h = tape.add(scaled, mean).map_err(at)?;
        }
        Ok(h)
    }

    fn batch_tensor(&self, rows: &[f64]) -> Result<Tensor, FlowError> {
        if rows.is_empty() {
            return Err(FlowError::EmptyBatch);
        }
        if rows.len() % self.dim != 0 {
            return Err(FlowError::Dimension {
                expected: self.dim,
                got: rows.len() % self.dim,
            });
        }
        Tensor::matrix(rows.len() / self.dim, self.dim, rows.to_vec()).map_err(|source| FlowError::Numeric { block: 0, source })
    }

    /// Maps a batch of flattened kernels (row-major, `dim` values each) to
    /// latents and per-sample log-determinants.
    pub fn forward_batch(&self, rows: &[f64]) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        let x = self.batch_tensor(rows)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(x);
        let pass = self.forward_shared(&mut tape, &bound, x)?;
        Ok((tape.value(pass.z).data().to_vec(), pass.log_det_per_sample))
    }

    /// Maps a batch of latents back to flattened kernels.
    pub fn inverse_batch(&self, rows: &[f64]) -> Result<Vec<f64>, FlowError> {
        let z = self.batch_tensor(rows)?;
        let mut tape = Tape::new();
        let z = tape.constant(z);
        let k = self.inverse_on_tape(&mut tape, z)?;
        Ok(tape.value(k).data().to_vec())
    }

    /// `z = f(k)` and `log|det ∂f/∂k|`.
    pub fn flow_forward(&self, k: &Kernel) -> Result<(LatentVector, f64), FlowError> {
        let (z, ld) = self.forward_batch(k.weights())?;
        Ok((LatentVector(z), ld[0]))
    }

    /// `k = f⁻¹(z)` reshaped to the kernel grid, without post-processing.
    pub fn flow_inverse(&self, z: &LatentVector) -> Result<Kernel, FlowError> {
        let side = self.side();
        if side == 0 {
            return Err(FlowError::Config("latent dimension is not a square kernel grid"));
        }
        let k = self.inverse_batch(z.values())?;
        Ok(Kernel::new(side, k)?)
    }

    fn nll_on_tape(&mut self, tape: &mut Tape, rows: &[f64], trainable: bool, update_stats: bool) -> Result<(Var, Vec<Var>), FlowError> {
        let x = self.batch_tensor(rows)?;
        let batch = x.rows() as f64;
        let bound = self.bind(tape, trainable);
        let x = tape.constant(x);
        let pass = self.forward_tape(tape, &bound, x, update_stats)?;
        let sq = tape.square(pass.z).map_err(FlowError::Loss)?;
        let sq = tape.sum(sq).map_err(FlowError::Loss)?;
        let prior = tape
            .scale_shift(sq, 0.5 / batch, 0.5 * self.dim as f64 * math::LN_2PI)
            .map_err(FlowError::Loss)?;
        let ld = tape.scale_shift(pass.log_det_total, 1.0 / batch, 0.0).map_err(FlowError::Loss)?;
        let loss = tape.sub(prior, ld).map_err(FlowError::Loss)?;
        Ok((loss, Self::bound_vars(&bound)))
    }

    /// Mean negative log-likelihood of flattened kernels under the current
    /// statistics: `½‖z‖² + (D/2)·ln 2π − log|det|`, averaged over the batch.
    pub fn nll_rows(&self, rows: &[f64]) -> Result<f64, FlowError> {
        let mut tape = Tape::new();
        let mut copy = self.clone();
        let (loss, _) = copy.nll_on_tape(&mut tape, rows, false, false)?;
        Ok(tape.value(loss).item())
    }

    pub fn nll_loss(&self, batch: &[Kernel]) -> Result<f64, FlowError> {
        self.nll_rows(&flatten(batch, self.dim)?)
    }

    /// Loss and gradient with respect to [`FlowModel::parameters`], with the
    /// normalization statistics held fixed.
    pub fn nll_gradient(&self, rows: &[f64]) -> Result<(f64, Vec<f64>), FlowError> {
        let mut copy = self.clone();
        copy.nll_gradient_step(rows, false)
    }

    pub(crate) fn nll_gradient_step(&mut self, rows: &[f64], update_stats: bool) -> Result<(f64, Vec<f64>), FlowError> {
        let mut tape = Tape::new();
        let (loss, vars) = self.nll_on_tape(&mut tape, rows, true, update_stats)?;
        let grads = tape.backward(loss).map_err(FlowError::Loss)?;
        let mut flat = Vec::with_capacity(self.parameter_count());
        for v in vars {
            flat.extend_from_slice(grads.get(v).expect("bound parameter is a leaf").data());
        }
        Ok((tape.value(loss).item(), flat))
    }
}

/// Shape checks for block `b` of a `dim`-dimensional model.
pub(crate) fn validate_block(dim: usize, b: usize, block: &FlowBlock) -> Result<(), &'static str> {
    let ((c0, c1), (t0, t1)) = coupling_ranges(dim, b);
    let n = &block.norm;
    if [n.log_scale.len(), n.shift.len(), n.running_mean.len(), n.running_var.len()]
        .iter()
        .any(|&l| l != dim)
    {
        return Err("normalization vectors do not match the dimension");
    }
    if n.running_var.iter().any(|&v| !(v + NORM_EPS > 0.0)) {
        return Err("running variance must exceed -eps");
    }
    if block.perm.len() != dim || !crate::diff::is_permutation(&block.perm) {
        return Err("permutation is not a bijection of the dimensions");
    }
    for net in [&block.scale_net, &block.shift_net] {
        if net.layers.is_empty() || net.input_dim() != c1 - c0 || net.output_dim() != t1 - t0 {
            return Err("coupling network has the wrong input/output width");
        }
        if net.layers.windows(2).any(|pair| pair[0].cols != pair[1].rows) {
            return Err("coupling network layers do not chain");
        }
        if net
            .layers
            .iter()
            .any(|l| l.weights.len() != l.rows * l.cols || l.biases.len() != l.cols)
        {
            return Err("dense layer has the wrong parameter count");
        }
    }
    if block.scale_cap.len() != t1 - t0 {
        return Err("scale cap length does not match the transformed half");
    }
    Ok(())
}

struct Accumulator {
    per_sample: Vec<f64>,
    total: Option<Var>,
}

impl Accumulator {
    fn new(batch: usize) -> Self {
        Self {
            per_sample: vec![0.0; batch],
            total: None,
        }
    }

    fn finish(self, z: Var) -> Result<ForwardPass, FlowError> {
        Ok(ForwardPass {
            z,
            log_det_total: self.total.ok_or(FlowError::Config("model has no blocks"))?,
            log_det_per_sample: self.per_sample,
        })
    }
}

fn norm_constants(norm: &Normalization, dim: usize, tape: &mut Tape) -> (Var, Var, Var) {
    let mean = tape.constant(Tensor::from_parts(vec![dim], norm.running_mean.clone()));
    let inv_std: Vec<f64> = norm.running_var.iter().map(|v| 1.0 / math::sqrt(v + NORM_EPS)).collect();
    let std: Vec<f64> = norm.running_var.iter().map(|v| math::sqrt(v + NORM_EPS)).collect();
    let inv_std = tape.constant(Tensor::from_parts(vec![dim], inv_std));
    let std = tape.constant(Tensor::from_parts(vec![dim], std));
    (mean, inv_std, std)
}

/// One block in the kernel → latent direction.
fn block_forward(
    block: &FlowBlock,
    b: usize,
    dim: usize,
    tape: &mut Tape,
    bb: &BoundBlock,
    h: Var,
    acc: &mut Accumulator,
) -> Result<Var, FlowError> {
    let at = |source| FlowError::Numeric { block: b, source };
    let batch = tape.value(h).rows();
    let (mean, inv_std, _) = norm_constants(&block.norm, dim, tape);
    let norm_const = -0.5 * block.norm.running_var.iter().map(|v| math::ln(v + NORM_EPS)).sum::<f64>();

    let centered = tape.sub(h, mean).map_err(at)?;
    let e = tape.exp(bb.log_scale).map_err(at)?;
    let a = tape.mul(e, inv_std).map_err(at)?;
    let scaled = tape.mul(centered, a).map_err(at)?;
    let normed = tape.add(scaled, bb.shift).map_err(at)?;
    let ls_sum = tape.sum(bb.log_scale).map_err(at)?;
    let norm_ld = tape.value(ls_sum).item() + norm_const;

    let permuted = tape.permute(normed, &block.perm).map_err(at)?;
    let ((c0, c1), (t0, t1)) = coupling_ranges(dim, b);
    let cond = tape.slice(permuted, c0, c1).map_err(at)?;
    let tr = tape.slice(permuted, t0, t1).map_err(at)?;
    let (s, t) = FlowModel::coupling_terms(tape, bb, cond).map_err(at)?;
    let es = tape.exp(s).map_err(at)?;
    let prod = tape.mul(tr, es).map_err(at)?;
    let tr_out = tape.add(prod, t).map_err(at)?;
    let out = if b % 2 == 0 {
        tape.concat(&[cond, tr_out])
    } else {
        tape.concat(&[tr_out, cond])
    }
    .map_err(at)?;

    let width = t1 - t0;
    for (r, slot) in acc.per_sample.iter_mut().enumerate() {
        *slot += norm_ld + tape.value(s).data()[r * width..(r + 1) * width].iter().sum::<f64>();
    }
    let coupling_sum = tape.sum(s).map_err(at)?;
    let norm_total = tape
        .scale_shift(ls_sum, batch as f64, batch as f64 * norm_const)
        .map_err(at)?;
    let block_total = tape.add(coupling_sum, norm_total).map_err(at)?;
    acc.total = Some(match acc.total {
        None => block_total,
        Some(prev) => tape.add(prev, block_total).map_err(at)?,
    });
    Ok(out)
}

/// Concatenates kernel weights into one row-major batch.
pub fn flatten(batch: &[Kernel], dim: usize) -> Result<Vec<f64>, FlowError> {
    if batch.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    let mut rows = Vec::with_capacity(batch.len() * dim);
    for k in batch {
        if k.weights().len() != dim {
            return Err(FlowError::Dimension {
                expected: dim,
                got: k.weights().len(),
            });
        }
        rows.extend_from_slice(k.weights());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
