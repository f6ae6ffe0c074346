use alloc::vec;
use alloc::vec::Vec;

use super::{DiffError, Tensor};
use crate::math;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations the tape knows how to differentiate.
///
/// Binary elementwise ops (`Add`, `Sub`, `Mul`) accept either equal shapes or
/// a 2-D left operand with a 1-D right operand of the same column count, in
/// which case the right operand is broadcast over rows. `Slice`, `Concat` and
/// `Permute` act on the last axis.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Tanh,
    Exp,
    Log,
    Sum,
    Mean,
    Square,
    /// Cross-correlation without padding: `out[i,j] = Σ x[i+a,j+b]·k[a,b]`.
    Conv2dValid,
    /// Keeps rows and columns at indices `0, s, 2s, …`.
    DownsampleStride(usize),
    Slice { start: usize, end: usize },
    Concat,
    Permute(Vec<usize>),
    /// `x·scale + shift` with scalar constants.
    ScaleShift { scale: f64, shift: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "multiply",
            Primitive::MatMul => "matmul",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Square => "square",
            Primitive::Conv2dValid => "conv2d-valid",
            Primitive::DownsampleStride(_) => "downsample-stride",
            Primitive::Slice { .. } => "slice",
            Primitive::Concat => "concat",
            Primitive::Permute(_) => "permute",
            Primitive::ScaleShift { .. } => "scale-shift",
        }
    }
}

struct Node {
    value: Tensor,
    op: Option<(Primitive, Vec<Var>)>,
    requires_grad: bool,
    is_leaf: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Rows { cols: usize },
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast, DiffError> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if a.shape().len() == 2 && b.shape().len() == 1 && a.cols() == b.len() {
        return Ok(Broadcast::Rows { cols: b.len() });
    }
    Err(DiffError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = match bc {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Rows { cols } => a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % cols]))
            .collect(),
    };
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn arity(prim: &Primitive, got: usize) -> Result<(), DiffError> {
    let ok = match prim {
        Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::MatMul
        | Primitive::Conv2dValid => got == 2,
        Primitive::Concat => got >= 1,
        _ => got == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(DiffError::Invalid {
            op: prim.name(),
            reason: "wrong number of inputs",
        })
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize), DiffError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(DiffError::Invalid {
            op,
            reason: "expects a 2-D tensor",
        }),
    }
}

fn forward(prim: &Primitive, xs: &[&Tensor]) -> Result<Tensor, DiffError> {
    let op = prim.name();
    let out = match prim {
        Primitive::Add => zip(xs[0], xs[1], broadcast(op, xs[0], xs[1])?, |a, b| a + b),
        Primitive::Sub => zip(xs[0], xs[1], broadcast(op, xs[0], xs[1])?, |a, b| a - b),
        Primitive::Mul => zip(xs[0], xs[1], broadcast(op, xs[0], xs[1])?, |a, b| a * b),
        Primitive::MatMul => {
            let (m, k) = require_2d(op, xs[0])?;
            let (k2, n) = require_2d(op, xs[1])?;
            if k != k2 {
                return Err(shape_err(op, xs[0], xs[1]));
            }
            let (a, b) = (xs[0].data(), xs[1].data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::from_parts(vec![m, n], out)
        }
        Primitive::Tanh => map(xs[0], math::tanh),
        Primitive::Exp => map(xs[0], math::exp),
        Primitive::Log => map(xs[0], math::ln),
        Primitive::Square => map(xs[0], |v| v * v),
        Primitive::Sum => Tensor::from_parts(vec![1], vec![xs[0].data().iter().sum()]),
        Primitive::Mean => {
            let x = xs[0];
            Tensor::from_parts(vec![1], vec![x.data().iter().sum::<f64>() / x.len() as f64])
        }
        Primitive::Conv2dValid => {
            let (h, w) = require_2d(op, xs[0])?;
            let (kh, kw) = require_2d(op, xs[1])?;
            if kh > h || kw > w {
                return Err(shape_err(op, xs[0], xs[1]));
            }
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let (x, k) = (xs[0].data(), xs[1].data());
            let mut out = vec![0.0; oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for a in 0..kh {
                        let xr = &x[(i + a) * w + j..(i + a) * w + j + kw];
                        let kr = &k[a * kw..(a + 1) * kw];
                        acc += xr.iter().zip(kr).map(|(p, q)| p * q).sum::<f64>();
                    }
                    out[i * ow + j] = acc;
                }
            }
            Tensor::from_parts(vec![oh, ow], out)
        }
        Primitive::DownsampleStride(s) => {
            let s = *s;
            if s == 0 {
                return Err(DiffError::Invalid {
                    op,
                    reason: "stride must be positive",
                });
            }
            let (h, w) = require_2d(op, xs[0])?;
            let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
            let x = xs[0].data();
            let mut out = Vec::with_capacity(oh * ow);
            for i in 0..oh {
                for j in 0..ow {
                    out.push(x[i * s * w + j * s]);
                }
            }
            Tensor::from_parts(vec![oh, ow], out)
        }
        Primitive::Slice { start, end } => {
            let x = xs[0];
            let c = x.cols();
            if start >= end || *end > c {
                return Err(DiffError::Invalid {
                    op,
                    reason: "slice range out of bounds",
                });
            }
            let width = end - start;
            let mut out = Vec::with_capacity(x.rows() * width);
            for r in 0..x.rows() {
                out.extend_from_slice(&x.data()[r * c + start..r * c + end]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = width;
            Tensor::from_parts(shape, out)
        }
        Primitive::Concat => {
            let rows = xs[0].rows();
            let lead = &xs[0].shape()[..xs[0].shape().len() - 1];
            for x in &xs[1..] {
                if x.shape()[..x.shape().len() - 1] != *lead {
                    return Err(shape_err(op, xs[0], x));
                }
            }
            let total: usize = xs.iter().map(|x| x.cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for x in xs {
                    let c = x.cols();
                    out.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
                }
            }
            let mut shape = xs[0].shape().to_vec();
            *shape.last_mut().unwrap() = total;
            Tensor::from_parts(shape, out)
        }
        Primitive::Permute(perm) => {
            let x = xs[0];
            let c = x.cols();
            if perm.len() != c || !is_permutation(perm) {
                return Err(DiffError::Invalid {
                    op,
                    reason: "not a permutation of the last axis",
                });
            }
            let mut out = Vec::with_capacity(x.len());
            for r in 0..x.rows() {
                let row = &x.data()[r * c..(r + 1) * c];
                out.extend(perm.iter().map(|&p| row[p]));
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Primitive::ScaleShift { scale, shift } => map(xs[0], |v| v * scale + shift),
    };
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite { op });
    }
    Ok(out)
}

/// True when `perm` contains every index `0..perm.len()` exactly once.
pub(crate) fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn reduce_rows(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, v) in g.iter().enumerate() {
        out[i % cols] += v;
    }
    out
}

/// Input gradients of one primitive given its output gradient.
fn vjp(
    prim: &Primitive,
    xs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    want: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut res: Vec<Option<Vec<f64>>> = vec![None; xs.len()];
    match prim {
        Primitive::Add | Primitive::Sub => {
            let sign = if *prim == Primitive::Add { 1.0 } else { -1.0 };
            if want[0] {
                res[0] = Some(g.to_vec());
            }
            if want[1] {
                let gb: Vec<f64> = if xs[0].shape() == xs[1].shape() {
                    g.iter().map(|v| sign * v).collect()
                } else {
                    reduce_rows(g, xs[1].len()).into_iter().map(|v| sign * v).collect()
                };
                res[1] = Some(gb);
            }
        }
        Primitive::Mul => {
            let (a, b) = (xs[0].data(), xs[1].data());
            let same = xs[0].shape() == xs[1].shape();
            let cols = xs[1].len();
            if want[0] {
                res[0] = Some(
                    g.iter()
                        .enumerate()
                        .map(|(i, v)| v * if same { b[i] } else { b[i % cols] })
                        .collect(),
                );
            }
            if want[1] {
                let prod: Vec<f64> = g.iter().zip(a).map(|(v, x)| v * x).collect();
                res[1] = Some(if same { prod } else { reduce_rows(&prod, cols) });
            }
        }
        Primitive::MatMul => {
            let (m, k) = (xs[0].shape()[0], xs[0].shape()[1]);
            let n = xs[1].shape()[1];
            let (a, b) = (xs[0].data(), xs[1].data());
            if want[0] {
                // g · bᵀ
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                res[0] = Some(ga);
            }
            if want[1] {
                // aᵀ · g
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                res[1] = Some(gb);
            }
        }
        Primitive::Tanh => {
            res[0] = Some(g.iter().zip(out.data()).map(|(v, y)| v * (1.0 - y * y)).collect());
        }
        Primitive::Exp => {
            res[0] = Some(g.iter().zip(out.data()).map(|(v, y)| v * y).collect());
        }
        Primitive::Log => {
            res[0] = Some(g.iter().zip(xs[0].data()).map(|(v, x)| v / x).collect());
        }
        Primitive::Square => {
            res[0] = Some(g.iter().zip(xs[0].data()).map(|(v, x)| 2.0 * x * v).collect());
        }
        Primitive::Sum => res[0] = Some(vec![g[0]; xs[0].len()]),
        Primitive::Mean => res[0] = Some(vec![g[0] / xs[0].len() as f64; xs[0].len()]),
        Primitive::Conv2dValid => {
            let (h, w) = (xs[0].shape()[0], xs[0].shape()[1]);
            let (kh, kw) = (xs[1].shape()[0], xs[1].shape()[1]);
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let (x, k) = (xs[0].data(), xs[1].data());
            if want[0] {
                let mut gx = vec![0.0; h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = g[i * ow + j];
                        for a in 0..kh {
                            for b in 0..kw {
                                gx[(i + a) * w + j + b] += gv * k[a * kw + b];
                            }
                        }
                    }
                }
                res[0] = Some(gx);
            }
            if want[1] {
                let mut gk = vec![0.0; kh * kw];
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = g[i * ow + j];
                        for a in 0..kh {
                            for b in 0..kw {
                                gk[a * kw + b] += gv * x[(i + a) * w + j + b];
                            }
                        }
                    }
                }
                res[1] = Some(gk);
            }
        }
        Primitive::DownsampleStride(s) => {
            let (h, w) = (xs[0].shape()[0], xs[0].shape()[1]);
            let ow = w.div_ceil(*s);
            let mut gx = vec![0.0; h * w];
            for (idx, gv) in g.iter().enumerate() {
                let (i, j) = (idx / ow, idx % ow);
                gx[i * s * w + j * s] = *gv;
            }
            res[0] = Some(gx);
        }
        Primitive::Slice { start, end } => {
            let c = xs[0].cols();
            let width = end - start;
            let mut gx = vec![0.0; xs[0].len()];
            for r in 0..xs[0].rows() {
                gx[r * c + start..r * c + end].copy_from_slice(&g[r * width..(r + 1) * width]);
            }
            res[0] = Some(gx);
        }
        Primitive::Concat => {
            let total = out.cols();
            let mut offset = 0;
            for (idx, x) in xs.iter().enumerate() {
                let c = x.cols();
                if want[idx] {
                    let mut gx = Vec::with_capacity(x.len());
                    for r in 0..x.rows() {
                        gx.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    res[idx] = Some(gx);
                }
                offset += c;
            }
        }
        Primitive::Permute(perm) => {
            let c = perm.len();
            let mut gx = vec![0.0; xs[0].len()];
            for r in 0..xs[0].rows() {
                for (j, &p) in perm.iter().enumerate() {
                    gx[r * c + p] += g[r * c + j];
                }
            }
            res[0] = Some(gx);
        }
        Primitive::ScaleShift { scale, .. } => {
            res[0] = Some(g.iter().map(|v| v * scale).collect());
        }
    }
    res
}

/// Gradients produced by one backward sweep, keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::leaf`].
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<(Primitive, Vec<Var>)>, requires_grad: bool, is_leaf: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, true, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, false, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Applies `prim` to `inputs` and appends the result.
    pub fn record(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, DiffError> {
        arity(&prim, inputs.len())?;
        let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&prim, &xs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Some((prim, inputs.to_vec())), requires_grad, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Log, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Mean, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Square, &[a])
    }

    pub fn conv2d_valid(&mut self, x: Var, k: Var) -> Result<Var, DiffError> {
        self.record(Primitive::Conv2dValid, &[x, k])
    }

    pub fn downsample(&mut self, x: Var, stride: usize) -> Result<Var, DiffError> {
        self.record(Primitive::DownsampleStride(stride), &[x])
    }

    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        self.record(Primitive::Slice { start, end }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        self.record(Primitive::Concat, parts)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, DiffError> {
        self.record(Primitive::Permute(perm.to_vec()), &[x])
    }

    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        self.record(Primitive::ScaleShift { scale, shift }, &[x])
    }

    /// Gradients of a scalar `loss` with respect to every [`Tape::leaf`].
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let value = &self.nodes[loss.0].value;
        if !value.is_scalar() {
            return Err(DiffError::NonScalarLoss(value.shape().to_vec()));
        }
        self.backward_seeded(loss, &[1.0])
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back to every [`Tape::leaf`].
    pub fn backward_seeded(&self, output: Var, seed: &[f64]) -> Result<Gradients, DiffError> {
        let out_len = self.nodes[output.0].value.len();
        if seed.len() != out_len {
            return Err(DiffError::Shape {
                op: "backward",
                lhs: self.nodes[output.0].value.shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                None => {
                    if node.is_leaf {
                        leaves[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                    }
                }
                Some((prim, inputs)) => {
                    let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let want: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let partials = vjp(prim, &xs, &node.value, &g, &want);
                    for (input, partial) in inputs.iter().zip(partials) {
                        if let Some(p) = partial {
                            if p.iter().any(|v| !v.is_finite()) {
                                return Err(DiffError::NonFinite { op: prim.name() });
                            }
                            accumulate(&mut grads[input.0], p);
                        }
                    }
                }
            }
        }
        // Leaves the loss does not depend on get zero gradients.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad && leaves[idx].is_none() {
                leaves[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[3, 1], &[1., 0., -1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn matmul_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            DiffError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn tanh_of_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![3, 2]));
        let b = tape.tanh(a).unwrap();
        assert!(tape.value(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_valid_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![5, 5]));
        let k = tape.constant(Tensor::zeros(vec![3, 3]));
        let y = tape.conv2d_valid(x, k).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 3]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 7., 1.]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn log_of_zero_names_primitive() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 1.0]));
        assert_eq!(tape.log(x).unwrap_err(), DiffError::NonFinite { op: "log" });
    }

    #[test]
    fn non_finite_tensor_rejected() {
        assert!(Tensor::vector(alloc::vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(alloc::vec![2, 2], alloc::vec![0.0; 3]).is_err());
    }

    #[test]
    fn row_broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2], &[10., 20.]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11., 22., 13., 24.]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn downsample_keeps_upper_left() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = tape.downsample(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2]);
        assert_eq!(tape.value(y).data(), &[1., 3., 7., 9.]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let unused = tape.leaf(t(&[3], &[1., 2., 3.]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn permutation_check() {
        assert!(is_permutation(&[2, 0, 1]));
        assert!(!is_permutation(&[0, 0, 1]));
        assert!(!is_permutation(&[0, 3, 1]));
    }
}
