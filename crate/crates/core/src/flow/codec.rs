//! Binary model format.
//!
//! ```text
//! "FKP1" | scale u8 | D u32 | blocks u8
//! per block:
//!   log-scale[D] f64 | shift[D] f64 | running mean[D] f64 | running var[D] f64
//!   perm[D] u32
//!   scale net: layers u8, per layer rows u32 | cols u32 | weights f64[rows·cols] | biases f64[cols]
//!   shift net: same layout
//!   scale cap: n u32 | f64[n]
//! ```
//!
//! All integers and reals are little-endian.

use alloc::vec::Vec;

use super::{validate_block, Dense, FlowBlock, FlowError, FlowModel, Mlp, Normalization};

pub const MAGIC: &[u8; 4] = b"FKP1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid value at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: &'static str },
    #[error("{0} trailing bytes after the last block")]
    Trailing(usize),
    #[error("only frozen models can be saved")]
    NotFrozen,
    #[error("model rejected: {0}")]
    Model(FlowError),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn reals(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn mlp(&mut self, net: &Mlp) {
        self.u8(net.layers.len() as u8);
        for l in &net.layers {
            self.u32(l.rows as u32);
            self.u32(l.cols as u32);
            self.reals(&l.weights);
            self.reals(&l.biases);
        }
    }
}

pub fn save(model: &FlowModel) -> Result<Vec<u8>, CodecError> {
    if !model.is_frozen() {
        return Err(CodecError::NotFrozen);
    }
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u8(model.scale() as u8);
    w.u32(model.dim() as u32);
    w.u8(model.blocks().len() as u8);
    for b in model.blocks() {
        w.reals(&b.norm.log_scale);
        w.reals(&b.norm.shift);
        w.reals(&b.norm.running_mean);
        w.reals(&b.norm.running_var);
        for &p in &b.perm {
            w.u32(p as u32);
        }
        w.mlp(&b.scale_net);
        w.mlp(&b.shift_net);
        w.u32(b.scale_cap.len() as u32);
        w.reals(&b.scale_cap);
    }
    Ok(w.0)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn reals(&mut self, n: usize) -> Result<Vec<f64>, CodecError> {
        let start = self.pos;
        let raw = self.take(n.checked_mul(8).ok_or(CodecError::Invalid {
            offset: start,
            reason: "length overflow",
        })?)?;
        let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CodecError::Invalid {
                offset: start,
                reason: "non-finite real",
            });
        }
        Ok(v)
    }
    fn mlp(&mut self) -> Result<Mlp, CodecError> {
        let at = self.pos;
        let n = self.u8()? as usize;
        if n == 0 {
            return Err(CodecError::Invalid {
                offset: at,
                reason: "network without layers",
            });
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.pos;
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err(CodecError::Invalid {
                    offset: at,
                    reason: "empty layer",
                });
            }
            let weights = self.reals(rows * cols)?;
            let biases = self.reals(cols)?;
            layers.push(Dense {
                rows,
                cols,
                weights,
                biases,
            });
        }
        Ok(Mlp { layers })
    }
}

pub fn load(bytes: &[u8]) -> Result<FlowModel, CodecError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let scale = r.u8()? as u32;
    let dim_at = r.pos;
    let dim = r.u32()? as usize;
    if dim < 2 || dim > 1 << 20 {
        return Err(CodecError::Invalid {
            offset: dim_at,
            reason: "latent dimension out of range",
        });
    }
    let count_at = r.pos;
    let count = r.u8()? as usize;
    if count == 0 {
        return Err(CodecError::Invalid {
            offset: count_at,
            reason: "model without blocks",
        });
    }
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let block_at = r.pos;
        let norm = Normalization {
            log_scale: r.reals(dim)?,
            shift: r.reals(dim)?,
            running_mean: r.reals(dim)?,
            running_var: r.reals(dim)?,
        };
        let mut perm = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = r.pos;
            let p = r.u32()? as usize;
            if p >= dim {
                return Err(CodecError::Invalid {
                    offset: at,
                    reason: "permutation index out of range",
                });
            }
            perm.push(p);
        }
        let scale_net = r.mlp()?;
        let shift_net = r.mlp()?;
        let cap_len = r.u32()? as usize;
        if cap_len > dim {
            return Err(CodecError::Invalid {
                offset: r.pos - 4,
                reason: "scale cap longer than the dimension",
            });
        }
        let scale_cap = r.reals(cap_len)?;
        blocks.push((block_at, FlowBlock {
            norm,
            perm,
            scale_net,
            shift_net,
            scale_cap,
        }));
    }
    if r.pos != bytes.len() {
        return Err(CodecError::Trailing(bytes.len() - r.pos));
    }
    for (b, (at, block)) in blocks.iter().enumerate() {
        validate_block(dim, b, block).map_err(|reason| CodecError::Invalid { offset: *at, reason })?;
    }
    FlowModel::from_blocks(scale, dim, blocks.into_iter().map(|(_, b)| b).collect(), true).map_err(CodecError::Model)
}
