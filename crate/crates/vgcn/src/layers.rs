//! Layer forwards.
//!
//! Conventions shared by every layer:
//! - Spatial features are `[N, C]` (rows are nodes); aggregation is
//!   left-multiplication `Â S`, so a row of an attention matrix is the
//!   receiving node.
//! - Spatiotemporal features are `[C, T, N]`; node aggregation is
//!   right-multiplication along the node axis, `S (Â_p + M_p)`, so rows of
//!   block attention matrices are source nodes and columns destinations.
//! - Batch normalization sites are named so running statistics can be
//!   tracked per site; `bn: None` substitutes the identity.

pub mod det;
pub mod ua;
pub mod var;

use crate::config::Activation;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Apply a configured activation; `RowSoftmax` normalizes the last axis.
pub fn apply_activation(tape: &Tape, x: &Tensor, a: Activation) -> Result<Tensor> {
    match a {
        Activation::Identity => Ok(x.clone()),
        Activation::Relu => Ok(tape.relu(x)),
        Activation::Tanh => Ok(tape.tanh(x)),
        Activation::Softplus => Ok(tape.softplus(x)),
        Activation::RowSoftmax => {
            let rank = x.shape().len();
            if rank == 0 {
                return Err(Error::shape("softmax needs at least one axis"));
            }
            tape.softmax(x, rank - 1)
        }
    }
}

/// Mix node features: `out[c,t,w] = Σ_v s[c,t,v] b[v,w]` for `s: [C,T,N]`.
pub fn node_mix(tape: &Tape, s: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c, t, n) = st_dims(s)?;
    if b.shape() != [n, n] {
        return Err(Error::shape(format!(
            "node mixing matrix must be [{n}, {n}], got {:?}",
            b.shape()
        )));
    }
    let flat = tape.reshape(s, vec![c * t, n])?;
    let mixed = tape.matmul(&flat, b)?;
    tape.reshape(&mixed, vec![c, t, n])
}

/// 1×1 convolution over channels: `out[o,t,n] = Σ_c w[c,o] s[c,t,n]`.
pub fn channel_transform(tape: &Tape, s: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (c, t, n) = st_dims(s)?;
    if w.shape().len() != 2 || w.shape()[0] != c {
        return Err(Error::shape(format!(
            "channel transform expects [{c}, C_out] weights, got {:?}",
            w.shape()
        )));
    }
    let c_out = w.shape()[1];
    let wt = tape.transpose(w)?;
    let flat = tape.reshape(s, vec![c, t * n])?;
    let out = tape.matmul(&wt, &flat)?;
    tape.reshape(&out, vec![c_out, t, n])
}

pub(crate) fn st_dims(s: &Tensor) -> Result<(usize, usize, usize)> {
    if s.shape().len() != 3 {
        return Err(Error::shape(format!(
            "expected [C, T, N] input, got {:?}",
            s.shape()
        )));
    }
    Ok((s.shape()[0], s.shape()[1], s.shape()[2]))
}

/// Channel-matching skip connection: identity when the widths already
/// agree, otherwise a learned linear map along the channel axis.
pub fn skip_transform(tape: &Tape, s: &Tensor, w_xi: Option<&Tensor>, c_out: usize) -> Result<Tensor> {
    let c_in = match s.shape().len() {
        2 => s.shape()[1],
        3 => s.shape()[0],
        _ => {
            return Err(Error::shape(format!(
                "skip transform expects [N, C] or [C, T, N], got {:?}",
                s.shape()
            )))
        }
    };
    if c_in == c_out {
        return Ok(s.clone());
    }
    let w = w_xi.ok_or_else(|| {
        Error::config(format!(
            "channel widths differ ({c_in} -> {c_out}) but no channel-match weights were provided"
        ))
    })?;
    if w.shape() != [c_in, c_out] {
        return Err(Error::shape(format!(
            "channel-match weights must be [{c_in}, {c_out}], got {:?}",
            w.shape()
        )));
    }
    match s.shape().len() {
        2 => tape.matmul(s, w),
        _ => channel_transform(tape, s, w),
    }
}

/// One batch-normalization site.
#[derive(Debug, Clone)]
pub struct BnParams {
    /// Site name, used to key running-statistics updates.
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    /// Batch statistics when true; running statistics otherwise.
    pub train: bool,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

/// Batch statistics observed at a site during one training forward.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Apply a BN site, or the identity when the site is disabled.
pub fn apply_bn(
    tape: &Tape,
    x: &Tensor,
    bn: Option<&BnParams>,
    updates: &mut Vec<BnUpdate>,
) -> Result<Tensor> {
    let Some(bn) = bn else {
        return Ok(x.clone());
    };
    if bn.train {
        let (out, mean, var) = tape.batch_norm_train(x, &bn.gamma, &bn.beta, bn.eps)?;
        updates.push(BnUpdate {
            name: bn.name.clone(),
            mean,
            var,
        });
        Ok(out)
    } else {
        tape.batch_norm_eval(x, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var, bn.eps)
    }
}
