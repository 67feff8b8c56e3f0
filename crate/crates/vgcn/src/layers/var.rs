//! Variational layers: Gaussian-parametrizing sub-layer pairs with
//! reparametrized sampling (VGCN, VGAT, VSTGCN, VAGCN).
//!
//! Every sampling site produces `variance = softplus(ρ^σ(raw) + bias) +
//! floor`, so realized variance is strictly positive for arbitrary
//! parameters and a very negative bias pins the site at the floor
//! (the deterministic limit). In global-scalar mode the σ sub-layer is
//! replaced by one learnable scalar per site.

use crate::config::Activation;
use crate::error::{Error, Result};
use crate::graph::PartitionedAdjacency;
use crate::layers::det::{
    agcn_spatial, gat_attention, gcn_forward, stgcn_spatial, GatLayerParams, GcnLayerParams,
};
use crate::layers::{apply_activation, apply_bn, skip_transform, BnParams, BnUpdate};
use crate::rng::RandomStream;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Additive variance floor; keeps every Gaussian nondegenerate.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Bias value that pins a variance site at (numerically exactly) the floor.
pub const FLOOR_BIAS: f64 = -40.0;

/// Inverse of softplus: `x` such that `ln(1+e^x) = y`, clamped so `y = 0`
/// maps to [`FLOOR_BIAS`] instead of −∞.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else if y <= 0.0 {
        FLOOR_BIAS
    } else {
        y.exp_m1().ln().max(FLOOR_BIAS)
    }
}

/// How one sampling site turns σ-branch output into a positive variance.
#[derive(Debug, Clone)]
pub enum VarianceSpec {
    /// `softplus(ρ^σ(raw) + bias) + floor`, elementwise over the σ-branch
    /// output. `bias` is a scalar parameter.
    PerElement { bias: Tensor },
    /// `softplus(scale) + floor` broadcast to the output shape; the σ
    /// sub-layer is absent.
    GlobalScalar { scale: Tensor },
}

/// Variance of a per-element site given the raw σ-branch output.
pub fn var_head(
    tape: &Tape,
    raw: &Tensor,
    bias: &Tensor,
    rho_sigma: Activation,
) -> Result<Tensor> {
    let pre = apply_activation(tape, raw, rho_sigma)?;
    let shifted = tape.add(&pre, bias)?;
    let sp = tape.softplus(&shifted);
    Ok(tape.add_scalar(&sp, VARIANCE_FLOOR))
}

/// Variance of a global-scalar site, broadcast to `shape`.
pub fn var_head_global(tape: &Tape, shape: &[usize], scale: &Tensor) -> Result<Tensor> {
    let sp = tape.softplus(scale);
    let ones = Tensor::ones(shape.to_vec());
    let broad = tape.mul(&ones, &sp)?;
    Ok(tape.add_scalar(&broad, VARIANCE_FLOOR))
}

/// Reparametrized draw: `mean + sqrt(variance) ⊙ ε`, `ε ~ N(0, I)` held
/// constant, so gradients flow through mean and variance.
pub fn gaussian_sample(
    tape: &Tape,
    mean: &Tensor,
    variance: &Tensor,
    rng: &mut RandomStream,
) -> Result<Tensor> {
    if mean.shape() != variance.shape() {
        return Err(Error::shape(format!(
            "mean shape {:?} differs from variance shape {:?}",
            mean.shape(),
            variance.shape()
        )));
    }
    if variance.values().iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::contract(
            "variance must be strictly positive everywhere (the variance head guarantees this)",
        ));
    }
    let eps = rng.normal_tensor(mean.shape().to_vec());
    let std = tape.sqrt(variance);
    let noise = tape.mul(&std, &eps)?;
    tape.add(mean, &noise)
}

/// Draw source for variational forwards; the debug flag substitutes the
/// mean everywhere.
pub struct Sampler {
    pub rng: RandomStream,
    pub deterministic: bool,
}

impl Sampler {
    pub fn new(rng: RandomStream) -> Sampler {
        Sampler {
            rng,
            deterministic: false,
        }
    }

    pub fn deterministic(rng: RandomStream) -> Sampler {
        Sampler {
            rng,
            deterministic: true,
        }
    }

    pub fn draw(&mut self, tape: &Tape, mean: &Tensor, variance: &Tensor) -> Result<Tensor> {
        if self.deterministic {
            return Ok(mean.clone());
        }
        gaussian_sample(tape, mean, variance, &mut self.rng)
    }
}

/// Activation placements shared by all variational layers.
#[derive(Debug, Clone, Copy)]
pub struct VarActivations {
    /// ρ^μ on the mean branch.
    pub mu: Activation,
    /// ρ^σ before the variance head.
    pub sigma: Activation,
    /// ρ^N on the drawn sample.
    pub noise: Activation,
}

impl Default for VarActivations {
    fn default() -> Self {
        VarActivations {
            mu: Activation::Identity,
            sigma: Activation::Identity,
            noise: Activation::Identity,
        }
    }
}

fn require_sigma<'a, T>(sigma: &'a Option<T>, what: &str) -> Result<&'a T> {
    sigma.as_ref().ok_or_else(|| {
        Error::contract(format!(
            "{what} needs σ-branch parameters in per-element variance mode"
        ))
    })
}

// ── VGCN ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct VgcnParams {
    pub mu: GcnLayerParams,
    /// Absent in global-scalar mode.
    pub sigma: Option<GcnLayerParams>,
    pub variance: VarianceSpec,
}

/// `ρ^N(sample from N(ρ^μ(Â S W^μ), VarHead(Â S W^σ)))`.
pub fn vgcn_forward(
    tape: &Tape,
    s: &Tensor,
    a_hat: &Tensor,
    p: &VgcnParams,
    acts: &VarActivations,
    sampler: &mut Sampler,
) -> Result<Tensor> {
    let mean = gcn_forward(tape, s, a_hat, &p.mu, acts.mu)?;
    let variance = match &p.variance {
        VarianceSpec::PerElement { bias } => {
            let sig = require_sigma(&p.sigma, "vgcn")?;
            let raw = gcn_forward(tape, s, a_hat, sig, Activation::Identity)?;
            var_head(tape, &raw, bias, acts.sigma)?
        }
        VarianceSpec::GlobalScalar { scale } => var_head_global(tape, mean.shape(), scale)?,
    };
    let drawn = sampler.draw(tape, &mean, &variance)?;
    apply_activation(tape, &drawn, acts.noise)
}

// ── VGAT ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct VgatParams {
    pub mu: GatLayerParams,
    pub sigma: Option<GatLayerParams>,
    pub variance: VarianceSpec,
}

/// Output of one VGAT layer: the sampled features plus both branch
/// attention matrices (`Λ^μ`, and `Λ^σ` when a σ branch exists).
pub struct VgatOut {
    pub out: Tensor,
    pub lambda_mu: Tensor,
    pub lambda_sigma: Option<Tensor>,
}

/// Per-branch GAT computation with sampling between the branches:
/// mean `ρ^μ(ρ(Λ^μ) Ŝ_μ)`, variance `VarHead(ρ(Λ^σ) Ŝ_σ)`.
#[allow(clippy::too_many_arguments)]
pub fn vgat_forward(
    tape: &Tape,
    s: &Tensor,
    a: &Tensor,
    p: &VgatParams,
    acts: &VarActivations,
    rho: Activation,
    rho_lambda: Activation,
    sampler: &mut Sampler,
) -> Result<VgatOut> {
    let s_hat_mu = tape.matmul(s, &p.mu.w)?;
    let lambda_mu = gat_attention(tape, &s_hat_mu, &p.mu, a, rho_lambda)?;
    let fused_mu = apply_activation(tape, &lambda_mu, rho)?;
    let mean_raw = tape.matmul(&fused_mu, &s_hat_mu)?;
    let mean = apply_activation(tape, &mean_raw, acts.mu)?;

    let (variance, lambda_sigma) = match &p.variance {
        VarianceSpec::PerElement { bias } => {
            let sig = require_sigma(&p.sigma, "vgat")?;
            let s_hat_sig = tape.matmul(s, &sig.w)?;
            let lam_sig = gat_attention(tape, &s_hat_sig, sig, a, rho_lambda)?;
            let fused_sig = apply_activation(tape, &lam_sig, rho)?;
            let raw = tape.matmul(&fused_sig, &s_hat_sig)?;
            (var_head(tape, &raw, bias, acts.sigma)?, Some(lam_sig))
        }
        VarianceSpec::GlobalScalar { scale } => {
            (var_head_global(tape, mean.shape(), scale)?, None)
        }
    };
    let drawn = sampler.draw(tape, &mean, &variance)?;
    let out = apply_activation(tape, &drawn, acts.noise)?;
    Ok(VgatOut {
        out,
        lambda_mu,
        lambda_sigma,
    })
}

// ── VSTGCN ───────────────────────────────────────────────────────────

/// One branch (μ or σ) of a variational ST-GCN block.
#[derive(Debug, Clone)]
pub struct StgcnBranch {
    pub w: [Tensor; 3],
    pub m: [Tensor; 3],
    pub tc_kernel: Tensor,
}

#[derive(Debug, Clone)]
pub struct VstgcnBlockParams {
    pub mu: StgcnBranch,
    pub sigma: Option<StgcnBranch>,
    pub spatial_variance: VarianceSpec,
    pub temporal_variance: VarianceSpec,
    pub stride: usize,
    pub xi: Option<Tensor>,
    pub bn: Option<BnParams>,
    pub rho: Activation,
}

/// Two sampling sites per block: spatial
/// `N(ρ^μ(G^μ(S)), VarHead(G^σ(S)))`, then temporal
/// `N(TC^μ(sample), VarHead(TC^σ(sample)))`; output
/// `ρ(Ξ(S) + BN(sample₂))`.
pub fn vstgcn_block_forward(
    tape: &Tape,
    s: &Tensor,
    parts: &PartitionedAdjacency,
    p: &VstgcnBlockParams,
    acts: &VarActivations,
    sampler: &mut Sampler,
    bn_updates: &mut Vec<BnUpdate>,
) -> Result<Tensor> {
    let c_out = p.mu.w[0].shape()[1];

    let g_mu = stgcn_spatial(tape, s, parts, &p.mu.w, &p.mu.m)?;
    let mean_s = apply_activation(tape, &g_mu, acts.mu)?;
    let var_s = match &p.spatial_variance {
        VarianceSpec::PerElement { bias } => {
            let sig = require_sigma(&p.sigma, "vstgcn spatial site")?;
            let g_sig = stgcn_spatial(tape, s, parts, &sig.w, &sig.m)?;
            var_head(tape, &g_sig, bias, acts.sigma)?
        }
        VarianceSpec::GlobalScalar { scale } => var_head_global(tape, mean_s.shape(), scale)?,
    };
    let sample_spatial = sampler.draw(tape, &mean_s, &var_s)?;

    let mean_t = tape.temporal_conv(&sample_spatial, &p.mu.tc_kernel, p.stride)?;
    let var_t = match &p.temporal_variance {
        VarianceSpec::PerElement { bias } => {
            let sig = require_sigma(&p.sigma, "vstgcn temporal site")?;
            let raw = tape.temporal_conv(&sample_spatial, &sig.tc_kernel, p.stride)?;
            var_head(tape, &raw, bias, acts.sigma)?
        }
        VarianceSpec::GlobalScalar { scale } => var_head_global(tape, mean_t.shape(), scale)?,
    };
    let sample_temporal = sampler.draw(tape, &mean_t, &var_t)?;

    let normed = apply_bn(tape, &sample_temporal, p.bn.as_ref(), bn_updates)?;
    let mut residual = skip_transform(tape, s, p.xi.as_ref(), c_out)?;
    if p.stride > 1 {
        residual = tape.stride_time(&residual, p.stride)?;
    }
    let summed = tape.add(&residual, &normed)?;
    apply_activation(tape, &summed, p.rho)
}

// ── VAGCN ────────────────────────────────────────────────────────────

/// One branch (μ or σ) of a variational AGCN block, including its own
/// data-dependent attention and inner residual.
#[derive(Debug, Clone)]
pub struct AgcnBranch {
    pub w_z: [Tensor; 3],
    pub w_m: [Tensor; 3],
    pub w_1: [Tensor; 3],
    pub w_2: [Tensor; 3],
    pub tc_kernel: Tensor,
    pub channel_match: Option<Tensor>,
    pub bn_inner: Option<BnParams>,
}

#[derive(Debug, Clone)]
pub struct VagcnBlockParams {
    pub mu: AgcnBranch,
    pub sigma: Option<AgcnBranch>,
    pub spatial_variance: VarianceSpec,
    pub temporal_variance: VarianceSpec,
    pub stride: usize,
    pub xi: Option<Tensor>,
    pub bn_outer: Option<BnParams>,
    pub rho: Activation,
}

pub struct VagcnOut {
    pub out: Tensor,
    /// Per-partition `Â_p + M^μ_p`.
    pub attn_mu: [Tensor; 3],
    /// Per-partition `Â_p + M^σ_p`; absent in global-scalar mode.
    pub attn_sigma: Option<[Tensor; 3]>,
}

fn agcn_branch_spatial(
    tape: &Tape,
    s: &Tensor,
    parts: &PartitionedAdjacency,
    b: &AgcnBranch,
    bn_updates: &mut Vec<BnUpdate>,
) -> Result<(Tensor, [Tensor; 3])> {
    let out = agcn_spatial(
        tape,
        s,
        parts,
        &b.w_z,
        &b.w_m,
        &b.w_1,
        &b.w_2,
        b.channel_match.as_ref(),
        b.bn_inner.as_ref(),
        bn_updates,
    )?;
    Ok((out.g, out.attentions))
}

/// VAGCN block: per-branch AGCN spatial computation, then the same two
/// sampling sites as VSTGCN; attentions from both branches are returned
/// for uncertainty analysis (they depend on the input).
pub fn vagcn_block_forward(
    tape: &Tape,
    s: &Tensor,
    parts: &PartitionedAdjacency,
    p: &VagcnBlockParams,
    acts: &VarActivations,
    sampler: &mut Sampler,
    bn_updates: &mut Vec<BnUpdate>,
) -> Result<VagcnOut> {
    let c_out = p.mu.w_z[0].shape()[1];

    let (g_mu, attn_mu) = agcn_branch_spatial(tape, s, parts, &p.mu, bn_updates)?;
    let mean_s = apply_activation(tape, &g_mu, acts.mu)?;
    let (var_s, attn_sigma) = match &p.spatial_variance {
        VarianceSpec::PerElement { bias } => {
            let sig = require_sigma(&p.sigma, "vagcn spatial site")?;
            let (g_sig, attn_sig) = agcn_branch_spatial(tape, s, parts, sig, bn_updates)?;
            (var_head(tape, &g_sig, bias, acts.sigma)?, Some(attn_sig))
        }
        VarianceSpec::GlobalScalar { scale } => {
            (var_head_global(tape, mean_s.shape(), scale)?, None)
        }
    };
    let sample_spatial = sampler.draw(tape, &mean_s, &var_s)?;

    let mean_t = tape.temporal_conv(&sample_spatial, &p.mu.tc_kernel, p.stride)?;
    let var_t = match &p.temporal_variance {
        VarianceSpec::PerElement { bias } => {
            let sig = require_sigma(&p.sigma, "vagcn temporal site")?;
            let raw = tape.temporal_conv(&sample_spatial, &sig.tc_kernel, p.stride)?;
            var_head(tape, &raw, bias, acts.sigma)?
        }
        VarianceSpec::GlobalScalar { scale } => var_head_global(tape, mean_t.shape(), scale)?,
    };
    let sample_temporal = sampler.draw(tape, &mean_t, &var_t)?;

    let normed = apply_bn(tape, &sample_temporal, p.bn_outer.as_ref(), bn_updates)?;
    let mut residual = skip_transform(tape, s, p.xi.as_ref(), c_out)?;
    if p.stride > 1 {
        residual = tape.stride_time(&residual, p.stride)?;
    }
    let summed = tape.add(&residual, &normed)?;
    let out = apply_activation(tape, &summed, p.rho)?;
    Ok(VagcnOut {
        out,
        attn_mu,
        attn_sigma,
    })
}
