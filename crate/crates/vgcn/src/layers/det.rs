//! Deterministic layer and block forwards: GCN, GAT, ST-GCN, AGCN.

use crate::config::{Activation, MaskMode};
use crate::error::{Error, Result};
use crate::graph::PartitionedAdjacency;
use crate::layers::{
    apply_activation, apply_bn, channel_transform, node_mix, skip_transform, st_dims, BnParams,
    BnUpdate,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── GCN ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GcnLayerParams {
    /// `C_in × C_out` weight matrix.
    pub w: Tensor,
}

/// `ρ(Â S W)` for spatial features `S: [N, C_in]`.
pub fn gcn_forward(
    tape: &Tape,
    s: &Tensor,
    a_hat: &Tensor,
    params: &GcnLayerParams,
    rho: Activation,
) -> Result<Tensor> {
    let agg = tape.matmul(a_hat, s)?;
    let h = tape.matmul(&agg, &params.w)?;
    apply_activation(tape, &h, rho)
}

// ── GAT ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GatLayerParams {
    /// `C_in × C_out` weight matrix.
    pub w: Tensor,
    /// Attention weight vectors, length `C_out`.
    pub w_s: Tensor,
    pub w_d: Tensor,
    pub mask_mode: MaskMode,
}

/// Attention mask as a plain matrix: `1 − A` (complement) or `A` (direct).
pub fn attention_mask(a: &Tensor, mode: MaskMode) -> Tensor {
    let v: Vec<f64> = a
        .values()
        .iter()
        .map(|&x| match mode {
            MaskMode::Complement => 1.0 - x,
            MaskMode::Direct => x,
        })
        .collect();
    Tensor::new(a.shape().to_vec(), v).expect("same shape")
}

fn as_column(tape: &Tape, v: &Tensor) -> Result<Tensor> {
    match v.shape().len() {
        1 => tape.reshape(v, vec![v.shape()[0], 1]),
        2 if v.shape()[1] == 1 => Ok(v.clone()),
        _ => Err(Error::shape(format!(
            "attention weights must be a vector, got {:?}",
            v.shape()
        ))),
    }
}

/// Raw GAT attention scores and the masked attention matrix:
/// `Ŝ = S W`, `λ_s = tanh(Ŝ) w_s`, `λ_d = tanh(Ŝ) w_d`,
/// `Λ = ρ_Λ(λ_s λ_dᵀ) ⊙ mask`.
pub fn gat_attention(
    tape: &Tape,
    s_hat: &Tensor,
    params: &GatLayerParams,
    a: &Tensor,
    rho_lambda: Activation,
) -> Result<Tensor> {
    let th = tape.tanh(s_hat);
    let ws = as_column(tape, &params.w_s)?;
    let wd = as_column(tape, &params.w_d)?;
    let lam_s = tape.matmul(&th, &ws)?; // [N, 1]
    let lam_d = tape.matmul(&th, &wd)?; // [N, 1]
    let lam_d_row = tape.transpose(&lam_d)?; // [1, N]
    let raw = tape.matmul(&lam_s, &lam_d_row)?; // [N, N]
    let activated = apply_activation(tape, &raw, rho_lambda)?;
    let mask = attention_mask(a, params.mask_mode);
    tape.mul(&activated, &mask)
}

/// `(ρ(Λ) Ŝ, Λ)` for spatial features `S: [N, C_in]` and binary `A`.
pub fn gat_forward(
    tape: &Tape,
    s: &Tensor,
    a: &Tensor,
    params: &GatLayerParams,
    rho: Activation,
    rho_lambda: Activation,
) -> Result<(Tensor, Tensor)> {
    let s_hat = tape.matmul(s, &params.w)?;
    let lambda = gat_attention(tape, &s_hat, params, a, rho_lambda)?;
    let fused = apply_activation(tape, &lambda, rho)?;
    let out = tape.matmul(&fused, &s_hat)?;
    Ok((out, lambda))
}

// ── ST-GCN block ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StgcnBlockParams {
    /// Per-partition `C_in × C_out` weights.
    pub w: [Tensor; 3],
    /// Per-partition learnable `N × N` attention matrices.
    pub m: [Tensor; 3],
    /// `C_out × C_out × K_t` temporal kernel.
    pub tc_kernel: Tensor,
    pub stride: usize,
    /// Channel-match weights for the residual path when `C_in ≠ C_out`.
    pub xi: Option<Tensor>,
    pub bn: Option<BnParams>,
    pub rho: Activation,
}

fn check_three_partitions(parts: &PartitionedAdjacency) -> Result<()> {
    // The type owns exactly 3 by construction; guard against mismatched N.
    let n = parts.n_nodes();
    for p in &parts.normalized {
        if p.shape() != [n, n] {
            return Err(Error::config("partition matrices must all be N×N"));
        }
    }
    Ok(())
}

/// Spatial aggregation of an ST-GCN block, before temporal convolution:
/// `G = Σ_p S (Â_p ⊙ M_p) W_p` over the node axis.
pub fn stgcn_spatial(
    tape: &Tape,
    s: &Tensor,
    parts: &PartitionedAdjacency,
    w: &[Tensor; 3],
    m: &[Tensor; 3],
) -> Result<Tensor> {
    check_three_partitions(parts)?;
    let mut acc: Option<Tensor> = None;
    for p in 0..3 {
        let gated = tape.mul(&parts.normalized[p], &m[p])?;
        let mixed = node_mix(tape, s, &gated)?;
        let h = channel_transform(tape, &mixed, &w[p])?;
        acc = Some(match acc {
            None => h,
            Some(a) => tape.add(&a, &h)?,
        });
    }
    Ok(acc.expect("three partitions"))
}

/// `ρ(Ξ(S) + BN(TC(G)))` with `G` from [`stgcn_spatial`].
pub fn stgcn_block_forward(
    tape: &Tape,
    s: &Tensor,
    parts: &PartitionedAdjacency,
    params: &StgcnBlockParams,
    bn_updates: &mut Vec<BnUpdate>,
) -> Result<Tensor> {
    let (_, _, _) = st_dims(s)?;
    let c_out = params.w[0].shape()[1];
    let g = stgcn_spatial(tape, s, parts, &params.w, &params.m)?;
    let tcg = tape.temporal_conv(&g, &params.tc_kernel, params.stride)?;
    let normed = apply_bn(tape, &tcg, params.bn.as_ref(), bn_updates)?;
    let mut residual = skip_transform(tape, s, params.xi.as_ref(), c_out)?;
    if params.stride > 1 {
        residual = tape.stride_time(&residual, params.stride)?;
    }
    let summed = tape.add(&residual, &normed)?;
    apply_activation(tape, &summed, params.rho)
}

// ── AGCN block ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AgcnBlockParams {
    /// Per-partition 1×1 conv (`C_in × C_out`) applied after node mixing.
    pub w_z: [Tensor; 3],
    /// Per-partition learned `N × N` attention.
    pub w_m: [Tensor; 3],
    /// Per-partition embedding convolutions (`C_in × C_e`).
    pub w_1: [Tensor; 3],
    pub w_2: [Tensor; 3],
    pub tc_kernel: Tensor,
    pub stride: usize,
    pub xi: Option<Tensor>,
    /// Channel-match for the inner residual when `C_in ≠ C_out`.
    pub channel_match: Option<Tensor>,
    pub bn_inner: Option<BnParams>,
    pub bn_outer: Option<BnParams>,
    pub rho: Activation,
}

/// Data-dependent attention `B_p = softmax(B_{1,p}ᵀ B_{2,p}) / N`:
/// embeddings are flattened over channels and time, the softmax runs over
/// the destination (second) node index, so every row sums to `1/N`.
pub fn agcn_data_attention(
    tape: &Tape,
    s: &Tensor,
    w_1: &Tensor,
    w_2: &Tensor,
) -> Result<Tensor> {
    if w_1.shape().len() != 2 || w_2.shape().len() != 2 || w_1.shape()[1] != w_2.shape()[1] {
        return Err(Error::config(format!(
            "embedding widths differ: {:?} vs {:?}",
            w_1.shape(),
            w_2.shape()
        )));
    }
    let (_, t, n) = st_dims(s)?;
    let c_e = w_1.shape()[1];
    let b1 = channel_transform(tape, s, w_1)?; // [C_e, T, N]
    let b2 = channel_transform(tape, s, w_2)?;
    let b1_flat = tape.reshape(&b1, vec![c_e * t, n])?;
    let b2_flat = tape.reshape(&b2, vec![c_e * t, n])?;
    let b1_nodes = tape.transpose(&b1_flat)?; // [N, C_e*T]
    let raw = tape.matmul(&b1_nodes, &b2_flat)?; // [N, N]
    let soft = tape.softmax(&raw, 1)?;
    Ok(tape.scale(&soft, 1.0 / n as f64))
}

/// Spatial half of an AGCN block:
/// `M_p = W^M_p + B_p`; `Z_p = conv(S (Â_p + M_p), W_{z,p})`;
/// `G = ChannelMatch(S) + BN(Σ_p Z_p)`. Returns `G` and the per-partition
/// attentions `Â_p + M_p`.
pub struct AgcnSpatialOut {
    pub g: Tensor,
    pub attentions: [Tensor; 3],
}

#[allow(clippy::too_many_arguments)]
pub fn agcn_spatial(
    tape: &Tape,
    s: &Tensor,
    parts: &PartitionedAdjacency,
    w_z: &[Tensor; 3],
    w_m: &[Tensor; 3],
    w_1: &[Tensor; 3],
    w_2: &[Tensor; 3],
    channel_match: Option<&Tensor>,
    bn_inner: Option<&BnParams>,
    bn_updates: &mut Vec<BnUpdate>,
) -> Result<AgcnSpatialOut> {
    check_three_partitions(parts)?;
    let c_out = w_z[0].shape()[1];
    let mut acc: Option<Tensor> = None;
    let mut attentions = Vec::with_capacity(3);
    for p in 0..3 {
        let b = agcn_data_attention(tape, s, &w_1[p], &w_2[p])?;
        let m = tape.add(&w_m[p], &b)?;
        let attn = tape.add(&parts.normalized[p], &m)?;
        let mixed = node_mix(tape, s, &attn)?;
        let z = channel_transform(tape, &mixed, &w_z[p])?;
        acc = Some(match acc {
            None => z,
            Some(a) => tape.add(&a, &z)?,
        });
        attentions.push(attn);
    }
    let z_sum = acc.expect("three partitions");
    let normed = apply_bn(tape, &z_sum, bn_inner, bn_updates)?;
    let residual = skip_transform(tape, s, channel_match, c_out)?;
    let g = tape.add(&residual, &normed)?;
    let attentions: [Tensor; 3] = attentions.try_into().expect("three partitions");
    Ok(AgcnSpatialOut { g, attentions })
}

/// `ρ(Ξ(S) + BN(TC(G)))` over the AGCN spatial output; returns the block
/// output and the per-partition attentions.
pub fn agcn_block_forward(
    tape: &Tape,
    s: &Tensor,
    parts: &PartitionedAdjacency,
    params: &AgcnBlockParams,
    bn_updates: &mut Vec<BnUpdate>,
) -> Result<(Tensor, [Tensor; 3])> {
    let c_out = params.w_z[0].shape()[1];
    let spatial = agcn_spatial(
        tape,
        s,
        parts,
        &params.w_z,
        &params.w_m,
        &params.w_1,
        &params.w_2,
        params.channel_match.as_ref(),
        params.bn_inner.as_ref(),
        bn_updates,
    )?;
    let tcg = tape.temporal_conv(&spatial.g, &params.tc_kernel, params.stride)?;
    let normed = apply_bn(tape, &tcg, params.bn_outer.as_ref(), bn_updates)?;
    let mut residual = skip_transform(tape, s, params.xi.as_ref(), c_out)?;
    if params.stride > 1 {
        residual = tape.stride_time(&residual, params.stride)?;
    }
    let summed = tape.add(&residual, &normed)?;
    let out = apply_activation(tape, &summed, params.rho)?;
    Ok((out, spatial.attentions))
}

/// Identity temporal kernel: `K_t = 1`, channel-diagonal.
pub fn identity_tc_kernel(c: usize) -> Tensor {
    let mut v = vec![0.0; c * c];
    for i in 0..c {
        v[i * c + i] = 1.0;
    }
    Tensor::new(vec![c, c, 1], v).expect("c*c values")
}
