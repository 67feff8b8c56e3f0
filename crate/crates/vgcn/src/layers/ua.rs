//! Uncertainty-aware attention layers.
//!
//! Both variants consume attention statistics that were integrated over
//! many stochastic forwards and then filtered, instead of the per-forward
//! attention matrices:
//!
//! * **Early Attention (EA)** multiplies the filtered mean attention with
//!   independently sampled node features. The output distribution differs
//!   from VGAT's, so EA models are trained from scratch.
//! * **Filtered Monte-Carlo-Integrated (FMCI)** substitutes the filtered
//!   mean/variance attentions into the two VGAT branches, preserving the
//!   output distribution; it can run on unmodified VGAT weights.

use crate::config::Activation;
use crate::error::{Error, Result};
use crate::layers::apply_activation;
use crate::layers::var::{var_head, var_head_global, Sampler, VarActivations, VarianceSpec, VgatParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

fn require_cached<'a>(cached: Option<&'a Tensor>, what: &str) -> Result<&'a Tensor> {
    cached.ok_or_else(|| {
        Error::state(format!(
            "{what} requires calibrated attention statistics; run the attention \
             integration + filter pass first"
        ))
    })
}

/// Early-attention forward: features are sampled from
/// `N(ρ^μ(S W^μ), VarHead(S W^σ))` and multiplied by the fixed filtered
/// attention, `Ω = ρ(Λ̃^μ_f) ρ^N(sample)`.
#[allow(clippy::too_many_arguments)]
pub fn ua_ea_forward(
    tape: &Tape,
    s: &Tensor,
    p: &VgatParams,
    filtered_mean: Option<&Tensor>,
    acts: &VarActivations,
    rho: Activation,
    sampler: &mut Sampler,
) -> Result<Tensor> {
    let lam = require_cached(filtered_mean, "ua-ea forward")?;
    let s_hat_mu = tape.matmul(s, &p.mu.w)?;
    let mean = apply_activation(tape, &s_hat_mu, acts.mu)?;
    let variance = match &p.variance {
        VarianceSpec::PerElement { bias } => {
            let sig = p.sigma.as_ref().ok_or_else(|| {
                Error::contract("ua-ea needs σ-branch parameters in per-element variance mode")
            })?;
            let s_hat_sig = tape.matmul(s, &sig.w)?;
            var_head(tape, &s_hat_sig, bias, acts.sigma)?
        }
        VarianceSpec::GlobalScalar { scale } => var_head_global(tape, mean.shape(), scale)?,
    };
    let drawn = sampler.draw(tape, &mean, &variance)?;
    let features = apply_activation(tape, &drawn, acts.noise)?;
    let fused = apply_activation(tape, lam, rho)?;
    tape.matmul(&fused, &features)
}

/// FMCI forward: the VGAT computation with the per-forward attention
/// matrices replaced by the filtered pair — mean branch
/// `ρ^μ(ρ(Λ̃^μ_f) S W^μ)`, variance branch `VarHead(ρ(Λ̃^σ_f) S W^σ)`,
/// output `ρ^N(sample)`.
#[allow(clippy::too_many_arguments)]
pub fn ua_fmci_forward(
    tape: &Tape,
    s: &Tensor,
    p: &VgatParams,
    filtered_mean: Option<&Tensor>,
    filtered_variance: Option<&Tensor>,
    acts: &VarActivations,
    rho: Activation,
    sampler: &mut Sampler,
) -> Result<Tensor> {
    let lam_mu = require_cached(filtered_mean, "ua-fmci forward")?;
    let s_hat_mu = tape.matmul(s, &p.mu.w)?;
    let fused_mu = apply_activation(tape, lam_mu, rho)?;
    let mean_raw = tape.matmul(&fused_mu, &s_hat_mu)?;
    let mean = apply_activation(tape, &mean_raw, acts.mu)?;

    let variance = match &p.variance {
        VarianceSpec::PerElement { bias } => {
            let lam_sig = require_cached(filtered_variance, "ua-fmci forward")?;
            let sig = p.sigma.as_ref().ok_or_else(|| {
                Error::contract("ua-fmci needs σ-branch parameters in per-element variance mode")
            })?;
            let s_hat_sig = tape.matmul(s, &sig.w)?;
            let fused_sig = apply_activation(tape, lam_sig, rho)?;
            let raw = tape.matmul(&fused_sig, &s_hat_sig)?;
            var_head(tape, &raw, bias, acts.sigma)?
        }
        VarianceSpec::GlobalScalar { scale } => var_head_global(tape, mean.shape(), scale)?,
    };
    let drawn = sampler.draw(tape, &mean, &variance)?;
    apply_activation(tape, &drawn, acts.noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MaskMode;
    use crate::layers::det::GatLayerParams;
    use crate::layers::var::FLOOR_BIAS;
    use crate::rng::RandomStream;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    fn gat(w: Tensor) -> GatLayerParams {
        GatLayerParams {
            w,
            w_s: Tensor::zeros(vec![2]),
            w_d: Tensor::zeros(vec![2]),
            mask_mode: MaskMode::Complement,
        }
    }

    fn floor_params(w_mu: Tensor, w_sig: Tensor) -> VgatParams {
        VgatParams {
            mu: gat(w_mu),
            sigma: Some(gat(w_sig)),
            variance: VarianceSpec::PerElement {
                bias: Tensor::scalar(FLOOR_BIAS),
            },
        }
    }

    #[test]
    fn ea_missing_cache_is_state_error() {
        let tape = Tape::new();
        let s = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = floor_params(Tensor::eye(2), Tensor::eye(2));
        let mut sampler = Sampler::new(RandomStream::new(0));
        let err = ua_ea_forward(
            &tape,
            &s,
            &p,
            None,
            &VarActivations::default(),
            Activation::Identity,
            &mut sampler,
        )
        .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn ea_zero_attention_annihilates() {
        let tape = Tape::new();
        let s = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = floor_params(Tensor::eye(2), Tensor::eye(2));
        let lam = Tensor::zeros(vec![2, 2]);
        let mut sampler = Sampler::new(RandomStream::new(1));
        let out = ua_ea_forward(
            &tape,
            &s,
            &p,
            Some(&lam),
            &VarActivations::default(),
            Activation::Identity,
            &mut sampler,
        )
        .unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ea_identity_attention_passes_sampled_features() {
        let tape = Tape::new();
        let s = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = floor_params(Tensor::eye(2), Tensor::eye(2));
        let lam = Tensor::eye(2);
        let mut sampler = Sampler::deterministic(RandomStream::new(1));
        let out = ua_ea_forward(
            &tape,
            &s,
            &p,
            Some(&lam),
            &VarActivations::default(),
            Activation::Identity,
            &mut sampler,
        )
        .unwrap();
        // identity everything and mean substitution → output = S W^μ = S
        assert_eq!(out.values(), s.values());
    }

    #[test]
    fn ea_floor_sigma_matches_deterministic_attention_product() {
        let tape = Tape::new();
        let s = t(vec![2, 2], vec![0.4, -0.7, 1.1, 0.3]);
        let w = t(vec![2, 2], vec![0.6, 0.2, -0.1, 0.8]);
        let p = floor_params(w.clone(), Tensor::zeros(vec![2, 2]));
        let lam = t(vec![2, 2], vec![0.5, 0.5, 0.2, 0.8]);
        let mut sampler = Sampler::new(RandomStream::new(5));
        let out = ua_ea_forward(
            &tape,
            &s,
            &p,
            Some(&lam),
            &VarActivations::default(),
            Activation::Identity,
            &mut sampler,
        )
        .unwrap();
        let want = tape
            .matmul(&lam, &tape.matmul(&s, &w).unwrap())
            .unwrap();
        for (a, b) in out.values().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn fmci_missing_pair_is_state_error() {
        let tape = Tape::new();
        let s = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = floor_params(Tensor::eye(2), Tensor::eye(2));
        let lam = Tensor::eye(2);
        let mut sampler = Sampler::new(RandomStream::new(2));
        let err = ua_fmci_forward(
            &tape,
            &s,
            &p,
            Some(&lam),
            None,
            &VarActivations::default(),
            Activation::Identity,
            &mut sampler,
        )
        .unwrap_err();
        assert!(matches!(err, Error::State(_)));
        let err = ua_fmci_forward(
            &tape,
            &s,
            &p,
            None,
            Some(&lam),
            &VarActivations::default(),
            Activation::Identity,
            &mut sampler,
        )
        .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn fmci_zero_pair_annihilates() {
        let tape = Tape::new();
        let s = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = floor_params(Tensor::eye(2), Tensor::eye(2));
        let zero = Tensor::zeros(vec![2, 2]);
        let mut sampler = Sampler::new(RandomStream::new(3));
        let out = ua_fmci_forward(
            &tape,
            &s,
            &p,
            Some(&zero),
            Some(&zero),
            &VarActivations::default(),
            Activation::Identity,
            &mut sampler,
        )
        .unwrap();
        for &v in out.values() {
            assert!(v.abs() < 1e-2, "noise-floor output, got {v}");
        }
    }

    #[test]
    fn fmci_same_seed_bitwise_reproducible() {
        let s = t(vec![2, 2], vec![0.3, -0.4, 0.9, 1.2]);
        let p = floor_params(
            t(vec![2, 2], vec![0.5, 0.1, -0.2, 0.7]),
            t(vec![2, 2], vec![0.2, -0.3, 0.4, 0.6]),
        );
        let lam_mu = t(vec![2, 2], vec![0.6, 0.4, 0.3, 0.7]);
        let lam_sig = t(vec![2, 2], vec![0.1, 0.05, 0.2, 0.15]);
        let run = || {
            let tape = Tape::new();
            let mut sampler = Sampler::new(RandomStream::new(99));
            ua_fmci_forward(
                &tape,
                &s,
                &p,
                Some(&lam_mu),
                Some(&lam_sig),
                &VarActivations::default(),
                Activation::Identity,
                &mut sampler,
            )
            .unwrap()
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fmci_exact_substitution_preserves_vgat_distribution() {
        use crate::layers::var::vgat_forward;
        // input-independent attentions: zero attention vectors make
        // Λ^μ = Λ^σ = 0, so substituting the exact statistics (mean 0,
        // variance 0) must reproduce VGAT's output distribution.
        let s = t(vec![2, 2], vec![0.8, -0.5, 0.2, 1.4]);
        let a = t(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let p = VgatParams {
            mu: gat(t(vec![2, 2], vec![0.5, 0.1, -0.2, 0.7])),
            sigma: Some(gat(t(vec![2, 2], vec![0.2, -0.3, 0.4, 0.6]))),
            variance: VarianceSpec::PerElement {
                bias: Tensor::scalar(0.5),
            },
        };
        let zero = Tensor::zeros(vec![2, 2]);
        let k = 4000;
        let root = RandomStream::new(71);
        let mut m1 = [0.0f64; 4];
        let mut m2 = [0.0f64; 4];
        let mut f1 = [0.0f64; 4];
        let mut f2 = [0.0f64; 4];
        for i in 0..k {
            let tape = Tape::new();
            let mut s1 = Sampler::new(root.split(i));
            let v = vgat_forward(
                &tape,
                &s,
                &a,
                &p,
                &VarActivations::default(),
                Activation::Identity,
                Activation::Identity,
                &mut s1,
            )
            .unwrap();
            for (j, &x) in v.out.values().iter().enumerate() {
                m1[j] += x;
                m2[j] += x * x;
            }
            let tape = Tape::new();
            let mut s2 = Sampler::new(root.split(i + 1_000_000));
            let f = ua_fmci_forward(
                &tape,
                &s,
                &p,
                Some(&zero),
                Some(&zero),
                &VarActivations::default(),
                Activation::Identity,
                &mut s2,
            )
            .unwrap();
            for (j, &x) in f.values().iter().enumerate() {
                f1[j] += x;
                f2[j] += x * x;
            }
        }
        for j in 0..4 {
            let (vm, fm) = (m1[j] / k as f64, f1[j] / k as f64);
            let (vv, fv) = (m2[j] / k as f64 - vm * vm, f2[j] / k as f64 - fm * fm);
            // same analytic mean/variance → empirical moments agree at 3 SE
            let se_mean = (vv / k as f64).sqrt() + (fv / k as f64).sqrt();
            assert!((vm - fm).abs() <= 3.0 * se_mean + 1e-12, "mean[{j}] {vm} vs {fm}");
            let se_var = (vv + fv) * (2.0 / k as f64).sqrt();
            assert!((vv - fv).abs() <= 3.0 * se_var + 1e-12, "var[{j}] {vv} vs {fv}");
        }
    }
}
