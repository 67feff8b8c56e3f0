//! Monte Carlo integration of outputs and attentions, attention
//! filtering, and the conversion of VGAT models into the filtered
//! Monte-Carlo-integrated (FMCI) variant.
//!
//! All estimators use Welford accumulation, so K identical samples give a
//! variance of exactly zero, and empirical variances are never negative.

use crate::config::{CalibrationMode, FilterConfig, FilterRule, ModelKind};
use crate::error::{Error, Result};
use crate::model::{CachedAttention, GraphContext, Model};
use crate::params::{Binder, Param};
use crate::rng::RandomStream;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Monte Carlo estimate of a model's class distribution for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Mean of the per-sample softmax outputs.
    pub class_probabilities: Vec<f64>,
    /// Unbiased per-class variance of the softmax outputs (zero for K<2).
    pub class_variance: Vec<f64>,
    /// Entropy of the mean class distribution, in nats.
    pub entropy: f64,
    pub n_samples: usize,
    /// Mean of the raw logits over the same draws.
    pub mean_logits: Vec<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        argmax(&self.class_probabilities)
    }
}

/// Per-layer (and per-partition) attention statistics Λ̃^μ, Λ̃^σ.
#[derive(Debug, Clone)]
pub struct UncertainAttention {
    pub layer: usize,
    pub partition: Option<usize>,
    pub mean: Tensor,
    pub variance: Tensor,
    /// Monte Carlo draws behind the estimate; 0 when the statistics are
    /// read in closed form instead of sampled.
    pub n_samples: usize,
}

/// Streaming mean/variance; exact zeros for duplicated samples.
#[derive(Debug, Clone)]
pub(crate) struct MomentAccumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub(crate) fn new(len: usize) -> MomentAccumulator {
        MomentAccumulator {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub(crate) fn push(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.mean.len(), "accumulator width fixed");
        self.n += 1;
        let n = self.n as f64;
        for (i, &x) in sample.iter().enumerate() {
            let delta = x - self.mean[i];
            self.mean[i] += delta / n;
            let delta2 = x - self.mean[i];
            self.m2[i] += delta * delta2;
        }
    }

    pub(crate) fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased variance, clipped at zero; zero when fewer than 2 samples.
    pub(crate) fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        let denom = (self.n - 1) as f64;
        self.m2.iter().map(|&v| (v / denom).max(0.0)).collect()
    }
}

pub(crate) fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Entropy in nats of a probability vector; `0 ln 0` counts as zero.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// A view of an uncertainty-aware model's parameters as the VGAT they
/// embed, used to realize attention draws during calibration.
fn vgat_view(model: &Model) -> Model {
    let mut config = model.config.clone();
    config.model = ModelKind::Vgat;
    Model {
        config,
        n_nodes: model.n_nodes,
        params: model.params.clone(),
        bn: model.bn.clone(),
        cache: Vec::new(),
    }
}

/// Attention statistics an uncertainty-aware model should use for this
/// input: `None` means "use the model-attached cache". Per-input
/// calibration integrates the embedded VGAT's attentions afresh and
/// filters them with the model's filter settings.
pub fn resolve_attention_cache(
    model: &Model,
    input: &Tensor,
    ctx: &GraphContext,
    rng: &RandomStream,
) -> Result<Option<Vec<CachedAttention>>> {
    if !matches!(model.config.model, ModelKind::UaEa | ModelKind::UaFmci) {
        return Ok(None);
    }
    match model.config.calibration.mode {
        CalibrationMode::Stored => {
            if model.cache.is_empty() {
                Err(Error::state(
                    "uncertainty-aware model has no stored attention statistics; \
                     convert from a trained model or switch to per-input calibration",
                ))
            } else {
                Ok(None)
            }
        }
        CalibrationMode::PerInput => {
            let view = vgat_view(model);
            let k = model.config.calibration.samples.max(2);
            let stats = mc_attention(&view, input, ctx, k, &rng.split_str("calibration"))?;
            let fcfg = model.config.filter_config();
            Ok(Some(filtered_cache(&stats, &fcfg)))
        }
    }
}

fn filtered_cache(stats: &[UncertainAttention], cfg: &FilterConfig) -> Vec<CachedAttention> {
    stats
        .iter()
        .map(|ua| {
            let (mean, variance) = filter_attention(ua, cfg);
            CachedAttention {
                layer: ua.layer,
                mean: Param::new(mean.shape().to_vec(), mean.values().to_vec())
                    .expect("filter preserves shape"),
                variance: Param::new(variance.shape().to_vec(), variance.values().to_vec())
                    .expect("filter preserves shape"),
                n_samples: ua.n_samples,
            }
        })
        .collect()
}

/// Run K stochastic forwards and summarize the class distribution.
pub fn mc_predict(
    model: &Model,
    input: &Tensor,
    ctx: &GraphContext,
    k: usize,
    rng: &RandomStream,
) -> Result<Prediction> {
    if k < 1 {
        return Err(Error::config("mc_predict needs at least one sample"));
    }
    let cache = resolve_attention_cache(model, input, ctx, rng)?;
    let n_classes = model.config.n_classes;
    let mut probs = MomentAccumulator::new(n_classes);
    let mut logits_acc = MomentAccumulator::new(n_classes);
    for i in 0..k {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &model.params, false);
        let mut sampler = model.sampler(rng.split(i as u64));
        let out = model.forward(&binder, input, ctx, &mut sampler, cache.as_deref())?;
        let logits = out.logits.values();
        logits_acc.push(logits);
        probs.push(&softmax_vec(logits));
    }
    let class_probabilities = probs.mean().to_vec();
    Ok(Prediction {
        entropy: entropy(&class_probabilities),
        class_variance: probs.variance(),
        class_probabilities,
        n_samples: k,
        mean_logits: logits_acc.mean().to_vec(),
    })
}

/// One realized attention draw: `Λ̃ = Λ^μ + sqrt(max(Λ^σ, 0)) ⊙ ε`. The σ
/// matrix is clipped rather than passed through the variance head so the
/// realized draws carry exactly the statistics the model computed.
fn realize_attention(
    mu: &Tensor,
    sigma: Option<&Tensor>,
    deterministic: bool,
    rng: &mut RandomStream,
) -> Vec<f64> {
    match sigma {
        None => mu.values().to_vec(),
        Some(s) => {
            if deterministic {
                return mu.values().to_vec();
            }
            let eps = rng.normal_vec(mu.numel());
            mu.values()
                .iter()
                .zip(s.values())
                .zip(eps)
                .map(|((&m, &v), e)| m + v.max(0.0).sqrt() * e)
                .collect()
        }
    }
}

/// Direct read of input-independent attention statistics from stored
/// weights (ST-GCN-family masks).
fn attention_from_weights(model: &Model) -> Result<Vec<UncertainAttention>> {
    use crate::config::VarianceMode;
    let mut out = Vec::new();
    let n = model.n_nodes.ok_or_else(|| {
        Error::state("spatiotemporal model is missing its node count")
    })?;
    let variational = model.config.model == ModelKind::Vstgcn;
    for i in 0..model.config.hidden.len() {
        for p in 0..3 {
            let (mean_name, variance) = if variational {
                let mean_name = format!("block{i}.mu.m{p}");
                let var = match model.config.variance_mode {
                    VarianceMode::PerElement => {
                        let bias = model
                            .params
                            .get(&format!("block{i}.var_spatial.bias"))?
                            .values[0];
                        let m_sigma = model.params.get(&format!("block{i}.sigma.m{p}"))?;
                        m_sigma
                            .values
                            .iter()
                            .map(|&x| {
                                let pre = apply_scalar_activation(
                                    model.config.sigma_activation,
                                    x,
                                )? + bias;
                                Ok(softplus(pre) + crate::layers::var::VARIANCE_FLOOR)
                            })
                            .collect::<Result<Vec<f64>>>()?
                    }
                    VarianceMode::GlobalScalar => {
                        let scale = model
                            .params
                            .get(&format!("block{i}.var_spatial.scale"))?
                            .values[0];
                        vec![softplus(scale) + crate::layers::var::VARIANCE_FLOOR; n * n]
                    }
                };
                (mean_name, var)
            } else {
                (format!("block{i}.m{p}"), vec![0.0; n * n])
            };
            let mean = model.params.get(&mean_name)?;
            out.push(UncertainAttention {
                layer: i,
                partition: Some(p),
                mean: mean.tensor(),
                variance: Tensor::new(vec![n, n], variance)?,
                // closed-form read, not a Monte Carlo estimate
                n_samples: 0,
            });
        }
    }
    Ok(out)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn apply_scalar_activation(a: crate::config::Activation, x: f64) -> Result<f64> {
    use crate::config::Activation;
    match a {
        Activation::Identity => Ok(x),
        Activation::Relu => Ok(x.max(0.0)),
        Activation::Tanh => Ok(x.tanh()),
        Activation::Softplus => Ok(softplus(x)),
        Activation::RowSoftmax => Err(Error::config(
            "row-softmax cannot be used as the σ-branch activation",
        )),
    }
}

/// Monte Carlo mean and unbiased variance of every attention matrix the
/// model produces. ST-GCN-family attentions are input-independent and
/// read directly from the weights; uncertainty-aware models report the
/// statistics they were calibrated with.
pub fn mc_attention(
    model: &Model,
    input: &Tensor,
    ctx: &GraphContext,
    k: usize,
    rng: &RandomStream,
) -> Result<Vec<UncertainAttention>> {
    let kind = model.config.model;
    if !kind.has_attention() {
        return Err(Error::unsupported(format!(
            "model kind {} has no attention matrices",
            kind.name()
        )));
    }
    if k < 2 {
        return Err(Error::config(
            "attention integration needs at least two samples",
        ));
    }
    match kind {
        ModelKind::Stgcn | ModelKind::Vstgcn => return attention_from_weights(model),
        ModelKind::UaEa | ModelKind::UaFmci => {
            let cache = resolve_attention_cache(model, input, ctx, rng)?;
            let entries = cache.as_deref().unwrap_or(&model.cache);
            return Ok(entries
                .iter()
                .map(|c| UncertainAttention {
                    layer: c.layer,
                    partition: None,
                    mean: c.mean.tensor(),
                    variance: c.variance.tensor(),
                    n_samples: c.n_samples,
                })
                .collect());
        }
        _ => {}
    }

    let deterministic = model.config.deterministic_eval;
    let mut keys: Vec<(usize, Option<usize>)> = Vec::new();
    let mut accs: Vec<MomentAccumulator> = Vec::new();
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    for i in 0..k {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &model.params, false);
        let mut sampler = model.sampler(rng.split(i as u64));
        let out = model.forward(&binder, input, ctx, &mut sampler, None)?;
        let mut attn_rng = rng.split(i as u64).split_str("attention");
        if i == 0 {
            for rec in &out.attentions {
                keys.push((rec.layer, rec.partition));
                accs.push(MomentAccumulator::new(rec.mu.numel()));
                shapes.push(rec.mu.shape().to_vec());
            }
        } else if out.attentions.len() != keys.len() {
            return Err(Error::contract(
                "attention record count changed across Monte Carlo draws",
            ));
        }
        for (j, rec) in out.attentions.iter().enumerate() {
            let draw =
                realize_attention(&rec.mu, rec.sigma.as_ref(), deterministic, &mut attn_rng);
            accs[j].push(&draw);
        }
    }
    keys.into_iter()
        .zip(accs)
        .zip(shapes)
        .map(|(((layer, partition), acc), shape)| {
            Ok(UncertainAttention {
                layer,
                partition,
                mean: Tensor::new(shape.clone(), acc.mean().to_vec())?,
                variance: Tensor::new(shape, acc.variance())?,
                n_samples: k,
            })
        })
        .collect()
}

/// Attention filtering: entries whose uncertainty is too high relative to
/// the limit are replaced.
///
/// `as-written` keeps `mean[k,q]` when `variance ≤ l·mean` (else `p`) and
/// keeps `variance[k,q]` when `mean ≤ l·variance` (else 0). `consistent`
/// keys both decisions on `variance ≤ l·mean`. An infinite limit makes
/// both conditions true everywhere.
pub fn filter_attention(ua: &UncertainAttention, cfg: &FilterConfig) -> (Tensor, Tensor) {
    let l = cfg.limit;
    let p = cfg.replacement;
    let mut mean_f = Vec::with_capacity(ua.mean.numel());
    let mut var_f = Vec::with_capacity(ua.mean.numel());
    for (&m, &v) in ua.mean.values().iter().zip(ua.variance.values()) {
        let keep_mean = l.is_infinite() || v <= l * m;
        mean_f.push(if keep_mean { m } else { p });
        let keep_var = match cfg.rule {
            FilterRule::AsWritten => l.is_infinite() || m <= l * v,
            FilterRule::Consistent => keep_mean,
        };
        var_f.push(if keep_var { v } else { 0.0 });
    }
    (
        Tensor::new(ua.mean.shape().to_vec(), mean_f).expect("same shape"),
        Tensor::new(ua.variance.shape().to_vec(), var_f).expect("same shape"),
    )
}

/// Convert a trained VGAT model into the UA-FMCI variant: integrate its
/// attentions over `k` draws on a calibration input, filter, and attach
/// the statistics. Parameter values are untouched.
pub fn convert_vgat_to_fmci(
    model: &Model,
    calibration_input: &Tensor,
    ctx: &GraphContext,
    k: usize,
    cfg: &FilterConfig,
    rng: &RandomStream,
) -> Result<Model> {
    if model.config.model != ModelKind::Vgat {
        return Err(Error::unsupported(format!(
            "conversion to ua-fmci needs a vgat model, got {}",
            model.config.model.name()
        )));
    }
    cfg.validate()?;
    let stats = mc_attention(model, calibration_input, ctx, k, rng)?;
    let cache = filtered_cache(&stats, cfg);
    let mut config = model.config.clone();
    config.model = ModelKind::UaFmci;
    config.filter = Some(cfg.clone());
    Ok(Model {
        config,
        n_nodes: model.n_nodes,
        params: model.params.clone(),
        bn: model.bn.clone(),
        cache,
    })
}
