//! Whole-model assembly: named parameter sets, initialization, and the
//! forward pass for every supported architecture.
//!
//! A model is its configuration plus a flat name → tensor map. Names are
//! stable (`layer0.w`, `block1.mu.tc`, `head.b`, …) so checkpoints,
//! optimizers, and pretrained initialization all address parameters the
//! same way. Spatial models consume `[N, C]` node-feature matrices with a
//! per-sample graph; spatiotemporal models consume `[C, T, N]` tensors
//! with a shared partitioned skeleton.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{Activation, ModelConfig, ModelKind, VarianceMode};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, GraphSpec, PartitionedAdjacency};
use crate::layers::det::{
    agcn_block_forward, gat_forward, gcn_forward, stgcn_block_forward, AgcnBlockParams,
    GatLayerParams, GcnLayerParams, StgcnBlockParams,
};
use crate::layers::ua::{ua_ea_forward, ua_fmci_forward};
use crate::layers::var::{
    inverse_softplus, vagcn_block_forward, vgat_forward, vgcn_forward, vstgcn_block_forward,
    AgcnBranch, Sampler, StgcnBranch, VagcnBlockParams, VarActivations, VarianceSpec, VgatParams,
    VgcnParams, VstgcnBlockParams, VARIANCE_FLOOR,
};
use crate::layers::{BnParams, BnUpdate, BN_EPS};
use crate::params::{Binder, BnState, Param, ParamSet};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

/// Starting variance for freshly initialized sampling sites: small enough
/// not to drown the signal, large enough to exercise the σ branch.
pub const INIT_VARIANCE: f64 = 1e-2;

/// Width of the AGCN attention embedding relative to the block output.
pub fn embed_width(c_out: usize) -> usize {
    (c_out / 4).max(1)
}

/// Value of an activation at zero input, used to solve for variance-head
/// biases. Row-softmax has no elementwise value and cannot sit on the σ
/// branch.
pub fn activation_at_zero(a: Activation) -> Result<f64> {
    match a {
        Activation::Identity | Activation::Relu | Activation::Tanh => Ok(0.0),
        Activation::Softplus => Ok(std::f64::consts::LN_2),
        Activation::RowSoftmax => Err(Error::config(
            "row-softmax cannot be used as the σ-branch activation",
        )),
    }
}

/// Bias that makes a fresh per-element variance site output `target`
/// when its σ sub-layer outputs zero.
pub fn variance_bias_for(target: f64, sigma_activation: Activation) -> Result<f64> {
    Ok(inverse_softplus(target - VARIANCE_FLOOR) - activation_at_zero(sigma_activation)?)
}

/// Attention statistics attached to a model (filtered Λ̃^μ / Λ̃^σ for the
/// uncertainty-aware variants).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedAttention {
    pub layer: usize,
    pub mean: Param,
    pub variance: Param,
    pub n_samples: usize,
}

/// Graph structure accompanying one input sample.
#[derive(Debug, Clone)]
pub enum GraphContext {
    /// Raw and degree-normalized adjacency of a per-sample graph.
    Spatial { a: Tensor, a_hat: Tensor },
    /// Shared skeleton partition for spatiotemporal inputs.
    Skeleton(Box<PartitionedAdjacency>),
}

impl GraphContext {
    pub fn spatial(g: &GraphSpec) -> GraphContext {
        GraphContext::Spatial {
            a: g.adjacency_tensor(),
            a_hat: normalize_adjacency(g),
        }
    }

    pub fn skeleton(parts: PartitionedAdjacency) -> GraphContext {
        GraphContext::Skeleton(Box::new(parts))
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            GraphContext::Spatial { a, .. } => a.shape()[0],
            GraphContext::Skeleton(p) => p.partitions[0].shape()[0],
        }
    }
}

/// Attention matrices produced by one forward pass of one layer.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    /// Skeleton partition index for AGCN-family records.
    pub partition: Option<usize>,
    pub mu: Tensor,
    pub sigma: Option<Tensor>,
}

/// Everything one forward pass yields.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Unnormalized class scores, shape `[n_classes]`.
    pub logits: Tensor,
    pub attentions: Vec<AttentionRecord>,
    /// Batch statistics observed at training-mode BN sites.
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// Node count the parameters were built for; required by
    /// spatiotemporal kinds (their masks are N×N parameters).
    pub n_nodes: Option<usize>,
    pub params: ParamSet,
    /// Running statistics per BN site name.
    pub bn: BTreeMap<String, BnState>,
    /// Filtered attention statistics (uncertainty-aware models).
    pub cache: Vec<CachedAttention>,
}

fn glorot(root: &RandomStream, name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Param {
    let mut r = root.split_str(name);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| (2.0 * r.uniform() - 1.0) * bound).collect();
    Param::new(shape, values).expect("shape/value count consistent by construction")
}

fn constant(shape: Vec<usize>, value: f64) -> Param {
    let n: usize = shape.iter().product();
    Param::new(shape, vec![value; n]).expect("shape/value count consistent by construction")
}

struct InitBuilder<'r> {
    rng: &'r RandomStream,
    params: ParamSet,
    bn: BTreeMap<String, BnState>,
    use_bn: bool,
}

impl InitBuilder<'_> {
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize, shape: Vec<usize>) {
        let p = glorot(self.rng, &name, shape, fan_in, fan_out);
        self.params.insert(name, p);
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) {
        self.weight(name, rows, cols, vec![rows, cols]);
    }

    fn vector(&mut self, name: String, len: usize) {
        self.weight(name, len, 1, vec![len]);
    }

    fn filled(&mut self, name: String, shape: Vec<usize>, value: f64) {
        self.params.insert(name, constant(shape, value));
    }

    fn tc_kernel(&mut self, name: String, c_out: usize, c_in: usize, k: usize) {
        self.weight(name, c_in * k, c_out * k, vec![c_out, c_in, k]);
    }

    fn bn_site(&mut self, name: &str, channels: usize) {
        if !self.use_bn {
            return;
        }
        self.filled(format!("{name}.gamma"), vec![channels], 1.0);
        self.filled(format!("{name}.beta"), vec![channels], 0.0);
        self.bn.insert(name.to_string(), BnState::init(channels));
    }

    fn variance_site(&mut self, name: &str, mode: VarianceMode, bias: f64) {
        match mode {
            VarianceMode::PerElement => self.filled(format!("{name}.bias"), vec![], bias),
            VarianceMode::GlobalScalar => self.filled(format!("{name}.scale"), vec![], bias),
        }
    }
}

impl Model {
    /// Fresh model with Glorot-initialized weights. Every parameter value
    /// depends only on `(rng seed, parameter name)`, so initialization is
    /// independent of construction order.
    pub fn init(config: ModelConfig, n_nodes: Option<usize>, rng: &RandomStream) -> Result<Model> {
        config.validate()?;
        let kind = config.model;
        if kind.is_spatiotemporal() && n_nodes.is_none() {
            return Err(Error::config(
                "spatiotemporal models need the node count at initialization (their masks are N×N parameters)",
            ));
        }
        let fresh_bias = variance_bias_for(INIT_VARIANCE, config.sigma_activation)?;
        let mut b = InitBuilder {
            rng,
            params: ParamSet::new(),
            bn: BTreeMap::new(),
            use_bn: config.batch_norm && kind.is_spatiotemporal(),
        };

        let widths = config.layer_widths();
        for (i, &(c_in, c_out)) in widths.iter().enumerate() {
            match kind {
                ModelKind::Gcn => b.matrix(format!("layer{i}.w"), c_in, c_out),
                ModelKind::Gat => {
                    b.matrix(format!("layer{i}.w"), c_in, c_out);
                    b.vector(format!("layer{i}.w_s"), c_out);
                    b.vector(format!("layer{i}.w_d"), c_out);
                }
                ModelKind::Vgcn => {
                    b.matrix(format!("layer{i}.mu.w"), c_in, c_out);
                    if config.variance_mode == VarianceMode::PerElement {
                        b.matrix(format!("layer{i}.sigma.w"), c_in, c_out);
                    }
                    b.variance_site(&format!("layer{i}.var"), config.variance_mode, fresh_bias);
                }
                ModelKind::Vgat | ModelKind::UaEa | ModelKind::UaFmci => {
                    b.matrix(format!("layer{i}.mu.w"), c_in, c_out);
                    b.vector(format!("layer{i}.mu.w_s"), c_out);
                    b.vector(format!("layer{i}.mu.w_d"), c_out);
                    if config.variance_mode == VarianceMode::PerElement {
                        b.matrix(format!("layer{i}.sigma.w"), c_in, c_out);
                        b.vector(format!("layer{i}.sigma.w_s"), c_out);
                        b.vector(format!("layer{i}.sigma.w_d"), c_out);
                    }
                    b.variance_site(&format!("layer{i}.var"), config.variance_mode, fresh_bias);
                }
                ModelKind::Stgcn => {
                    let n = n_nodes.unwrap();
                    for p in 0..3 {
                        b.matrix(format!("block{i}.w{p}"), c_in, c_out);
                        b.filled(format!("block{i}.m{p}"), vec![n, n], 1.0);
                    }
                    b.tc_kernel(format!("block{i}.tc"), c_out, c_out, config.temporal_kernel);
                    if c_in != c_out {
                        b.matrix(format!("block{i}.xi"), c_in, c_out);
                    }
                    b.bn_site(&format!("block{i}.bn"), c_out);
                }
                ModelKind::Agcn => {
                    let n = n_nodes.unwrap();
                    let c_e = embed_width(c_out);
                    for p in 0..3 {
                        b.matrix(format!("block{i}.w_z{p}"), c_in, c_out);
                        b.filled(format!("block{i}.w_m{p}"), vec![n, n], 0.0);
                        b.matrix(format!("block{i}.w_1{p}"), c_in, c_e);
                        b.matrix(format!("block{i}.w_2{p}"), c_in, c_e);
                    }
                    b.tc_kernel(format!("block{i}.tc"), c_out, c_out, config.temporal_kernel);
                    if c_in != c_out {
                        b.matrix(format!("block{i}.res"), c_in, c_out);
                        b.matrix(format!("block{i}.xi"), c_in, c_out);
                    }
                    b.bn_site(&format!("block{i}.bn_inner"), c_out);
                    b.bn_site(&format!("block{i}.bn_outer"), c_out);
                }
                ModelKind::Vstgcn => {
                    let n = n_nodes.unwrap();
                    let branches: &[&str] = if config.variance_mode == VarianceMode::PerElement {
                        &["mu", "sigma"]
                    } else {
                        &["mu"]
                    };
                    for br in branches {
                        for p in 0..3 {
                            b.matrix(format!("block{i}.{br}.w{p}"), c_in, c_out);
                            b.filled(format!("block{i}.{br}.m{p}"), vec![n, n], 1.0);
                        }
                        b.tc_kernel(
                            format!("block{i}.{br}.tc"),
                            c_out,
                            c_out,
                            config.temporal_kernel,
                        );
                    }
                    b.variance_site(
                        &format!("block{i}.var_spatial"),
                        config.variance_mode,
                        fresh_bias,
                    );
                    b.variance_site(
                        &format!("block{i}.var_temporal"),
                        config.variance_mode,
                        fresh_bias,
                    );
                    if c_in != c_out {
                        b.matrix(format!("block{i}.xi"), c_in, c_out);
                    }
                    b.bn_site(&format!("block{i}.bn"), c_out);
                }
                ModelKind::Vagcn => {
                    let n = n_nodes.unwrap();
                    let c_e = embed_width(c_out);
                    let branches: &[&str] = if config.variance_mode == VarianceMode::PerElement {
                        &["mu", "sigma"]
                    } else {
                        &["mu"]
                    };
                    for br in branches {
                        for p in 0..3 {
                            b.matrix(format!("block{i}.{br}.w_z{p}"), c_in, c_out);
                            b.filled(format!("block{i}.{br}.w_m{p}"), vec![n, n], 0.0);
                            b.matrix(format!("block{i}.{br}.w_1{p}"), c_in, c_e);
                            b.matrix(format!("block{i}.{br}.w_2{p}"), c_in, c_e);
                        }
                        b.tc_kernel(
                            format!("block{i}.{br}.tc"),
                            c_out,
                            c_out,
                            config.temporal_kernel,
                        );
                        if c_in != c_out {
                            b.matrix(format!("block{i}.{br}.res"), c_in, c_out);
                        }
                        b.bn_site(&format!("block{i}.{br}.bn_inner"), c_out);
                    }
                    b.variance_site(
                        &format!("block{i}.var_spatial"),
                        config.variance_mode,
                        fresh_bias,
                    );
                    b.variance_site(
                        &format!("block{i}.var_temporal"),
                        config.variance_mode,
                        fresh_bias,
                    );
                    if c_in != c_out {
                        b.matrix(format!("block{i}.xi"), c_in, c_out);
                    }
                    b.bn_site(&format!("block{i}.bn_outer"), c_out);
                }
            }
        }
        let c_last = widths.last().map(|&(_, out)| out).unwrap();
        b.matrix("head.w".to_string(), c_last, config.n_classes);
        b.filled("head.b".to_string(), vec![config.n_classes], 0.0);

        Ok(Model {
            config,
            n_nodes,
            params: b.params,
            bn: b.bn,
            cache: Vec::new(),
        })
    }

    /// Reassemble a model from stored parts, checking that the parameter
    /// names and shapes match what the configuration declares.
    pub fn from_parts(
        config: ModelConfig,
        n_nodes: Option<usize>,
        params: ParamSet,
        bn: BTreeMap<String, BnState>,
        cache: Vec<CachedAttention>,
    ) -> Result<Model> {
        let expected = Model::init(config.clone(), n_nodes, &RandomStream::new(0))?;
        if let Some(msg) = expected.params.first_incompatibility(&params) {
            return Err(Error::incompatible(msg));
        }
        for site in expected.bn.keys() {
            if !bn.contains_key(site) {
                return Err(Error::incompatible(format!(
                    "missing batch-norm running statistics for site {site}"
                )));
            }
        }
        Ok(Model {
            config,
            n_nodes,
            params,
            bn,
            cache,
        })
    }

    /// Sampler honoring the model's deterministic-eval debug flag.
    pub fn sampler(&self, rng: RandomStream) -> Sampler {
        if self.config.deterministic_eval {
            Sampler::deterministic(rng)
        } else {
            Sampler::new(rng)
        }
    }

    fn var_activations(&self) -> VarActivations {
        VarActivations {
            mu: self.config.mu_activation,
            sigma: self.config.sigma_activation,
            noise: self.config.noise_activation,
        }
    }

    fn variance_spec(&self, b: &Binder, site: &str) -> Result<VarianceSpec> {
        Ok(match self.config.variance_mode {
            VarianceMode::PerElement => VarianceSpec::PerElement {
                bias: b.get(&format!("{site}.bias"))?,
            },
            VarianceMode::GlobalScalar => VarianceSpec::GlobalScalar {
                scale: b.get(&format!("{site}.scale"))?,
            },
        })
    }

    fn bn_params(&self, b: &Binder, site: &str) -> Result<Option<BnParams>> {
        if !self.config.batch_norm {
            return Ok(None);
        }
        let state = self.bn.get(site).ok_or_else(|| {
            Error::state(format!("no running statistics for batch-norm site {site}"))
        })?;
        Ok(Some(BnParams {
            name: site.to_string(),
            gamma: b.get(&format!("{site}.gamma"))?,
            beta: b.get(&format!("{site}.beta"))?,
            eps: BN_EPS,
            train: b.train(),
            running_mean: state.mean.clone(),
            running_var: state.var.clone(),
        }))
    }

    fn gat_branch(&self, b: &Binder, i: usize, branch: &str) -> Result<GatLayerParams> {
        Ok(GatLayerParams {
            w: b.get(&format!("layer{i}.{branch}.w"))?,
            w_s: b.get(&format!("layer{i}.{branch}.w_s"))?,
            w_d: b.get(&format!("layer{i}.{branch}.w_d"))?,
            mask_mode: self.config.mask_mode,
        })
    }

    fn vgat_params(&self, b: &Binder, i: usize) -> Result<VgatParams> {
        let sigma = if self.config.variance_mode == VarianceMode::PerElement {
            Some(self.gat_branch(b, i, "sigma")?)
        } else {
            None
        };
        Ok(VgatParams {
            mu: self.gat_branch(b, i, "mu")?,
            sigma,
            variance: self.variance_spec(b, &format!("layer{i}.var"))?,
        })
    }

    fn stgcn_branch(&self, b: &Binder, i: usize, branch: &str) -> Result<StgcnBranch> {
        Ok(StgcnBranch {
            w: [
                b.get(&format!("block{i}.{branch}.w0"))?,
                b.get(&format!("block{i}.{branch}.w1"))?,
                b.get(&format!("block{i}.{branch}.w2"))?,
            ],
            m: [
                b.get(&format!("block{i}.{branch}.m0"))?,
                b.get(&format!("block{i}.{branch}.m1"))?,
                b.get(&format!("block{i}.{branch}.m2"))?,
            ],
            tc_kernel: b.get(&format!("block{i}.{branch}.tc"))?,
        })
    }

    fn agcn_branch(&self, b: &Binder, i: usize, branch: &str, c_in: usize, c_out: usize) -> Result<AgcnBranch> {
        let get3 = |stem: &str| -> Result<[Tensor; 3]> {
            Ok([
                b.get(&format!("block{i}.{branch}.{stem}0"))?,
                b.get(&format!("block{i}.{branch}.{stem}1"))?,
                b.get(&format!("block{i}.{branch}.{stem}2"))?,
            ])
        };
        Ok(AgcnBranch {
            w_z: get3("w_z")?,
            w_m: get3("w_m")?,
            w_1: get3("w_1")?,
            w_2: get3("w_2")?,
            tc_kernel: b.get(&format!("block{i}.{branch}.tc"))?,
            channel_match: if c_in != c_out {
                Some(b.get(&format!("block{i}.{branch}.res"))?)
            } else {
                None
            },
            bn_inner: self.bn_params(b, &format!("block{i}.{branch}.bn_inner"))?,
        })
    }

    fn xi(&self, b: &Binder, i: usize, c_in: usize, c_out: usize) -> Result<Option<Tensor>> {
        if c_in != c_out {
            Ok(Some(b.get(&format!("block{i}.xi"))?))
        } else {
            Ok(None)
        }
    }

    fn cached_for_layer(
        cache: &[CachedAttention],
        layer: usize,
    ) -> (Option<Tensor>, Option<Tensor>, Option<&CachedAttention>) {
        match cache.iter().find(|c| c.layer == layer) {
            Some(c) => (Some(c.mean.tensor()), Some(c.variance.tensor()), Some(c)),
            None => (None, None, None),
        }
    }

    fn readout(&self, b: &Binder, h: &Tensor) -> Result<Tensor> {
        let tape = b.tape();
        let pooled = match h.shape().len() {
            2 => tape.mean_axis(h, 0)?,
            3 => {
                let over_t = tape.mean_axis(h, 1)?;
                tape.mean_axis(&over_t, 1)?
            }
            r => {
                return Err(Error::shape(format!(
                    "readout expects rank-2 or rank-3 features, got rank {r}"
                )))
            }
        };
        let c = pooled.numel();
        let row = tape.reshape(&pooled, vec![1, c])?;
        let w = b.get("head.w")?;
        let bias = b.get("head.b")?;
        let scores = tape.matmul(&row, &w)?;
        let flat = tape.reshape(&scores, vec![self.config.n_classes])?;
        tape.add(&flat, &bias)
    }

    /// One forward pass over a single sample. `binder` fixes the tape and
    /// train/eval mode; `cache` overrides the model-attached attention
    /// statistics (used for per-input calibration of UA models).
    pub fn forward(
        &self,
        binder: &Binder,
        input: &Tensor,
        ctx: &GraphContext,
        sampler: &mut Sampler,
        cache: Option<&[CachedAttention]>,
    ) -> Result<ForwardOutput> {
        let kind = self.config.model;
        let cache = cache.unwrap_or(&self.cache);
        if kind.is_spatiotemporal() {
            let GraphContext::Skeleton(parts) = ctx else {
                return Err(Error::shape(
                    "spatiotemporal model needs a skeleton graph context",
                ));
            };
            if input.shape().len() != 3 || input.shape()[0] != self.config.in_channels {
                return Err(Error::shape(format!(
                    "expected input [C={}, T, N], got {:?}",
                    self.config.in_channels,
                    input.shape()
                )));
            }
            self.forward_temporal(binder, input, parts, sampler)
        } else {
            let GraphContext::Spatial { a, a_hat } = ctx else {
                return Err(Error::shape("spatial model needs a spatial graph context"));
            };
            if input.shape().len() != 2 || input.shape()[1] != self.config.in_channels {
                return Err(Error::shape(format!(
                    "expected input [N, C={}], got {:?}",
                    self.config.in_channels,
                    input.shape()
                )));
            }
            if input.shape()[0] != a.shape()[0] {
                return Err(Error::shape(format!(
                    "feature rows ({}) differ from graph nodes ({})",
                    input.shape()[0],
                    a.shape()[0]
                )));
            }
            self.forward_spatial(binder, input, a, a_hat, sampler, cache)
        }
    }

    fn forward_spatial(
        &self,
        b: &Binder,
        input: &Tensor,
        a: &Tensor,
        a_hat: &Tensor,
        sampler: &mut Sampler,
        cache: &[CachedAttention],
    ) -> Result<ForwardOutput> {
        let tape = b.tape();
        let rho = self.config.rho();
        let rho_lambda = self.config.attention_activation;
        let acts = self.var_activations();
        let mut h = input.clone();
        let mut attentions = Vec::new();
        for i in 0..self.config.hidden.len() {
            h = match self.config.model {
                ModelKind::Gcn => {
                    let p = GcnLayerParams {
                        w: b.get(&format!("layer{i}.w"))?,
                    };
                    gcn_forward(tape, &h, a_hat, &p, rho)?
                }
                ModelKind::Gat => {
                    let p = GatLayerParams {
                        w: b.get(&format!("layer{i}.w"))?,
                        w_s: b.get(&format!("layer{i}.w_s"))?,
                        w_d: b.get(&format!("layer{i}.w_d"))?,
                        mask_mode: self.config.mask_mode,
                    };
                    let (out, lambda) = gat_forward(tape, &h, a, &p, rho, rho_lambda)?;
                    attentions.push(AttentionRecord {
                        layer: i,
                        partition: None,
                        mu: lambda,
                        sigma: None,
                    });
                    out
                }
                ModelKind::Vgcn => {
                    let sigma = if self.config.variance_mode == VarianceMode::PerElement {
                        Some(GcnLayerParams {
                            w: b.get(&format!("layer{i}.sigma.w"))?,
                        })
                    } else {
                        None
                    };
                    let p = VgcnParams {
                        mu: GcnLayerParams {
                            w: b.get(&format!("layer{i}.mu.w"))?,
                        },
                        sigma,
                        variance: self.variance_spec(b, &format!("layer{i}.var"))?,
                    };
                    vgcn_forward(tape, &h, a_hat, &p, &acts, sampler)?
                }
                ModelKind::Vgat => {
                    let p = self.vgat_params(b, i)?;
                    let out = vgat_forward(tape, &h, a, &p, &acts, rho, rho_lambda, sampler)?;
                    attentions.push(AttentionRecord {
                        layer: i,
                        partition: None,
                        mu: out.lambda_mu,
                        sigma: out.lambda_sigma,
                    });
                    out.out
                }
                ModelKind::UaEa => {
                    let p = self.vgat_params(b, i)?;
                    let (mean, _, entry) = Self::cached_for_layer(cache, i);
                    let out =
                        ua_ea_forward(tape, &h, &p, mean.as_ref(), &acts, rho, sampler)?;
                    if let Some(c) = entry {
                        attentions.push(AttentionRecord {
                            layer: i,
                            partition: None,
                            mu: c.mean.tensor(),
                            sigma: Some(c.variance.tensor()),
                        });
                    }
                    out
                }
                ModelKind::UaFmci => {
                    let p = self.vgat_params(b, i)?;
                    let (mean, variance, entry) = Self::cached_for_layer(cache, i);
                    let out = ua_fmci_forward(
                        tape,
                        &h,
                        &p,
                        mean.as_ref(),
                        variance.as_ref(),
                        &acts,
                        rho,
                        sampler,
                    )?;
                    if let Some(c) = entry {
                        attentions.push(AttentionRecord {
                            layer: i,
                            partition: None,
                            mu: c.mean.tensor(),
                            sigma: Some(c.variance.tensor()),
                        });
                    }
                    out
                }
                _ => unreachable!("spatiotemporal kinds handled separately"),
            };
        }
        let logits = self.readout(b, &h)?;
        Ok(ForwardOutput {
            logits,
            attentions,
            bn_updates: Vec::new(),
        })
    }

    fn forward_temporal(
        &self,
        b: &Binder,
        input: &Tensor,
        parts: &PartitionedAdjacency,
        sampler: &mut Sampler,
    ) -> Result<ForwardOutput> {
        let tape = b.tape();
        let rho = self.config.rho();
        let acts = self.var_activations();
        let widths = self.config.layer_widths();
        let mut h = input.clone();
        let mut attentions = Vec::new();
        let mut bn_updates = Vec::new();
        for (i, &(c_in, c_out)) in widths.iter().enumerate() {
            h = match self.config.model {
                ModelKind::Stgcn => {
                    let p = StgcnBlockParams {
                        w: [
                            b.get(&format!("block{i}.w0"))?,
                            b.get(&format!("block{i}.w1"))?,
                            b.get(&format!("block{i}.w2"))?,
                        ],
                        m: [
                            b.get(&format!("block{i}.m0"))?,
                            b.get(&format!("block{i}.m1"))?,
                            b.get(&format!("block{i}.m2"))?,
                        ],
                        tc_kernel: b.get(&format!("block{i}.tc"))?,
                        stride: self.config.stride(i),
                        xi: self.xi(b, i, c_in, c_out)?,
                        bn: self.bn_params(b, &format!("block{i}.bn"))?,
                        rho,
                    };
                    stgcn_block_forward(tape, &h, parts, &p, &mut bn_updates)?
                }
                ModelKind::Agcn => {
                    let get3 = |stem: &str| -> Result<[Tensor; 3]> {
                        Ok([
                            b.get(&format!("block{i}.{stem}0"))?,
                            b.get(&format!("block{i}.{stem}1"))?,
                            b.get(&format!("block{i}.{stem}2"))?,
                        ])
                    };
                    let p = AgcnBlockParams {
                        w_z: get3("w_z")?,
                        w_m: get3("w_m")?,
                        w_1: get3("w_1")?,
                        w_2: get3("w_2")?,
                        tc_kernel: b.get(&format!("block{i}.tc"))?,
                        stride: self.config.stride(i),
                        xi: self.xi(b, i, c_in, c_out)?,
                        channel_match: if c_in != c_out {
                            Some(b.get(&format!("block{i}.res"))?)
                        } else {
                            None
                        },
                        bn_inner: self.bn_params(b, &format!("block{i}.bn_inner"))?,
                        bn_outer: self.bn_params(b, &format!("block{i}.bn_outer"))?,
                        rho,
                    };
                    let (out, attn) = agcn_block_forward(tape, &h, parts, &p, &mut bn_updates)?;
                    for (p_idx, a) in attn.into_iter().enumerate() {
                        attentions.push(AttentionRecord {
                            layer: i,
                            partition: Some(p_idx),
                            mu: a,
                            sigma: None,
                        });
                    }
                    out
                }
                ModelKind::Vstgcn => {
                    let sigma = if self.config.variance_mode == VarianceMode::PerElement {
                        Some(self.stgcn_branch(b, i, "sigma")?)
                    } else {
                        None
                    };
                    let p = VstgcnBlockParams {
                        mu: self.stgcn_branch(b, i, "mu")?,
                        sigma,
                        spatial_variance: self
                            .variance_spec(b, &format!("block{i}.var_spatial"))?,
                        temporal_variance: self
                            .variance_spec(b, &format!("block{i}.var_temporal"))?,
                        stride: self.config.stride(i),
                        xi: self.xi(b, i, c_in, c_out)?,
                        bn: self.bn_params(b, &format!("block{i}.bn"))?,
                        rho,
                    };
                    vstgcn_block_forward(tape, &h, parts, &p, &acts, sampler, &mut bn_updates)?
                }
                ModelKind::Vagcn => {
                    let sigma = if self.config.variance_mode == VarianceMode::PerElement {
                        Some(self.agcn_branch(b, i, "sigma", c_in, c_out)?)
                    } else {
                        None
                    };
                    let p = VagcnBlockParams {
                        mu: self.agcn_branch(b, i, "mu", c_in, c_out)?,
                        sigma,
                        spatial_variance: self
                            .variance_spec(b, &format!("block{i}.var_spatial"))?,
                        temporal_variance: self
                            .variance_spec(b, &format!("block{i}.var_temporal"))?,
                        stride: self.config.stride(i),
                        xi: self.xi(b, i, c_in, c_out)?,
                        bn_outer: self.bn_params(b, &format!("block{i}.bn_outer"))?,
                        rho,
                    };
                    let out =
                        vagcn_block_forward(tape, &h, parts, &p, &acts, sampler, &mut bn_updates)?;
                    for (p_idx, a) in out.attn_mu.iter().enumerate() {
                        attentions.push(AttentionRecord {
                            layer: i,
                            partition: Some(p_idx),
                            mu: a.clone(),
                            sigma: out.attn_sigma.as_ref().map(|s| s[p_idx].clone()),
                        });
                    }
                    out.out
                }
                _ => unreachable!("spatial kinds handled separately"),
            };
        }
        let logits = self.readout(b, &h)?;
        Ok(ForwardOutput {
            logits,
            attentions,
            bn_updates,
        })
    }

    /// Fold batch statistics observed during a training step into the
    /// running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            if let Some(state) = self.bn.get_mut(&u.name) {
                state.update(&u.mean, &u.var);
            }
        }
    }
}
