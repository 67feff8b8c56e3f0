//! Losses, optimizers, the training loop, and pretrained initialization
//! of variational models.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::var::{inverse_softplus, VARIANCE_FLOOR};
use crate::layers::BnUpdate;
use crate::metrics::{f1, top1, Averaging};
use crate::model::{variance_bias_for, GraphContext, Model};
use crate::params::{Binder, ParamSet};
use crate::rng::RandomStream;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::uncertainty::{mc_predict, resolve_attention_cache};

pub const MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Stochastic forwards averaged per input in the training loss.
    pub train_samples_per_input: usize,
    pub seed: u64,
    /// Monte Carlo samples for the per-epoch metric evaluation.
    pub eval_samples: usize,
    /// Fraction of the dataset held out for validation-based selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            train_samples_per_input: 1,
            seed: 0,
            eval_samples: 16,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if self.train_samples_per_input == 0 || self.eval_samples == 0 {
            return Err(Error::config(
                "train_samples_per_input and eval_samples must be at least 1",
            ));
        }
        // zero is allowed so a frozen run can serve as a reproducibility probe
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "validation fraction {} must lie in [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Contents of a training config file: the architecture plus optional
/// training hyperparameters (missing fields take their defaults).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Parse and validate a JSON experiment description.
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Malformed(format!("experiment config: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(self).expect("config is always serializable");
        text.push('\n');
        text
    }
}

/// Load an experiment config from disk.
pub fn load_experiment(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}

/// One input of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub input: &'a Tensor,
    pub ctx: &'a GraphContext,
    pub label: usize,
}

/// Mean cross-entropy over `n_samples` stochastic forwards of every batch
/// item. Returns the scalar loss (attached to `tape`) and the batch-norm
/// updates collected from the forwards.
pub fn multi_sample_loss(
    tape: &Tape,
    binder: &Binder,
    model: &Model,
    batch: &[BatchItem],
    n_samples: usize,
    rng: &RandomStream,
) -> Result<(Tensor, Vec<BnUpdate>)> {
    if n_samples == 0 {
        return Err(Error::config("loss needs at least one sample per input"));
    }
    if batch.is_empty() {
        return Err(Error::data("loss needs a nonempty batch"));
    }
    for item in batch {
        if item.label >= model.config.n_classes {
            return Err(Error::data(format!(
                "label {} out of range for {} classes",
                item.label, model.config.n_classes
            )));
        }
    }
    let mut sum: Option<Tensor> = None;
    let mut bn_updates = Vec::new();
    for (i, item) in batch.iter().enumerate() {
        let item_rng = rng.split(i as u64);
        let cache = resolve_attention_cache(model, item.input, item.ctx, &item_rng)?;
        for k in 0..n_samples {
            let mut sampler = model.sampler(item_rng.split_str("draw").split(k as u64));
            let out = model.forward(binder, item.input, item.ctx, &mut sampler, cache.as_deref())?;
            bn_updates.extend(out.bn_updates);
            let ce = tape.cross_entropy(&out.logits, item.label)?;
            sum = Some(match sum {
                None => ce,
                Some(acc) => tape.add(&acc, &ce)?,
            });
        }
    }
    let total = (batch.len() * n_samples) as f64;
    Ok((tape.scale(&sum.unwrap(), 1.0 / total), bn_updates))
}

/// Optimizer moment buffers, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    momentum: BTreeMap<String, Vec<f64>>,
    adam_m: BTreeMap<String, Vec<f64>>,
    adam_v: BTreeMap<String, Vec<f64>>,
    t: u32,
}

/// Apply one optimizer step in place. Every parameter must have a
/// gradient entry of matching length.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptState,
    optimizer: OptimizerKind,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    for (name, param) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| {
            Error::contract(format!("no gradient recorded for parameter {name}"))
        })?;
        if g.len() != param.values.len() {
            return Err(Error::contract(format!(
                "gradient for {name} has {} entries, parameter has {}",
                g.len(),
                param.values.len()
            )));
        }
        match optimizer {
            OptimizerKind::Sgd => {
                for (v, &gi) in param.values.iter_mut().zip(g) {
                    *v -= lr * gi;
                }
            }
            OptimizerKind::SgdMomentum => {
                let buf = state
                    .momentum
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for ((v, b), &gi) in param.values.iter_mut().zip(buf.iter_mut()).zip(g) {
                    *b = MOMENTUM * *b + gi;
                    *v -= lr * *b;
                }
            }
            OptimizerKind::Adam => {
                let m = state
                    .adam_m
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                let v2 = state
                    .adam_v
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                let t = state.t as f64;
                let bc1 = 1.0 - ADAM_BETA1.powf(t);
                let bc2 = 1.0 - ADAM_BETA2.powf(t);
                for (i, (v, &gi)) in param.values.iter_mut().zip(g).enumerate() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                    v2[i] = ADAM_BETA2 * v2[i] + (1.0 - ADAM_BETA2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v2[i] / bc2;
                    *v -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub metric: f64,
}

/// Render the metric log as CSV with header `epoch,split,loss,metric`.
pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,split,loss,metric\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            r.split.as_str(),
            r.loss,
            r.metric
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model restored to the best-validation epoch.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// A dataset resolved against a model: per-sample inputs with their graph
/// contexts, ready for forwards.
pub struct PreparedData {
    pub contexts: Vec<GraphContext>,
    /// (input tensor, context index, label)
    pub items: Vec<(Tensor, usize, usize)>,
}

/// Check the dataset against the model and pair every sample with its graph
/// context. Spatial datasets carry one context per sample; spatiotemporal
/// datasets share a single skeleton context.
pub fn prepare(model: &Model, dataset: &Dataset) -> Result<PreparedData> {
    if dataset.n_samples() == 0 {
        return Err(Error::data("training needs a nonempty dataset"));
    }
    if dataset.n_classes() != model.config.n_classes {
        return Err(Error::incompatible(format!(
            "dataset has {} classes, model expects {}",
            dataset.n_classes(),
            model.config.n_classes
        )));
    }
    let channels = dataset.in_channels().unwrap();
    if channels != model.config.in_channels {
        return Err(Error::incompatible(format!(
            "dataset has {channels} feature channels, model expects {}",
            model.config.in_channels
        )));
    }
    match dataset {
        Dataset::Spatial(d) => {
            if model.config.model.is_spatiotemporal() {
                return Err(Error::incompatible(
                    "spatiotemporal model cannot train on a spatial dataset",
                ));
            }
            let mut contexts = Vec::with_capacity(d.samples.len());
            let mut items = Vec::with_capacity(d.samples.len());
            for (i, s) in d.samples.iter().enumerate() {
                contexts.push(GraphContext::spatial(&s.graph));
                items.push((s.features.clone(), i, s.label));
            }
            Ok(PreparedData { contexts, items })
        }
        Dataset::SpatioTemporal(d) => {
            if !model.config.model.is_spatiotemporal() {
                return Err(Error::incompatible(
                    "spatial model cannot train on a spatiotemporal dataset",
                ));
            }
            if model.n_nodes != Some(d.skeleton.n_nodes()) {
                return Err(Error::incompatible(format!(
                    "dataset skeleton has {} nodes, model was built for {:?}",
                    d.skeleton.n_nodes(),
                    model.n_nodes
                )));
            }
            let contexts = vec![GraphContext::skeleton(d.partition.clone())];
            let items = d
                .samples
                .iter()
                .map(|s| (s.x.clone(), 0, s.label))
                .collect();
            Ok(PreparedData { contexts, items })
        }
    }
}

fn shuffled(indices: &[usize], rng: &mut RandomStream) -> Vec<usize> {
    let mut out = indices.to_vec();
    // Fisher-Yates with the stream's own uniform ints
    for i in (1..out.len()).rev() {
        let j = rng.below(i + 1);
        out.swap(i, j);
    }
    out
}

/// Evaluate `indices` of the prepared data; returns (mean MC-integrated
/// NLL, metric). The metric is F1 for spatial tasks, top-1 otherwise.
fn evaluate_split(
    model: &Model,
    data: &PreparedData,
    indices: &[usize],
    k: usize,
    rng: &RandomStream,
    spatial: bool,
) -> Result<(f64, f64)> {
    let mut nll = 0.0;
    let mut classes = Vec::with_capacity(indices.len());
    let mut probs = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for (j, &i) in indices.iter().enumerate() {
        let (input, ctx_idx, label) = &data.items[i];
        let pred = mc_predict(
            model,
            input,
            &data.contexts[*ctx_idx],
            k,
            &rng.split(j as u64),
        )?;
        nll -= pred.class_probabilities[*label].max(1e-300).ln();
        classes.push(pred.argmax());
        probs.push(pred.class_probabilities.clone());
        labels.push(*label);
    }
    let metric = if spatial {
        let averaging = if model.config.n_classes == 2 {
            Averaging::Binary
        } else {
            Averaging::Macro
        };
        f1(&classes, &labels, averaging)?
    } else {
        top1(&probs, &labels)?
    };
    Ok((nll / indices.len() as f64, metric))
}

/// Train `model` on `dataset`; returns the best-validation model and the
/// per-epoch log. Fully deterministic given `cfg.seed`.
pub fn train(model: Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model;
    let data = prepare(&model, dataset)?;
    let spatial = !model.config.model.is_spatiotemporal();
    let root = RandomStream::new(cfg.seed);

    let n = data.items.len();
    let order = shuffled(
        &(0..n).collect::<Vec<usize>>(),
        &mut root.split_str("split"),
    );
    let val_n = ((n as f64) * cfg.val_fraction).floor() as usize;
    let val_idx: Vec<usize> = order[..val_n].to_vec();
    let train_idx: Vec<usize> = order[val_n..].to_vec();
    if train_idx.is_empty() {
        return Err(Error::data("validation split leaves no training samples"));
    }

    // metric used for model selection is computed on the validation split
    // when present, otherwise on the training split
    let eval_k = if model.config.model.is_variational() {
        cfg.eval_samples
    } else {
        1
    };

    let mut opt_state = OptState::default();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamSet, BTreeMap<String, crate::params::BnState>)> = None;

    for epoch in 0..cfg.epochs {
        let epoch_order = shuffled(
            &train_idx,
            &mut root.split_str("order").split(epoch as u64),
        );
        let mut loss_sum = 0.0;
        let mut loss_weight = 0usize;
        for (step, chunk) in epoch_order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| {
                    let (input, ctx_idx, label) = &data.items[i];
                    BatchItem {
                        input,
                        ctx: &data.contexts[*ctx_idx],
                        label: *label,
                    }
                })
                .collect();
            let tape = Tape::new();
            let binder = Binder::new(&tape, &model.params, true);
            let step_rng = root
                .split_str("loss")
                .split(epoch as u64)
                .split(step as u64);
            let (loss, bn_updates) = multi_sample_loss(
                &tape,
                &binder,
                &model,
                &batch,
                cfg.train_samples_per_input,
                &step_rng,
            )?;
            loss_sum += loss.values()[0] * chunk.len() as f64;
            loss_weight += chunk.len();
            tape.backward(&loss)?;
            let grads = binder.grads();
            drop(binder);
            optimizer_step(
                &mut model.params,
                &grads,
                &mut opt_state,
                cfg.optimizer,
                cfg.learning_rate,
            )?;
            model.apply_bn_updates(&bn_updates);
        }
        let train_loss = loss_sum / loss_weight as f64;
        let eval_rng = root.split_str("eval").split(epoch as u64);
        let (_, train_metric) = evaluate_split(
            &model,
            &data,
            &train_idx,
            eval_k,
            &eval_rng.split_str("train"),
            spatial,
        )?;
        log.push(EpochRecord {
            epoch,
            split: Split::Train,
            loss: train_loss,
            metric: train_metric,
        });
        let selection_metric = if val_idx.is_empty() {
            train_metric
        } else {
            let (val_loss, val_metric) = evaluate_split(
                &model,
                &data,
                &val_idx,
                eval_k,
                &eval_rng.split_str("val"),
                spatial,
            )?;
            log.push(EpochRecord {
                epoch,
                split: Split::Val,
                loss: val_loss,
                metric: val_metric,
            });
            val_metric
        };
        let improved = match &best {
            None => true,
            Some((m, _, _, _)) => selection_metric > *m,
        };
        if improved {
            best = Some((
                selection_metric,
                epoch,
                model.params.clone(),
                model.bn.clone(),
            ));
        }
    }

    let (best_metric, best_epoch, params, bn) = best.unwrap();
    model.params = params;
    model.bn = bn;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_metric,
    })
}

/// Initialize a fresh variational model from a trained deterministic twin:
/// μ-branch weights are copied, σ-branch weights are zeroed, and variance
/// heads are biased so every variance starts at `init_variance`.
pub fn init_from_pretrained(
    variational: &Model,
    pretrained: &Model,
    init_variance: f64,
) -> Result<Model> {
    let var_kind = variational.config.model;
    let det_kind = pretrained.config.model;
    match var_kind.deterministic_twin() {
        Some(twin) if twin == det_kind => {}
        _ => {
            return Err(Error::incompatible(format!(
                "{} cannot be initialized from a {} checkpoint",
                var_kind.name(),
                det_kind.name()
            )));
        }
    }
    if !(init_variance.is_finite() && init_variance >= VARIANCE_FLOOR) {
        return Err(Error::config(format!(
            "initial variance {init_variance} must be finite and at least {VARIANCE_FLOOR}"
        )));
    }

    let mut out = variational.clone();
    let mut consumed: BTreeSet<String> = BTreeSet::new();
    let bias_value = variance_bias_for(init_variance, variational.config.sigma_activation)?;
    let scale_value = inverse_softplus(init_variance - VARIANCE_FLOOR);

    for (name, param) in out.params.iter_mut() {
        let last = name.rsplit('.').next().unwrap_or("");
        let site_is_variance = name
            .split('.')
            .any(|seg| seg == "var" || seg == "var_spatial" || seg == "var_temporal");
        if site_is_variance && last == "bias" {
            param.values.iter_mut().for_each(|v| *v = 0.0);
            param.values[0] = bias_value;
            continue;
        }
        if site_is_variance && last == "scale" {
            param.values.iter_mut().for_each(|v| *v = 0.0);
            param.values[0] = scale_value;
            continue;
        }
        if name.contains(".sigma.") {
            param.values.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let source = if name.contains(".mu.") {
            name.replacen(".mu.", ".", 1)
        } else {
            name.clone()
        };
        let det = pretrained.params.get(&source).map_err(|_| {
            Error::incompatible(format!(
                "pretrained checkpoint is missing parameter {source} needed by {name}"
            ))
        })?;
        if det.shape != param.shape {
            return Err(Error::incompatible(format!(
                "parameter {name} has shape {:?}, pretrained {source} has {:?}",
                param.shape, det.shape
            )));
        }
        param.values.clone_from(&det.values);
        consumed.insert(source);
    }
    if let Some(extra) = pretrained.params.names().find(|n| !consumed.contains(*n)) {
        return Err(Error::incompatible(format!(
            "pretrained parameter {extra} has no destination in the variational model"
        )));
    }

    for (site, state) in out.bn.iter_mut() {
        if site.contains(".sigma.") {
            continue;
        }
        let source = if site.contains(".mu.") {
            site.replacen(".mu.", ".", 1)
        } else {
            site.clone()
        };
        let det = pretrained.bn.get(&source).ok_or_else(|| {
            Error::incompatible(format!(
                "pretrained checkpoint is missing batch-norm statistics for {source}"
            ))
        })?;
        *state = det.clone();
    }
    Ok(out)
}
