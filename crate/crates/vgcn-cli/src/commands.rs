//! The five subcommands: generate, train, eval, attention, convert-fmci.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use vgcn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use vgcn::config::{FilterConfig, FilterRule, ModelKind};
use vgcn::data::{gen_ego_task, gen_skeleton_task, load_dataset, save_dataset, Dataset, EgoRule};
use vgcn::export::{attentions_to_dot, attentions_to_json};
use vgcn::metrics::{eval_report, Averaging, EvalReport};
use vgcn::model::{Model, INIT_VARIANCE};
use vgcn::rng::RandomStream;
use vgcn::train::{
    init_from_pretrained, load_experiment, metrics_csv, prepare, train, PreparedData,
};
use vgcn::uncertainty::{convert_vgat_to_fmci, mc_attention, mc_predict, Prediction};

use crate::manifest::{sibling, ManifestBuilder};
use crate::{CliError, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    /// Star/ring ego graphs with node-level action features.
    Ego,
    /// Chain skeletons with per-joint motion signals.
    Skeleton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    /// Label = majority sign of the periphery actions.
    NeighborMajority,
    /// Label = XOR of two designated neighbors (not linearly separable).
    XorPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleChoice {
    /// Verbatim asymmetric filter conditions.
    AsWritten,
    /// Both branches keyed on variance <= limit * mean.
    Consistent,
}

impl RuleChoice {
    fn to_filter_rule(self) -> FilterRule {
        match self {
            RuleChoice::AsWritten => FilterRule::AsWritten,
            RuleChoice::Consistent => FilterRule::Consistent,
        }
    }
}

fn parse_limit_arg(s: &str) -> Result<f64, String> {
    vgcn::config::parse_limit(s).map_err(|e| e.to_string())
}

/// Generate a synthetic dataset.
#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Task family to synthesize.
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Number of samples.
    #[arg(long)]
    pub samples: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset path.
    #[arg(long)]
    pub out: PathBuf,
    /// Label noise: flip probability (ego) or feature noise std (skeleton).
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Smallest ego-graph node count (ego task).
    #[arg(long, default_value_t = 5)]
    pub nodes_min: usize,
    /// Largest ego-graph node count (ego task).
    #[arg(long, default_value_t = 9)]
    pub nodes_max: usize,
    /// Feature channels per node (ego task).
    #[arg(long, default_value_t = 4)]
    pub features: usize,
    /// Labeling rule (ego task).
    #[arg(long, value_enum, default_value = "neighbor-majority")]
    pub rule: RuleArg,
    /// Joint count (skeleton task).
    #[arg(long, default_value_t = 8)]
    pub joints: usize,
    /// Frame count (skeleton task).
    #[arg(long, default_value_t = 24)]
    pub frames: usize,
    /// Number of motion classes (skeleton task).
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let dataset = match args.task {
        TaskArg::Ego => {
            let rule = match args.rule {
                RuleArg::NeighborMajority => EgoRule::NeighborMajority,
                RuleArg::XorPair => EgoRule::XorPair,
            };
            Dataset::Spatial(
                gen_ego_task(
                    args.samples,
                    (args.nodes_min, args.nodes_max),
                    args.features,
                    rule,
                    args.noise,
                    args.seed,
                )
                .map_err(|e| CliError::stage(Stage::ConfigFile, e))?,
            )
        }
        TaskArg::Skeleton => Dataset::SpatioTemporal(Box::new(
            gen_skeleton_task(
                args.samples,
                args.joints,
                args.frames,
                args.classes,
                args.noise,
                args.seed,
            )
            .map_err(|e| CliError::stage(Stage::ConfigFile, e))?,
        )),
    };
    save_dataset(&dataset, &args.out).map_err(|e| CliError::stage(Stage::Run, e))?;

    let config = json!({
        "task": match args.task { TaskArg::Ego => "ego", TaskArg::Skeleton => "skeleton" },
        "samples": args.samples,
        "noise": args.noise,
        "nodes_min": args.nodes_min,
        "nodes_max": args.nodes_max,
        "features": args.features,
        "rule": match args.rule {
            RuleArg::NeighborMajority => "neighbor-majority",
            RuleArg::XorPair => "xor-pair",
        },
        "joints": args.joints,
        "frames": args.frames,
        "classes": args.classes,
    });
    let mut manifest = ManifestBuilder::new("generate", config, Some(args.seed));
    manifest.output(&args.out);
    manifest.write(&args.out)?;

    println!(
        "wrote {} ({} samples, {})",
        args.out.display(),
        dataset.n_samples(),
        dataset.kind_name()
    );
    Ok(())
}

/// Train a model described by a JSON experiment config.
#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config file (model architecture + training settings).
    #[arg(long)]
    pub config: PathBuf,
    /// Training dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint path; metrics CSV and manifest are written alongside.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Deterministic checkpoint that seeds the mean branch of a variational model.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Initial variance given to every sampling site when --pretrained is used.
    #[arg(long, default_value_t = INIT_VARIANCE)]
    pub init_variance: f64,
}

fn dataset_node_count(dataset: &Dataset) -> Option<usize> {
    match dataset {
        Dataset::Spatial(_) => None,
        Dataset::SpatioTemporal(d) => Some(d.skeleton.n_nodes()),
    }
}

pub fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut exp =
        load_experiment(&args.config).map_err(|e| CliError::stage(Stage::ConfigFile, e))?;
    if let Some(seed) = args.seed {
        exp.train.seed = seed;
    }
    let dataset = load_dataset(&args.data).map_err(|e| CliError::stage(Stage::DataFile, e))?;

    let init_rng = RandomStream::new(exp.train.seed).split_str("init");
    let mut model = Model::init(exp.model.clone(), dataset_node_count(&dataset), &init_rng)
        .map_err(|e| CliError::stage(Stage::Run, e))?;

    if let Some(pretrained_path) = &args.pretrained {
        let (pretrained, _) = load_checkpoint(pretrained_path)
            .map_err(|e| CliError::stage(Stage::CheckpointFile, e))?;
        model = init_from_pretrained(&model, &pretrained, args.init_variance)
            .map_err(|e| CliError::stage(Stage::CheckpointFile, e))?;
    }

    let outcome = train(model, &dataset, &exp.train).map_err(|e| CliError::stage(Stage::Run, e))?;

    let meta = CheckpointMeta {
        seed: exp.train.seed,
        epoch: outcome.best_epoch,
    };
    save_checkpoint(&outcome.model, &meta, &args.out)
        .map_err(|e| CliError::stage(Stage::Run, e))?;
    let csv_path = sibling(&args.out, "metrics.csv");
    std::fs::write(&csv_path, metrics_csv(&outcome.log))
        .map_err(|e| CliError::internal(format!("cannot write {}: {e}", csv_path.display())))?;

    let config = json!({
        "experiment": serde_json::to_value(&exp).expect("config serializes"),
        "pretrained": args.pretrained.as_ref().map(|p| p.display().to_string()),
        "init_variance": args.init_variance,
    });
    let mut manifest = ManifestBuilder::new("train", config, Some(exp.train.seed));
    manifest.input(&args.config);
    manifest.input(&args.data);
    if let Some(p) = &args.pretrained {
        manifest.input(p);
    }
    manifest.output(&args.out);
    manifest.output(&csv_path);
    manifest.write(&args.out)?;

    println!(
        "best epoch {} (val metric {:.4}); wrote {} and {}",
        outcome.best_epoch,
        outcome.best_metric,
        args.out.display(),
        csv_path.display()
    );
    Ok(())
}

/// Evaluate a checkpoint on a dataset.
#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Monte Carlo draws per input.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Print the report as JSON instead of aligned text.
    #[arg(long)]
    pub json: bool,
    /// Optional path for the JSON report; the manifest is written alongside.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// RNG seed for the Monte Carlo draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct Quantiles {
    min: f64,
    q25: f64,
    median: f64,
    q75: f64,
    max: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn entropy_quantiles(predictions: &[Prediction]) -> Quantiles {
    let mut entropies: Vec<f64> = predictions.iter().map(|p| p.entropy).collect();
    entropies.sort_by(f64::total_cmp);
    Quantiles {
        min: quantile(&entropies, 0.0),
        q25: quantile(&entropies, 0.25),
        median: quantile(&entropies, 0.5),
        q75: quantile(&entropies, 0.75),
        max: quantile(&entropies, 1.0),
    }
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: EvalReport,
    /// Mean over inputs of sqrt(max-class variance / K): the Monte Carlo
    /// standard error of the dominant class probability.
    mean_standard_error: f64,
    entropy_quantiles: Quantiles,
    /// Monte Carlo draws per input.
    mc_samples: usize,
}

fn predict_dataset(
    model: &Model,
    data: &PreparedData,
    k: usize,
    seed: u64,
) -> Result<(Vec<Prediction>, Vec<usize>), CliError> {
    let rng = RandomStream::new(seed).split_str("eval");
    let mut predictions = Vec::with_capacity(data.items.len());
    let mut labels = Vec::with_capacity(data.items.len());
    for (i, (input, ctx_idx, label)) in data.items.iter().enumerate() {
        let pred = mc_predict(model, input, &data.contexts[*ctx_idx], k, &rng.split(i as u64))
            .map_err(|e| CliError::stage(Stage::Run, e))?;
        predictions.push(pred);
        labels.push(*label);
    }
    Ok((predictions, labels))
}

pub fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (model, _) =
        load_checkpoint(&args.ckpt).map_err(|e| CliError::stage(Stage::CheckpointFile, e))?;
    let dataset = load_dataset(&args.data).map_err(|e| CliError::stage(Stage::DataFile, e))?;
    let data = prepare(&model, &dataset).map_err(|e| CliError::stage(Stage::Run, e))?;

    let (predictions, labels) = predict_dataset(&model, &data, args.samples, args.seed)?;
    let averaging = if model.config.n_classes == 2 {
        Averaging::Binary
    } else {
        Averaging::Macro
    };
    let report =
        eval_report(&predictions, &labels, averaging).map_err(|e| CliError::stage(Stage::Run, e))?;
    let mean_standard_error = predictions
        .iter()
        .map(|p| {
            let max_var = p.class_variance.iter().fold(0.0_f64, |a, &v| a.max(v));
            (max_var / p.n_samples as f64).sqrt()
        })
        .sum::<f64>()
        / predictions.len() as f64;
    let output = EvalOutput {
        report,
        mean_standard_error,
        entropy_quantiles: entropy_quantiles(&predictions),
        mc_samples: predictions.first().map_or(0, |p| p.n_samples),
    };

    let mut json_text = serde_json::to_string_pretty(&output)
        .map_err(|e| CliError::internal(format!("report serialization failed: {e}")))?;
    json_text.push('\n');

    if args.json {
        print!("{json_text}");
    } else {
        let q = &output.entropy_quantiles;
        println!("f1                   {:.6}", output.report.f1);
        println!("top1                 {:.6}", output.report.top1);
        println!("mean entropy         {:.6}", output.report.mean_entropy);
        println!("ece                  {:.6}", output.report.ece);
        println!("mean standard error  {:.6}", output.mean_standard_error);
        println!(
            "entropy quantiles    min {:.4}  q25 {:.4}  median {:.4}  q75 {:.4}  max {:.4}",
            q.min, q.q25, q.median, q.q75, q.max
        );
        println!(
            "inputs {}   draws per input {}",
            output.report.n_eval_samples, output.mc_samples
        );
    }

    if let Some(out) = &args.out {
        std::fs::write(out, &json_text)
            .map_err(|e| CliError::internal(format!("cannot write {}: {e}", out.display())))?;
        let config = json!({"samples": args.samples, "json": args.json});
        let mut manifest = ManifestBuilder::new("eval", config, Some(args.seed));
        manifest.input(&args.ckpt);
        manifest.input(&args.data);
        manifest.output(out);
        manifest.write(out)?;
    }
    Ok(())
}

/// Export per-layer attention means and variances.
#[derive(Args, Debug)]
pub struct AttentionArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset file providing the conditioning input.
    #[arg(long)]
    pub data: PathBuf,
    /// Which dataset sample conditions the attention estimate.
    #[arg(long, default_value_t = 0)]
    pub sample_index: usize,
    /// Monte Carlo draws.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Output format.
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
    /// RNG seed for the Monte Carlo draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn item_at(
    data: &PreparedData,
    index: usize,
) -> Result<(&vgcn::tensor::Tensor, &vgcn::model::GraphContext), CliError> {
    let (input, ctx_idx, _) = data.items.get(index).ok_or_else(|| {
        CliError::config(format!(
            "sample index {index} out of range; dataset has {} samples",
            data.items.len()
        ))
    })?;
    Ok((input, &data.contexts[*ctx_idx]))
}

pub fn run_attention(args: &AttentionArgs) -> Result<(), CliError> {
    let (model, _) =
        load_checkpoint(&args.ckpt).map_err(|e| CliError::stage(Stage::CheckpointFile, e))?;
    let dataset = load_dataset(&args.data).map_err(|e| CliError::stage(Stage::DataFile, e))?;
    let data = prepare(&model, &dataset).map_err(|e| CliError::stage(Stage::Run, e))?;
    let (input, ctx) = item_at(&data, args.sample_index)?;

    let rng = RandomStream::new(args.seed).split_str("attention-export");
    let attentions = mc_attention(&model, input, ctx, args.samples, &rng)
        .map_err(|e| CliError::stage(Stage::Run, e))?;
    let text = match args.format {
        FormatArg::Json => attentions_to_json(&attentions),
        FormatArg::Dot => attentions_to_dot(&attentions),
    }
    .map_err(|e| CliError::stage(Stage::Run, e))?;
    std::fs::write(&args.out, text)
        .map_err(|e| CliError::internal(format!("cannot write {}: {e}", args.out.display())))?;

    let config = json!({
        "sample_index": args.sample_index,
        "samples": args.samples,
        "format": match args.format { FormatArg::Json => "json", FormatArg::Dot => "dot" },
    });
    let mut manifest = ManifestBuilder::new("attention", config, Some(args.seed));
    manifest.input(&args.ckpt);
    manifest.input(&args.data);
    manifest.output(&args.out);
    manifest.write(&args.out)?;

    println!(
        "wrote {} ({} attention matrices)",
        args.out.display(),
        attentions.len()
    );
    Ok(())
}

/// Convert a VGAT checkpoint into a UA-FMCI checkpoint.
#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Source VGAT checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset supplying the calibration input.
    #[arg(long)]
    pub data: PathBuf,
    /// Monte Carlo draws for attention calibration.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Filter limit l; pass `inf` to keep every attention entry.
    #[arg(long, default_value = "1.0", value_parser = parse_limit_arg)]
    pub limit: f64,
    /// Replacement value p written over filtered-out means.
    #[arg(long, default_value_t = 0.01)]
    pub replacement: f64,
    /// Which filter rule to apply.
    #[arg(long, value_enum, default_value = "as-written")]
    pub rule: RuleChoice,
    /// Calibration sample index.
    #[arg(long, default_value_t = 0)]
    pub sample_index: usize,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// RNG seed for the calibration draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_convert(args: &ConvertArgs) -> Result<(), CliError> {
    let (model, meta) =
        load_checkpoint(&args.ckpt).map_err(|e| CliError::stage(Stage::CheckpointFile, e))?;
    if model.config.model != ModelKind::Vgat {
        return Err(CliError::new(
            4,
            format!(
                "FMCI conversion needs a vgat checkpoint, found {}",
                model.config.model.name()
            ),
        ));
    }
    let dataset = load_dataset(&args.data).map_err(|e| CliError::stage(Stage::DataFile, e))?;
    let data = prepare(&model, &dataset).map_err(|e| CliError::stage(Stage::Run, e))?;
    let (input, ctx) = item_at(&data, args.sample_index)?;

    let filter = FilterConfig {
        limit: args.limit,
        replacement: args.replacement,
        rule: args.rule.to_filter_rule(),
    };
    filter
        .validate()
        .map_err(|e| CliError::stage(Stage::ConfigFile, e))?;

    let rng = RandomStream::new(args.seed).split_str("convert");
    let converted = convert_vgat_to_fmci(&model, input, ctx, args.samples, &filter, &rng)
        .map_err(|e| match e {
            // capability mismatch here is an architecture problem per the
            // conversion contract
            vgcn::error::Error::UnsupportedModel(msg) => CliError::new(4, msg),
            other => CliError::stage(Stage::Run, other),
        })?;
    save_checkpoint(&converted, &meta, &args.out).map_err(|e| CliError::stage(Stage::Run, e))?;

    let config = json!({
        "filter": serde_json::to_value(&filter).expect("filter serializes"),
        "samples": args.samples,
        "sample_index": args.sample_index,
    });
    let mut manifest = ManifestBuilder::new("convert-fmci", config, Some(args.seed));
    manifest.input(&args.ckpt);
    manifest.input(&args.data);
    manifest.output(&args.out);
    manifest.write(&args.out)?;

    println!("wrote {}", args.out.display());
    Ok(())
}
