//! Evaluation metrics: F1, top-1 accuracy, predictive-uncertainty
//! summaries, and expected calibration error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::{argmax, entropy, Prediction};

/// Summary report for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub top1: f64,
    pub mean_entropy: f64,
    pub ece: f64,
    pub n_eval_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// F1 of class 1, the positive class of a two-class task.
    Binary,
    /// Unweighted mean of per-class F1 scores.
    Macro,
}

fn class_f1(predictions: &[usize], labels: &[usize], class: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        // no instances and no predictions of this class: count as perfect
        // so macro-F1 stays defined on tiny splits
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// F1 score over predicted class indices.
pub fn f1(predictions: &[usize], labels: &[usize], averaging: Averaging) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::data(
            "f1 needs equal-length, nonempty prediction and label vectors",
        ));
    }
    match averaging {
        Averaging::Binary => Ok(class_f1(predictions, labels, 1)),
        Averaging::Macro => {
            let n_classes = predictions
                .iter()
                .chain(labels)
                .max()
                .copied()
                .unwrap_or(0)
                + 1;
            let sum: f64 = (0..n_classes)
                .map(|c| class_f1(predictions, labels, c))
                .sum();
            Ok(sum / n_classes as f64)
        }
    }
}

/// Fraction of samples whose highest-scoring class matches the label.
/// Ties break toward the lowest class index. Scores may be probabilities
/// or logits; only the argmax matters.
pub fn top1(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::data(
            "top1 needs equal-length, nonempty score and label vectors",
        ));
    }
    let mut correct = 0usize;
    for (row, &label) in scores.iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::data(format!(
                "label {label} out of range for {} classes",
                row.len()
            )));
        }
        if argmax(row) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Per-sample uncertainty summary of a Monte Carlo prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    /// Entropy of the mean class distribution, in nats.
    pub entropy: f64,
    /// Largest per-class empirical variance.
    pub max_class_variance: f64,
}

pub fn predictive_uncertainty(prediction: &Prediction) -> UncertaintySummary {
    UncertaintySummary {
        entropy: entropy(&prediction.class_probabilities),
        max_class_variance: prediction
            .class_variance
            .iter()
            .cloned()
            .fold(0.0, f64::max),
    }
}

/// Expected calibration error with left-open equal-width bins over the
/// maximum class probability.
pub fn ece(probabilities: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(Error::config("ece needs at least one bin"));
    }
    if probabilities.len() != labels.len() {
        return Err(Error::data(
            "ece needs equal-length probability and label vectors",
        ));
    }
    let n = probabilities.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for (row, &label) in probabilities.iter().zip(labels) {
        let pred = argmax(row);
        let confidence = row[pred];
        // left-open bins ((b)/B, (b+1)/B]; confidence 0 lands in bin 0
        let bin = ((confidence * n_bins as f64).ceil() as usize)
            .saturating_sub(1)
            .min(n_bins - 1);
        count[bin] += 1;
        conf_sum[bin] += confidence;
        if pred == label {
            correct[bin] += 1;
        }
    }
    let mut total = 0.0;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let acc = correct[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += (count[b] as f64 / n as f64) * (acc - conf).abs();
    }
    Ok(total)
}

/// Default bin count for expected calibration error.
pub const ECE_BINS: usize = 10;

/// Assemble the evaluation report from per-sample Monte Carlo predictions.
pub fn eval_report(
    predictions: &[Prediction],
    labels: &[usize],
    averaging: Averaging,
) -> Result<EvalReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::data(
            "evaluation needs equal-length, nonempty predictions and labels",
        ));
    }
    let classes: Vec<usize> = predictions.iter().map(|p| p.argmax()).collect();
    let probs: Vec<Vec<f64>> = predictions
        .iter()
        .map(|p| p.class_probabilities.clone())
        .collect();
    let mean_entropy =
        predictions.iter().map(|p| p.entropy).sum::<f64>() / predictions.len() as f64;
    Ok(EvalReport {
        f1: f1(&classes, labels, averaging)?,
        top1: top1(&probs, labels)?,
        mean_entropy,
        ece: ece(&probs, labels, ECE_BINS)?,
        n_eval_samples: labels.len(),
    })
}
