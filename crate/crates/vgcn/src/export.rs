//! Serialization of Monte Carlo attention statistics.
//!
//! Two renderings of the same data are offered:
//! - a JSON array of per-layer records (`layer`, `partition`, `mean`,
//!   `variance`, `n_samples`) for programmatic consumption, and
//! - a Graphviz DOT digraph where each attention matrix becomes a cluster
//!   whose edges carry `attn_mean` / `attn_var` attributes and whose pen
//!   width scales with the attention mean.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::uncertainty::UncertainAttention;

#[derive(Serialize)]
struct AttentionRecord {
    layer: usize,
    partition: Option<usize>,
    mean: Vec<Vec<f64>>,
    variance: Vec<Vec<f64>>,
    n_samples: usize,
}

fn matrix_rows(label: &str, t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "attention export expects rank-2 {label} tensors, got shape {shape:?}"
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let values = t.values();
    Ok((0..rows)
        .map(|r| values[r * cols..(r + 1) * cols].to_vec())
        .collect())
}

/// Render attention statistics as a JSON array, one record per
/// layer/partition, in the order given.
pub fn attentions_to_json(attentions: &[UncertainAttention]) -> Result<String> {
    let records = attentions
        .iter()
        .map(|a| {
            Ok(AttentionRecord {
                layer: a.layer,
                partition: a.partition,
                mean: matrix_rows("mean", &a.mean)?,
                variance: matrix_rows("variance", &a.variance)?,
                n_samples: a.n_samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut text = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::Contract(format!("attention serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn dot_float(v: f64) -> String {
    let mut s = format!("{v:?}");
    if let Some(stripped) = s.strip_suffix(".0") {
        s = stripped.to_string();
    }
    s
}

/// Render attention statistics as a Graphviz DOT digraph.
///
/// Each attention matrix becomes one cluster with a node per graph vertex.
/// An edge is emitted for every entry whose mean or variance is nonzero, so
/// masked (never-attended) pairs are absent from the output. Edge pen width
/// scales with |mean| relative to the largest mean in the same matrix; the
/// exact statistics travel in the `attn_mean` and `attn_var` attributes.
pub fn attentions_to_dot(attentions: &[UncertainAttention]) -> Result<String> {
    let mut out = String::from("digraph attention {\n  rankdir=LR;\n");
    for (idx, attn) in attentions.iter().enumerate() {
        let mean = matrix_rows("mean", &attn.mean)?;
        let variance = matrix_rows("variance", &attn.variance)?;
        if mean.len() != variance.len()
            || mean.first().map(Vec::len) != variance.first().map(Vec::len)
        {
            return Err(Error::Contract(format!(
                "attention for layer {} has mismatched mean/variance shapes",
                attn.layer
            )));
        }
        let title = match attn.partition {
            Some(p) => format!("layer {} / partition {p}", attn.layer),
            None => format!("layer {}", attn.layer),
        };
        writeln!(out, "  subgraph cluster_{idx} {{").unwrap();
        writeln!(out, "    label=\"{}\";", dot_escape(&title)).unwrap();
        let n_rows = mean.len();
        let n_cols = mean.first().map_or(0, Vec::len);
        for node in 0..n_rows.max(n_cols) {
            writeln!(out, "    a{idx}_{node} [label=\"{node}\"];").unwrap();
        }
        let max_abs = mean
            .iter()
            .flatten()
            .fold(0.0_f64, |acc, &v| acc.max(v.abs()));
        for (src, (mean_row, var_row)) in mean.iter().zip(&variance).enumerate() {
            for (dst, (&m, &v)) in mean_row.iter().zip(var_row).enumerate() {
                if m == 0.0 && v == 0.0 {
                    continue;
                }
                let penwidth = if max_abs > 0.0 {
                    0.5 + 4.5 * m.abs() / max_abs
                } else {
                    1.0
                };
                writeln!(
                    out,
                    "    a{idx}_{src} -> a{idx}_{dst} [penwidth=\"{:.3}\", attn_mean=\"{}\", attn_var=\"{}\"];",
                    penwidth,
                    dot_float(m),
                    dot_float(v),
                )
                .unwrap();
            }
        }
        writeln!(out, "  }}").unwrap();
    }
    out.push_str("}\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn sample_attention() -> UncertainAttention {
        UncertainAttention {
            layer: 0,
            partition: Some(1),
            mean: Tensor::new(vec![2, 2], vec![0.0, 0.5, 0.25, 0.0]).unwrap(),
            variance: Tensor::new(vec![2, 2], vec![0.0, 0.125, 0.0625, 0.0]).unwrap(),
            n_samples: 64,
        }
    }

    #[test]
    fn json_export_round_trips_values_bitwise() {
        let text = attentions_to_json(&[sample_attention()]).unwrap();
        let parsed: Value = serde_json::from_str(&text).unwrap();
        let rec = &parsed[0];
        assert_eq!(rec["layer"], 0);
        assert_eq!(rec["partition"], 1);
        assert_eq!(rec["n_samples"], 64);
        assert_eq!(rec["mean"][0][1].as_f64().unwrap().to_bits(), 0.5_f64.to_bits());
        assert_eq!(
            rec["variance"][1][0].as_f64().unwrap().to_bits(),
            0.0625_f64.to_bits()
        );
    }

    #[test]
    fn json_export_spatial_attention_has_null_partition() {
        let mut attn = sample_attention();
        attn.partition = None;
        let text = attentions_to_json(&[attn]).unwrap();
        let parsed: Value = serde_json::from_str(&text).unwrap();
        assert!(parsed[0]["partition"].is_null());
    }

    #[test]
    fn json_export_of_empty_list_is_empty_array() {
        assert_eq!(attentions_to_json(&[]).unwrap(), "[]\n");
    }

    #[test]
    fn dot_export_emits_edges_only_for_nonzero_entries() {
        let dot = attentions_to_dot(&[sample_attention()]).unwrap();
        assert!(dot.contains("a0_0 -> a0_1"));
        assert!(dot.contains("a0_1 -> a0_0"));
        assert!(!dot.contains("a0_0 -> a0_0"));
        assert!(!dot.contains("a0_1 -> a0_1"));
        assert!(dot.contains("attn_mean=\"0.5\""));
        assert!(dot.contains("attn_var=\"0.125\""));
    }

    #[test]
    fn dot_export_has_balanced_structure() {
        let second = UncertainAttention {
            layer: 1,
            partition: None,
            mean: Tensor::new(vec![2, 2], vec![-0.5, 0.0, 0.0, 1e-12]).unwrap(),
            variance: Tensor::zeros(vec![2, 2]),
            n_samples: 8,
        };
        let dot = attentions_to_dot(&[sample_attention(), second]).unwrap();
        assert!(dot.starts_with("digraph attention {"));
        assert!(dot.ends_with("}\n"));
        let opens = dot.matches('{').count();
        let closes = dot.matches('}').count();
        assert_eq!(opens, closes);
        assert_eq!(dot.matches('"').count() % 2, 0, "quotes must be balanced");
        for line in dot.lines() {
            let trimmed = line.trim();
            if trimmed.contains("->") || trimmed.contains("[label=") || trimmed.contains("label=\"")
            {
                assert!(trimmed.ends_with(';'), "statement not terminated: {trimmed}");
            }
        }
        assert!(dot.contains("subgraph cluster_0"));
        assert!(dot.contains("subgraph cluster_1"));
        assert!(dot.contains("attn_mean=\"-0.5\""));
    }

    #[test]
    fn dot_export_of_zero_matrix_has_nodes_but_no_edges() {
        let attn = UncertainAttention {
            layer: 0,
            partition: Some(0),
            mean: Tensor::zeros(vec![3, 3]),
            variance: Tensor::zeros(vec![3, 3]),
            n_samples: 4,
        };
        let dot = attentions_to_dot(&[attn]).unwrap();
        assert!(!dot.contains("->"));
        assert!(dot.contains("a0_2 [label=\"2\"];"));
    }

    #[test]
    fn rank_mismatch_is_a_contract_error() {
        let attn = UncertainAttention {
            layer: 0,
            partition: None,
            mean: Tensor::new(vec![4], vec![0.0; 4]).unwrap(),
            variance: Tensor::new(vec![4], vec![0.0; 4]).unwrap(),
            n_samples: 2,
        };
        assert!(matches!(
            attentions_to_json(&[attn]),
            Err(Error::Contract(_))
        ));
    }
}
