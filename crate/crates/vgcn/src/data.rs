//! Synthetic task generators and dataset file I/O.
//!
//! Two task families: an ego-graph prediction task over small random
//! graphs (spatial), and a skeleton motion-classification task over a
//! fixed chain skeleton (spatiotemporal). Both are pure functions of
//! their configuration and seed.

use std::fs;
use std::path::Path;

use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::graph::{partition_skeleton, GraphSpec, PartitionedAdjacency};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

/// Structural flavor of a spatial task: whether the ego label reflects a
/// future step (lead-lag) or the same time step (simultaneous).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskTag {
    LeadLag,
    Simultaneous,
}

impl TaskTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskTag::LeadLag => "lead-lag",
            TaskTag::Simultaneous => "simultaneous",
        }
    }

    fn from_str(s: &str) -> Option<TaskTag> {
        match s {
            "lead-lag" => Some(TaskTag::LeadLag),
            "simultaneous" => Some(TaskTag::Simultaneous),
            _ => None,
        }
    }
}

/// Labeling rule for the ego task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EgoRule {
    /// Label 1 when the mean periphery action is positive. Linearly
    /// learnable from aggregated features.
    NeighborMajority,
    /// XOR of the first two periphery actions. Not linearly separable
    /// from aggregated features.
    XorPair,
}

#[derive(Debug, Clone)]
pub struct SpatialSample {
    pub graph: GraphSpec,
    /// Node features, `[N, C]`.
    pub features: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct SpatialDataset {
    pub samples: Vec<SpatialSample>,
    pub n_classes: usize,
    pub task_tag: TaskTag,
}

#[derive(Debug, Clone)]
pub struct SpatioTemporalSample {
    /// Input tensor, `[C, T, N]`.
    pub x: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct SpatioTemporalDataset {
    pub skeleton: GraphSpec,
    pub center: usize,
    /// Partitioning of `skeleton` around `center`; derived, not stored.
    pub partition: PartitionedAdjacency,
    pub samples: Vec<SpatioTemporalSample>,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Spatial(SpatialDataset),
    SpatioTemporal(Box<SpatioTemporalDataset>),
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        match self {
            Dataset::Spatial(d) => d.samples.len(),
            Dataset::SpatioTemporal(d) => d.samples.len(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Dataset::Spatial(d) => d.n_classes,
            Dataset::SpatioTemporal(d) => d.n_classes,
        }
    }

    /// Feature channel count of the stored inputs.
    pub fn in_channels(&self) -> Option<usize> {
        match self {
            Dataset::Spatial(d) => d.samples.first().map(|s| s.features.shape()[1]),
            Dataset::SpatioTemporal(d) => d.samples.first().map(|s| s.x.shape()[0]),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Dataset::Spatial(_) => "spatial",
            Dataset::SpatioTemporal(_) => "spatiotemporal",
        }
    }
}

/// Generate the ego-graph prediction task: each sample is a hub node with
/// a star or ring periphery; periphery node actions live in feature
/// channel 0 and the hub's label is computed by `rule`, then flipped with
/// probability `noise`.
pub fn gen_ego_task(
    n_samples: usize,
    n_nodes_range: (usize, usize),
    n_features: usize,
    rule: EgoRule,
    noise: f64,
    seed: u64,
) -> Result<SpatialDataset> {
    let (lo, hi) = n_nodes_range;
    if n_samples == 0 {
        return Err(Error::config("ego task needs at least one sample"));
    }
    if lo < 3 || hi < lo {
        return Err(Error::config(format!(
            "ego node-count range [{lo}, {hi}] is degenerate; need 3 <= min <= max"
        )));
    }
    if n_features == 0 {
        return Err(Error::config("ego task needs at least one feature channel"));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::config(format!(
            "label noise {noise} must lie in [0, 1)"
        )));
    }
    let root = RandomStream::new(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut r = root.split(i as u64);
        let n = lo + r.below(hi - lo + 1);
        let ring = r.bernoulli(0.5);
        let mut edges: Vec<(usize, usize)> = (1..n).map(|j| (0, j)).collect();
        if ring && n >= 4 {
            for j in 1..n {
                let next = if j + 1 < n { j + 1 } else { 1 };
                if next > j {
                    edges.push((j, next));
                }
            }
            edges.push((n - 1, 1));
        }
        let graph = GraphSpec::from_edges(n, &edges)?;

        // periphery actions; re-draw on ties so the majority is defined
        let mut actions = vec![0.0; n - 1];
        for _ in 0..100 {
            for a in actions.iter_mut() {
                *a = if r.bernoulli(0.5) { 1.0 } else { -1.0 };
            }
            let sum: f64 = actions.iter().sum();
            if rule == EgoRule::XorPair || sum != 0.0 {
                break;
            }
        }
        if rule == EgoRule::NeighborMajority && actions.iter().sum::<f64>() == 0.0 {
            actions[0] = 1.0;
        }

        let mut feat = vec![0.0; n * n_features];
        for (j, &a) in actions.iter().enumerate() {
            let node = j + 1;
            feat[node * n_features] = a;
            for c in 1..n_features {
                feat[node * n_features + c] = r.standard_normal();
            }
        }
        let mut label = match rule {
            EgoRule::NeighborMajority => usize::from(actions.iter().sum::<f64>() > 0.0),
            EgoRule::XorPair => usize::from((actions[0] > 0.0) != (actions[1] > 0.0)),
        };
        if noise > 0.0 && r.uniform() < noise {
            label = 1 - label;
        }
        samples.push(SpatialSample {
            graph,
            features: Tensor::new(vec![n, n_features], feat)?,
            label,
        });
    }
    Ok(SpatialDataset {
        samples,
        n_classes: 2,
        task_tag: match rule {
            EgoRule::NeighborMajority => TaskTag::LeadLag,
            EgoRule::XorPair => TaskTag::Simultaneous,
        },
    })
}

/// Generate the skeleton motion task: a fixed chain skeleton whose joints
/// oscillate with a class-specific frequency, plus additive Gaussian
/// coordinate noise with standard deviation `noise`.
pub fn gen_skeleton_task(
    n_samples: usize,
    n_joints: usize,
    t: usize,
    motion_classes: usize,
    noise: f64,
    seed: u64,
) -> Result<SpatioTemporalDataset> {
    if n_samples == 0 {
        return Err(Error::config("skeleton task needs at least one sample"));
    }
    if n_joints < 3 {
        return Err(Error::config(format!(
            "skeleton task needs at least 3 joints, got {n_joints}"
        )));
    }
    if t < 8 {
        return Err(Error::config(format!(
            "skeleton task needs at least 8 frames, got {t}"
        )));
    }
    if motion_classes < 2 {
        return Err(Error::config("skeleton task needs at least 2 classes"));
    }
    if 2 * motion_classes >= t {
        return Err(Error::config(format!(
            "{motion_classes} classes need more than {} frames to stay distinguishable",
            2 * motion_classes
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config(format!(
            "coordinate noise {noise} must be finite and nonnegative"
        )));
    }
    let edges: Vec<(usize, usize)> = (0..n_joints - 1).map(|j| (j, j + 1)).collect();
    let skeleton = GraphSpec::from_edges(n_joints, &edges)?;
    let center = n_joints / 2;
    let partition = partition_skeleton(&skeleton, center, None)?;

    const C: usize = 2;
    let root = RandomStream::new(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut r = root.split(i as u64);
        let label = i % motion_classes;
        let freq = (label + 1) as f64;
        let phase = r.uniform() * std::f64::consts::TAU;
        let mut x = vec![0.0; C * t * n_joints];
        for ti in 0..t {
            for j in 0..n_joints {
                let angle = std::f64::consts::TAU * freq * ti as f64 / t as f64
                    + phase
                    + j as f64 * std::f64::consts::FRAC_PI_4;
                let base = [angle.sin(), angle.cos()];
                for (c, &b) in base.iter().enumerate() {
                    x[(c * t + ti) * n_joints + j] = b + noise * r.standard_normal();
                }
            }
        }
        samples.push(SpatioTemporalSample {
            x: Tensor::new(vec![C, t, n_joints], x)?,
            label,
        });
    }
    Ok(SpatioTemporalDataset {
        skeleton,
        center,
        partition,
        samples,
        n_classes: motion_classes,
    })
}

fn number(v: f64) -> Result<Value> {
    Number::from_f64(v)
        .map(Value::Number)
        .ok_or_else(|| Error::contract(format!("non-finite value {v} cannot be serialized")))
}

fn matrix_value(values: &[f64], rows: usize, cols: usize) -> Result<Value> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row: Result<Vec<Value>> =
            (0..cols).map(|c| number(values[r * cols + c])).collect();
        out.push(Value::Array(row?));
    }
    Ok(Value::Array(out))
}

fn cube_value(t: &Tensor) -> Result<Value> {
    let (c, tt, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let v = t.values();
    let mut out = Vec::with_capacity(c);
    for ci in 0..c {
        out.push(matrix_value(&v[ci * tt * n..(ci + 1) * tt * n], tt, n)?);
    }
    Ok(Value::Array(out))
}

/// Serialize a dataset to a single JSON document.
pub fn dataset_to_json(ds: &Dataset) -> Result<String> {
    let mut root = Map::new();
    root.insert("kind".into(), Value::String(ds.kind_name().into()));
    root.insert("n_classes".into(), Value::from(ds.n_classes() as u64));
    match ds {
        Dataset::Spatial(d) => {
            root.insert("task".into(), Value::String(d.task_tag.as_str().into()));
            let samples: Result<Vec<Value>> = d
                .samples
                .iter()
                .map(|s| {
                    let n = s.graph.n_nodes();
                    let mut m = Map::new();
                    m.insert(
                        "adjacency".into(),
                        matrix_value(s.graph.adjacency(), n, n)?,
                    );
                    let (rows, cols) = (s.features.shape()[0], s.features.shape()[1]);
                    m.insert("x".into(), matrix_value(s.features.values(), rows, cols)?);
                    m.insert("label".into(), Value::from(s.label as u64));
                    Ok(Value::Object(m))
                })
                .collect();
            root.insert("samples".into(), Value::Array(samples?));
        }
        Dataset::SpatioTemporal(d) => {
            let n = d.skeleton.n_nodes();
            root.insert(
                "adjacency".into(),
                matrix_value(d.skeleton.adjacency(), n, n)?,
            );
            root.insert("center".into(), Value::from(d.center as u64));
            let samples: Result<Vec<Value>> = d
                .samples
                .iter()
                .map(|s| {
                    let mut m = Map::new();
                    m.insert("x".into(), cube_value(&s.x)?);
                    m.insert("label".into(), Value::from(s.label as u64));
                    Ok(Value::Object(m))
                })
                .collect();
            root.insert("samples".into(), Value::Array(samples?));
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(root))
        .map_err(|e| Error::contract(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_json(ds)?)?;
    Ok(())
}

fn want_obj<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::schema(path, "expected an object"))
}

fn want_field<'a>(m: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    m.get(key)
        .ok_or_else(|| Error::schema(format!("{path}.{key}"), "missing field"))
}

fn want_usize(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Error::schema(path, "expected a nonnegative integer"))
}

fn want_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::schema(path, "expected a number"))
}

fn want_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::schema(path, "expected an array"))
}

/// Parse a rectangular matrix of numbers; returns (rows, cols, values).
fn parse_matrix(v: &Value, path: &str) -> Result<(usize, usize, Vec<f64>)> {
    let rows = want_array(v, path)?;
    if rows.is_empty() {
        return Err(Error::schema(path, "matrix must have at least one row"));
    }
    let mut values = Vec::new();
    let mut cols = None;
    for (r, row_v) in rows.iter().enumerate() {
        let row_path = format!("{path}[{r}]");
        let row = want_array(row_v, &row_path)?;
        match cols {
            None => {
                if row.is_empty() {
                    return Err(Error::schema(&row_path, "row must not be empty"));
                }
                cols = Some(row.len());
            }
            Some(c) if c != row.len() => {
                return Err(Error::schema(
                    &row_path,
                    format!("expected {c} columns, found {}", row.len()),
                ));
            }
            _ => {}
        }
        for (c, cell) in row.iter().enumerate() {
            values.push(want_f64(cell, &format!("{row_path}[{c}]"))?);
        }
    }
    Ok((rows.len(), cols.unwrap(), values))
}

/// Parse a `[C][T][N]` cube of numbers.
fn parse_cube(v: &Value, path: &str) -> Result<([usize; 3], Vec<f64>)> {
    let channels = want_array(v, path)?;
    if channels.is_empty() {
        return Err(Error::schema(path, "tensor must have at least one channel"));
    }
    let mut dims: Option<(usize, usize)> = None;
    let mut values = Vec::new();
    for (c, chan) in channels.iter().enumerate() {
        let chan_path = format!("{path}[{c}]");
        let (t, n, mut vals) = parse_matrix(chan, &chan_path)?;
        match dims {
            None => dims = Some((t, n)),
            Some(d) if d != (t, n) => {
                return Err(Error::schema(
                    &chan_path,
                    format!("expected {}x{} frames, found {t}x{n}", d.0, d.1),
                ));
            }
            _ => {}
        }
        values.append(&mut vals);
    }
    let (t, n) = dims.unwrap();
    Ok(([channels.len(), t, n], values))
}

fn parse_graph(v: &Value, path: &str) -> Result<GraphSpec> {
    let (rows, cols, values) = parse_matrix(v, path)?;
    if rows != cols {
        return Err(Error::schema(
            path,
            format!("adjacency must be square, found {rows}x{cols}"),
        ));
    }
    let row_vecs: Vec<Vec<f64>> = (0..rows)
        .map(|r| values[r * cols..(r + 1) * cols].to_vec())
        .collect();
    GraphSpec::new(rows, &row_vecs, true)
}

/// Parse a dataset from its JSON text.
pub fn dataset_from_json(text: &str) -> Result<Dataset> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| Error::malformed(format!("invalid JSON: {e}")))?;
    let obj = want_obj(&root, "$")?;
    let kind = want_field(obj, "kind", "$")?
        .as_str()
        .ok_or_else(|| Error::schema("$.kind", "expected a string"))?;
    let n_classes = want_usize(want_field(obj, "n_classes", "$")?, "$.n_classes")?;
    if n_classes == 0 {
        return Err(Error::schema("$.n_classes", "must be at least 1"));
    }
    let samples = want_array(want_field(obj, "samples", "$")?, "$.samples")?;
    match kind {
        "spatial" => {
            let task_tag = match obj.get("task") {
                None => TaskTag::LeadLag,
                Some(v) => {
                    let s = v
                        .as_str()
                        .ok_or_else(|| Error::schema("$.task", "expected a string"))?;
                    TaskTag::from_str(s).ok_or_else(|| {
                        Error::schema("$.task", format!("unknown task tag {s:?}"))
                    })?
                }
            };
            let mut out = Vec::with_capacity(samples.len());
            for (i, sv) in samples.iter().enumerate() {
                let path = format!("$.samples[{i}]");
                let sm = want_obj(sv, &path)?;
                let graph = parse_graph(
                    want_field(sm, "adjacency", &path)?,
                    &format!("{path}.adjacency"),
                )?;
                let x_path = format!("{path}.x");
                let (rows, cols, values) =
                    parse_matrix(want_field(sm, "x", &path)?, &x_path)?;
                if rows != graph.n_nodes() {
                    return Err(Error::schema(
                        &x_path,
                        format!(
                            "feature rows ({rows}) must equal graph nodes ({})",
                            graph.n_nodes()
                        ),
                    ));
                }
                let label = want_usize(
                    want_field(sm, "label", &path)?,
                    &format!("{path}.label"),
                )?;
                if label >= n_classes {
                    return Err(Error::schema(
                        format!("{path}.label"),
                        format!("label {label} out of range for {n_classes} classes"),
                    ));
                }
                out.push(SpatialSample {
                    graph,
                    features: Tensor::new(vec![rows, cols], values)?,
                    label,
                });
            }
            Ok(Dataset::Spatial(SpatialDataset {
                samples: out,
                n_classes,
                task_tag,
            }))
        }
        "spatiotemporal" => {
            let skeleton = parse_graph(want_field(obj, "adjacency", "$")?, "$.adjacency")?;
            let center = want_usize(want_field(obj, "center", "$")?, "$.center")?;
            if center >= skeleton.n_nodes() {
                return Err(Error::schema(
                    "$.center",
                    format!(
                        "center {center} out of range for {} nodes",
                        skeleton.n_nodes()
                    ),
                ));
            }
            let partition = partition_skeleton(&skeleton, center, None)?;
            let mut out = Vec::with_capacity(samples.len());
            let mut shared: Option<[usize; 3]> = None;
            for (i, sv) in samples.iter().enumerate() {
                let path = format!("$.samples[{i}]");
                let sm = want_obj(sv, &path)?;
                let x_path = format!("{path}.x");
                let (shape, values) = parse_cube(want_field(sm, "x", &path)?, &x_path)?;
                if shape[2] != skeleton.n_nodes() {
                    return Err(Error::schema(
                        &x_path,
                        format!(
                            "node axis ({}) must equal skeleton nodes ({})",
                            shape[2],
                            skeleton.n_nodes()
                        ),
                    ));
                }
                match shared {
                    None => shared = Some(shape),
                    Some(s) if s != shape => {
                        return Err(Error::schema(
                            &x_path,
                            format!("expected shape {s:?} shared by all samples, found {shape:?}"),
                        ));
                    }
                    _ => {}
                }
                let label = want_usize(
                    want_field(sm, "label", &path)?,
                    &format!("{path}.label"),
                )?;
                if label >= n_classes {
                    return Err(Error::schema(
                        format!("{path}.label"),
                        format!("label {label} out of range for {n_classes} classes"),
                    ));
                }
                out.push(SpatioTemporalSample {
                    x: Tensor::new(shape.to_vec(), values)?,
                    label,
                });
            }
            Ok(Dataset::SpatioTemporal(Box::new(SpatioTemporalDataset {
                skeleton,
                center,
                partition,
                samples: out,
                n_classes,
            })))
        }
        other => Err(Error::schema(
            "$.kind",
            format!("unknown dataset kind {other:?}"),
        )),
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    dataset_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_graph;

    #[test]
    fn ego_majority_label_matches_rule() {
        let ds =
            gen_ego_task(50, (3, 8), 2, EgoRule::NeighborMajority, 0.0, 11).unwrap();
        assert_eq!(ds.task_tag, TaskTag::LeadLag);
        for s in &ds.samples {
            let n = s.graph.n_nodes();
            let f = s.features.values();
            let c = s.features.shape()[1];
            // hub features are zeroed
            for &v in &f[..c] {
                assert_eq!(v, 0.0);
            }
            let sum: f64 = (1..n).map(|j| f[j * c]).sum();
            assert_ne!(sum, 0.0, "majority must be defined");
            assert_eq!(s.label, usize::from(sum > 0.0));
        }
    }

    #[test]
    fn ego_majority_is_linearly_separable_from_aggregates() {
        let ds =
            gen_ego_task(200, (4, 9), 3, EgoRule::NeighborMajority, 0.0, 5).unwrap();
        let mut correct = 0;
        for s in &ds.samples {
            let n = s.graph.n_nodes();
            let c = s.features.shape()[1];
            let mean: f64 =
                (1..n).map(|j| s.features.values()[j * c]).sum::<f64>() / (n - 1) as f64;
            if usize::from(mean > 0.0) == s.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.samples.len() as f64;
        assert!(acc >= 0.95, "linear oracle accuracy {acc}");
    }

    #[test]
    fn ego_xor_defeats_the_linear_oracle() {
        let ds = gen_ego_task(400, (5, 9), 2, EgoRule::XorPair, 0.0, 5).unwrap();
        assert_eq!(ds.task_tag, TaskTag::Simultaneous);
        let mut best = 0usize;
        for orientation in [1.0, -1.0] {
            let mut correct = 0;
            for s in &ds.samples {
                let n = s.graph.n_nodes();
                let c = s.features.shape()[1];
                let mean: f64 = (1..n)
                    .map(|j| s.features.values()[j * c])
                    .sum::<f64>()
                    / (n - 1) as f64;
                if usize::from(orientation * mean > 0.0) == s.label {
                    correct += 1;
                }
            }
            best = best.max(correct);
        }
        let acc = best as f64 / ds.samples.len() as f64;
        assert!(acc < 0.8, "xor should not be linearly solvable, got {acc}");
    }

    #[test]
    fn ego_same_seed_is_bitwise_identical() {
        let a = gen_ego_task(20, (3, 6), 2, EgoRule::NeighborMajority, 0.3, 9).unwrap();
        let b = gen_ego_task(20, (3, 6), 2, EgoRule::NeighborMajority, 0.3, 9).unwrap();
        let ja = dataset_to_json(&Dataset::Spatial(a)).unwrap();
        let jb = dataset_to_json(&Dataset::Spatial(b)).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn ego_rejects_degenerate_configs() {
        let e = gen_ego_task(0, (3, 6), 2, EgoRule::NeighborMajority, 0.0, 1);
        assert!(matches!(e.unwrap_err(), Error::Config(_)));
        let e = gen_ego_task(5, (6, 3), 2, EgoRule::NeighborMajority, 0.0, 1);
        assert!(matches!(e.unwrap_err(), Error::Config(_)));
        let e = gen_ego_task(5, (2, 4), 2, EgoRule::NeighborMajority, 0.0, 1);
        assert!(matches!(e.unwrap_err(), Error::Config(_)));
        let e = gen_ego_task(5, (3, 6), 0, EgoRule::NeighborMajority, 0.0, 1);
        assert!(matches!(e.unwrap_err(), Error::Config(_)));
        let e = gen_ego_task(5, (3, 6), 2, EgoRule::NeighborMajority, 1.0, 1);
        assert!(matches!(e.unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn ego_graphs_pass_validation_and_labels_are_balanced() {
        let ds = gen_ego_task(400, (3, 8), 2, EgoRule::NeighborMajority, 0.0, 3).unwrap();
        let mut ones = 0;
        for s in &ds.samples {
            assert!(validate_graph(&s.graph).is_empty());
            assert!(s.label < ds.n_classes);
            ones += s.label;
        }
        let frac = ones as f64 / ds.samples.len() as f64;
        assert!((0.4..=0.6).contains(&frac), "class-1 fraction {frac}");
    }

    #[test]
    fn skeleton_shapes_and_partitions() {
        let ds = gen_skeleton_task(12, 5, 16, 2, 0.05, 7).unwrap();
        assert_eq!(ds.center, 2);
        assert_eq!(ds.skeleton.n_nodes(), 5);
        for s in &ds.samples {
            assert_eq!(s.x.shape(), &[2, 16, 5]);
            assert!(s.label < 2);
        }
        // round-robin labels are exactly balanced
        let ones: usize = ds.samples.iter().map(|s| s.label).sum();
        assert_eq!(ones, 6);
        let expected = partition_skeleton(&ds.skeleton, ds.center, None).unwrap();
        for p in 0..3 {
            assert_eq!(
                ds.partition.partitions[p].values(),
                expected.partitions[p].values()
            );
        }
    }

    /// Power of the length-T sequence at integer frequency f (DFT bin).
    fn bin_power(x: &[f64], f: usize) -> f64 {
        let t = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let a = std::f64::consts::TAU * f as f64 * i as f64 / t;
            re += v * a.cos();
            im -= v * a.sin();
        }
        re * re + im * im
    }

    #[test]
    fn skeleton_classes_separable_by_frequency_oracle() {
        let ds = gen_skeleton_task(60, 5, 16, 2, 0.0, 13).unwrap();
        let mut correct = 0;
        for s in &ds.samples {
            // joint 0, channel 0 trajectory
            let (t, n) = (s.x.shape()[1], s.x.shape()[2]);
            let series: Vec<f64> = (0..t).map(|ti| s.x.values()[ti * n]).collect();
            let guess = if bin_power(&series, 1) > bin_power(&series, 2) {
                0
            } else {
                1
            };
            if guess == s.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.samples.len() as f64;
        assert!(acc >= 0.95, "frequency oracle accuracy {acc}");
    }

    #[test]
    fn skeleton_same_seed_is_identical() {
        let a = gen_skeleton_task(6, 4, 12, 2, 0.1, 21).unwrap();
        let b = gen_skeleton_task(6, 4, 12, 2, 0.1, 21).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.x.values(), sb.x.values());
            assert_eq!(sa.label, sb.label);
        }
    }

    #[test]
    fn skeleton_rejects_degenerate_configs() {
        assert!(gen_skeleton_task(0, 5, 16, 2, 0.0, 1).is_err());
        assert!(gen_skeleton_task(5, 2, 16, 2, 0.0, 1).is_err());
        assert!(gen_skeleton_task(5, 5, 7, 2, 0.0, 1).is_err());
        assert!(gen_skeleton_task(5, 5, 16, 1, 0.0, 1).is_err());
        assert!(gen_skeleton_task(5, 5, 16, 2, -0.1, 1).is_err());
        assert!(gen_skeleton_task(5, 5, 16, 8, 0.0, 1).is_err());
    }

    #[test]
    fn spatial_round_trip_is_bitwise_exact() {
        let ds = Dataset::Spatial(
            gen_ego_task(8, (3, 6), 2, EgoRule::NeighborMajority, 0.2, 17).unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        let (Dataset::Spatial(a), Dataset::Spatial(b)) = (&ds, &back) else {
            panic!("kind changed in round trip");
        };
        assert_eq!(a.n_classes, b.n_classes);
        assert_eq!(a.task_tag, b.task_tag);
        assert_eq!(a.samples.len(), b.samples.len());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.label, sb.label);
            assert_eq!(sa.graph.adjacency(), sb.graph.adjacency());
            let ba: Vec<u64> = sa.features.values().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = sb.features.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
        // a second save produces identical bytes
        let t1 = dataset_to_json(&ds).unwrap();
        let t2 = dataset_to_json(&back).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn spatiotemporal_round_trip_is_bitwise_exact() {
        let ds = Dataset::SpatioTemporal(Box::new(
            gen_skeleton_task(4, 4, 10, 2, 0.3, 23).unwrap(),
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        let (Dataset::SpatioTemporal(a), Dataset::SpatioTemporal(b)) = (&ds, &back) else {
            panic!("kind changed in round trip");
        };
        assert_eq!(a.center, b.center);
        assert_eq!(a.skeleton.adjacency(), b.skeleton.adjacency());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.label, sb.label);
            let ba: Vec<u64> = sa.x.values().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = sb.x.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn missing_label_names_the_sample_index() {
        let text = r#"{
            "kind": "spatial", "n_classes": 2,
            "samples": [
                {"adjacency": [[0,1],[1,0]], "x": [[1,0],[0,1]], "label": 0},
                {"adjacency": [[0,1],[1,0]], "x": [[1,0],[0,1]]}
            ]
        }"#;
        let err = dataset_from_json(text).unwrap_err();
        let Error::Schema { path, .. } = err else {
            panic!("expected schema error, got {err:?}");
        };
        assert!(path.contains("samples[1]"), "path was {path}");
    }

    #[test]
    fn adjacency_value_two_is_a_validation_error() {
        let text = r#"{
            "kind": "spatial", "n_classes": 2,
            "samples": [{"adjacency": [[0,2],[2,0]], "x": [[1],[2]], "label": 0}]
        }"#;
        let err = dataset_from_json(text).unwrap_err();
        assert!(matches!(err, Error::GraphValidation(_)), "got {err:?}");
    }

    #[test]
    fn unknown_kind_is_a_schema_error() {
        let err = dataset_from_json(r#"{"kind":"weird","n_classes":2,"samples":[]}"#)
            .unwrap_err();
        let Error::Schema { path, .. } = err else {
            panic!("expected schema error");
        };
        assert_eq!(path, "$.kind");
    }

    #[test]
    fn feature_row_mismatch_names_the_field() {
        let text = r#"{
            "kind": "spatial", "n_classes": 2,
            "samples": [{"adjacency": [[0,1],[1,0]], "x": [[1,0]], "label": 0}]
        }"#;
        let err = dataset_from_json(text).unwrap_err();
        let Error::Schema { path, .. } = err else {
            panic!("expected schema error");
        };
        assert_eq!(path, "$.samples[0].x");
    }

    #[test]
    fn label_out_of_range_is_a_schema_error() {
        let text = r#"{
            "kind": "spatial", "n_classes": 2,
            "samples": [{"adjacency": [[0,1],[1,0]], "x": [[1],[2]], "label": 2}]
        }"#;
        let err = dataset_from_json(text).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }

    #[test]
    fn garbage_input_is_malformed_not_panic() {
        assert!(matches!(
            dataset_from_json("not json at all").unwrap_err(),
            Error::Malformed(_)
        ));
        assert!(matches!(
            dataset_from_json(r#"{"kind": "spatial""#).unwrap_err(),
            Error::Malformed(_)
        ));
        assert!(matches!(
            dataset_from_json("[1,2,3]").unwrap_err(),
            Error::Schema { .. }
        ));
    }

    #[test]
    fn ragged_rows_and_bad_center_are_schema_errors() {
        let text = r#"{
            "kind": "spatial", "n_classes": 2,
            "samples": [{"adjacency": [[0,1],[1]], "x": [[1],[2]], "label": 0}]
        }"#;
        assert!(matches!(
            dataset_from_json(text).unwrap_err(),
            Error::Schema { .. }
        ));
        let text = r#"{
            "kind": "spatiotemporal", "n_classes": 2, "center": 9,
            "adjacency": [[0,1],[1,0]], "samples": []
        }"#;
        let err = dataset_from_json(text).unwrap_err();
        let Error::Schema { path, .. } = err else {
            panic!("expected schema error");
        };
        assert_eq!(path, "$.center");
    }
}
