//! Versioned JSON checkpoints.
//!
//! Parameter values are stored as decimal strings in Rust's shortest
//! round-trip notation, so save → load → save is byte-identical and the
//! files stay diffable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{CachedAttention, Model};
use crate::params::{BnState, Param, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

fn f64_string(v: f64) -> Value {
    let mut s = format!("{v:?}");
    if let Some(stripped) = s.strip_suffix(".0") {
        // keep integral values compact; parse() accepts either form
        s = stripped.to_string();
    }
    Value::String(s)
}

fn values_array(values: &[f64]) -> Value {
    Value::Array(values.iter().map(|&v| f64_string(v)).collect())
}

fn param_value(p: &Param) -> Value {
    let mut m = Map::new();
    m.insert(
        "shape".into(),
        Value::Array(p.shape.iter().map(|&d| Value::from(d as u64)).collect()),
    );
    m.insert("values".into(), values_array(&p.values));
    Value::Object(m)
}

/// Serialize a model plus metadata to checkpoint JSON.
pub fn checkpoint_to_json(model: &Model, meta: &CheckpointMeta) -> Result<String> {
    let mut root = Map::new();
    root.insert("format_version".into(), Value::from(CHECKPOINT_VERSION));
    let config = serde_json::to_value(&model.config)
        .map_err(|e| Error::contract(format!("config serialization failed: {e}")))?;
    root.insert("config".into(), config);
    root.insert(
        "n_nodes".into(),
        match model.n_nodes {
            Some(n) => Value::from(n as u64),
            None => Value::Null,
        },
    );
    let mut params = Map::new();
    for (name, p) in model.params.iter() {
        params.insert(name.clone(), param_value(p));
    }
    root.insert("params".into(), Value::Object(params));
    let mut bn = Map::new();
    for (site, state) in &model.bn {
        let mut m = Map::new();
        m.insert("mean".into(), values_array(&state.mean));
        m.insert("var".into(), values_array(&state.var));
        bn.insert(site.clone(), Value::Object(m));
    }
    root.insert("bn".into(), Value::Object(bn));
    let cache: Vec<Value> = model
        .cache
        .iter()
        .map(|c| {
            let mut m = Map::new();
            m.insert("layer".into(), Value::from(c.layer as u64));
            m.insert("mean".into(), param_value(&c.mean));
            m.insert("variance".into(), param_value(&c.variance));
            m.insert("n_samples".into(), Value::from(c.n_samples as u64));
            Value::Object(m)
        })
        .collect();
    root.insert("cache".into(), Value::Array(cache));
    let mut meta_map = Map::new();
    meta_map.insert("seed".into(), Value::from(meta.seed));
    meta_map.insert("epoch".into(), Value::from(meta.epoch as u64));
    root.insert("meta".into(), Value::Object(meta_map));

    let mut text = serde_json::to_string_pretty(&Value::Object(root))
        .map_err(|e| Error::contract(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_json(model, meta)?)?;
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

fn parse_values(v: &Value, path: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::schema(path, "expected an array of decimal strings"))?;
    let mut out = Vec::with_capacity(arr.len());
    for (i, item) in arr.iter().enumerate() {
        let s = item.as_str().ok_or_else(|| {
            Error::schema(format!("{path}[{i}]"), "expected a decimal string")
        })?;
        let parsed: f64 = s.parse().map_err(|_| {
            Error::schema(format!("{path}[{i}]"), format!("invalid number {s:?}"))
        })?;
        out.push(parsed);
    }
    Ok(out)
}

fn parse_param(v: &Value, path: &str) -> Result<Param> {
    let m = want_obj(v, path)?;
    let shape_v = want_field(m, "shape", path)?;
    let shape_arr = shape_v
        .as_array()
        .ok_or_else(|| Error::schema(format!("{path}.shape"), "expected an array"))?;
    let mut shape = Vec::with_capacity(shape_arr.len());
    for (i, d) in shape_arr.iter().enumerate() {
        shape.push(want_usize(d, &format!("{path}.shape[{i}]"))?);
    }
    let values = parse_values(want_field(m, "values", path)?, &format!("{path}.values"))?;
    Param::new(shape.clone(), values).map_err(|_| {
        Error::schema(
            format!("{path}.values"),
            format!("value count does not match shape {shape:?}"),
        )
    })
}

/// Parse checkpoint JSON back into a model and its metadata. The
/// parameter set is validated against the architecture the config
/// declares; any mismatch is an incompatibility error naming the
/// offending parameter.
pub fn checkpoint_from_json(text: &str) -> Result<(Model, CheckpointMeta)> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| Error::malformed(format!("invalid JSON: {e}")))?;
    let obj = want_obj(&root, "$")?;
    let version = want_field(obj, "format_version", "$")?
        .as_u64()
        .ok_or_else(|| Error::schema("$.format_version", "expected an integer"))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: CHECKPOINT_VERSION,
        });
    }
    let config: ModelConfig = serde_json::from_value(want_field(obj, "config", "$")?.clone())
        .map_err(|e| Error::schema("$.config", e.to_string()))?;
    let n_nodes = match want_field(obj, "n_nodes", "$")? {
        Value::Null => None,
        v => Some(want_usize(v, "$.n_nodes")?),
    };
    let params_obj = want_obj(want_field(obj, "params", "$")?, "$.params")?;
    let mut params = ParamSet::default();
    for (name, v) in params_obj {
        params.insert(name.clone(), parse_param(v, &format!("$.params.{name}"))?);
    }
    let bn_obj = want_obj(want_field(obj, "bn", "$")?, "$.bn")?;
    let mut bn = BTreeMap::new();
    for (site, v) in bn_obj {
        let path = format!("$.bn.{site}");
        let m = want_obj(v, &path)?;
        let mean = parse_values(want_field(m, "mean", &path)?, &format!("{path}.mean"))?;
        let var = parse_values(want_field(m, "var", &path)?, &format!("{path}.var"))?;
        if mean.len() != var.len() {
            return Err(Error::schema(
                &path,
                "mean and var must have the same length",
            ));
        }
        bn.insert(site.clone(), BnState { mean, var });
    }
    let cache_arr = want_field(obj, "cache", "$")?
        .as_array()
        .ok_or_else(|| Error::schema("$.cache", "expected an array"))?;
    let mut cache = Vec::with_capacity(cache_arr.len());
    for (i, v) in cache_arr.iter().enumerate() {
        let path = format!("$.cache[{i}]");
        let m = want_obj(v, &path)?;
        cache.push(CachedAttention {
            layer: want_usize(want_field(m, "layer", &path)?, &format!("{path}.layer"))?,
            mean: parse_param(want_field(m, "mean", &path)?, &format!("{path}.mean"))?,
            variance: parse_param(
                want_field(m, "variance", &path)?,
                &format!("{path}.variance"),
            )?,
            n_samples: want_usize(
                want_field(m, "n_samples", &path)?,
                &format!("{path}.n_samples"),
            )?,
        });
    }
    let meta_obj = want_obj(want_field(obj, "meta", "$")?, "$.meta")?;
    let meta = CheckpointMeta {
        seed: want_field(meta_obj, "seed", "$.meta")?
            .as_u64()
            .ok_or_else(|| Error::schema("$.meta.seed", "expected an integer"))?,
        epoch: want_usize(want_field(meta_obj, "epoch", "$.meta")?, "$.meta.epoch")?,
    };
    let model = Model::from_parts(config, n_nodes, params, bn, cache)?;
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let text = fs::read_to_string(path)?;
    checkpoint_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelKind, VarianceMode};
    use crate::rng::RandomStream;

    fn sample_model(kind: ModelKind) -> Model {
        let mut cfg = ModelConfig::new(kind, 2, vec![3], 2);
        cfg.temporal_kernel = 3;
        let n_nodes = kind.is_spatiotemporal().then_some(4);
        Model::init(cfg, n_nodes, &RandomStream::new(11)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_and_byte_identical() {
        for kind in [ModelKind::Gcn, ModelKind::Vgat, ModelKind::Vstgcn, ModelKind::Vagcn] {
            let model = sample_model(kind);
            let meta = CheckpointMeta { seed: 7, epoch: 3 };
            let text = checkpoint_to_json(&model, &meta).unwrap();
            let (back, meta2) = checkpoint_from_json(&text).unwrap();
            assert_eq!(meta, meta2);
            assert!(model.params.bitwise_eq(&back.params), "{}", kind.name());
            assert_eq!(model.bn, back.bn);
            let text2 = checkpoint_to_json(&back, &meta2).unwrap();
            assert_eq!(text, text2, "bytes changed for {}", kind.name());
        }
    }

    #[test]
    fn cache_round_trips() {
        let mut model = sample_model(ModelKind::UaFmci);
        model.cache = vec![CachedAttention {
            layer: 0,
            mean: Param::new(vec![2, 2], vec![0.1, -0.25, 0.0, 1.5]).unwrap(),
            variance: Param::new(vec![2, 2], vec![0.0, 0.5, 0.25, 0.0]).unwrap(),
            n_samples: 64,
        }];
        let text = checkpoint_to_json(&model, &CheckpointMeta::default()).unwrap();
        let (back, _) = checkpoint_from_json(&text).unwrap();
        assert_eq!(back.cache.len(), 1);
        assert_eq!(back.cache[0].layer, 0);
        assert_eq!(back.cache[0].n_samples, 64);
        assert_eq!(back.cache[0].mean.values, model.cache[0].mean.values);
        assert_eq!(back.cache[0].variance.values, model.cache[0].variance.values);
    }

    #[test]
    fn extreme_values_survive_the_round_trip() {
        let mut model = sample_model(ModelKind::Gcn);
        let w = model.params.get_mut("layer0.w").unwrap();
        w.values[0] = f64::MIN_POSITIVE; // subnormal boundary
        w.values[1] = -0.0;
        w.values[2] = 1.0 + f64::EPSILON;
        w.values[3] = 1e308;
        let text = checkpoint_to_json(&model, &CheckpointMeta::default()).unwrap();
        let (back, _) = checkpoint_from_json(&text).unwrap();
        let bw = back.params.get("layer0.w").unwrap();
        for (a, b) in model.params.get("layer0.w").unwrap().values.iter().zip(&bw.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_malformed() {
        let model = sample_model(ModelKind::Gcn);
        let text = checkpoint_to_json(&model, &CheckpointMeta::default()).unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(
            checkpoint_from_json(truncated).unwrap_err(),
            Error::Malformed(_)
        ));
    }

    #[test]
    fn future_version_names_both_versions() {
        let model = sample_model(ModelKind::Gcn);
        let text = checkpoint_to_json(&model, &CheckpointMeta::default()).unwrap();
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 99");
        let err = checkpoint_from_json(&bumped).unwrap_err();
        let Error::Version { found, supported } = err else {
            panic!("expected version error, got {err:?}");
        };
        assert_eq!(found, 99);
        assert_eq!(supported, 1);
    }

    #[test]
    fn shape_mismatch_is_incompatible() {
        let model = sample_model(ModelKind::Gcn);
        let text = checkpoint_to_json(&model, &CheckpointMeta::default()).unwrap();
        // corrupt layer0.w's shape while keeping the value count in sync
        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["params"]["layer0.w"]["shape"] = serde_json::json!([3, 2]);
        let err = checkpoint_from_json(&doc.to_string()).unwrap_err();
        assert!(
            matches!(err, Error::Incompatible(_)),
            "expected incompatibility, got {err:?}"
        );
    }

    #[test]
    fn missing_parameter_is_incompatible() {
        let model = sample_model(ModelKind::Gcn);
        let mut as_value: Value =
            serde_json::from_str(&checkpoint_to_json(&model, &CheckpointMeta::default()).unwrap())
                .unwrap();
        as_value
            .as_object_mut()
            .unwrap()
            .get_mut("params")
            .unwrap()
            .as_object_mut()
            .unwrap()
            .remove("head.b");
        let err = checkpoint_from_json(&as_value.to_string()).unwrap_err();
        let Error::Incompatible(msg) = err else {
            panic!("expected incompatibility");
        };
        assert!(msg.contains("head.b"), "message was {msg}");
    }

    #[test]
    fn bad_value_string_names_its_path() {
        let model = sample_model(ModelKind::Gcn);
        let text = checkpoint_to_json(&model, &CheckpointMeta::default()).unwrap();
        let first_value = model.params.get("head.b").unwrap().values[0];
        let needle = format!("{first_value:?}");
        let needle = needle.strip_suffix(".0").unwrap_or(&needle).to_string();
        let hacked = text.replace(&format!("\"{needle}\""), "\"not-a-number\"");
        let err = checkpoint_from_json(&hacked).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "got {err:?}");
    }

    #[test]
    fn file_round_trip_via_disk() {
        let model = sample_model(ModelKind::Vgcn);
        let meta = CheckpointMeta { seed: 42, epoch: 9 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        save_checkpoint(&model, &meta, &path).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert!(model.params.bitwise_eq(&back.params));
        assert_eq!(model.config, back.config);
    }

    #[test]
    fn global_scalar_models_round_trip() {
        let mut cfg = ModelConfig::new(ModelKind::Vgat, 2, vec![3], 2);
        cfg.variance_mode = VarianceMode::GlobalScalar;
        let model = Model::init(cfg, None, &RandomStream::new(11)).unwrap();
        let text = checkpoint_to_json(&model, &CheckpointMeta::default()).unwrap();
        let (back, _) = checkpoint_from_json(&text).unwrap();
        assert!(model.params.bitwise_eq(&back.params));
    }
}
