//! End-to-end tests of the `vgcn` binary: exit codes, file outputs,
//! reproducibility, and the format contracts of every subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgcn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, content).unwrap();
    p
}

fn gcn_config() -> &'static str {
    r#"{
  "model": {"model": "gcn", "in_channels": 4, "hidden": [8], "n_classes": 2},
  "train": {"epochs": 4, "learning_rate": 0.05, "seed": 3, "eval_samples": 1}
}"#
}

fn vgat_config() -> &'static str {
    r#"{
  "model": {"model": "vgat", "in_channels": 4, "hidden": [8], "n_classes": 2},
  "train": {"epochs": 3, "learning_rate": 0.05, "seed": 3, "eval_samples": 4,
            "train_samples_per_input": 2}
}"#
}

fn generate_ego(dir: &Path, out: &str, samples: &str, seed: &str) {
    let run = run_in(
        dir,
        &[
            "generate", "--task", "ego", "--samples", samples, "--seed", seed, "--out", out,
        ],
    );
    assert_ok(&run);
}

#[test]
fn generate_same_flags_twice_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    generate_ego(tmp.path(), "a.json", "20", "7");
    generate_ego(tmp.path(), "b.json", "20", "7");
    assert_eq!(read(tmp.path(), "a.json"), read(tmp.path(), "b.json"));
    let manifest: Value = serde_json::from_str(&read(tmp.path(), "a.manifest.json")).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["outputs"][0], "a.json");
}

#[test]
fn generate_zero_samples_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = run_in(
        tmp.path(),
        &["generate", "--task", "ego", "--samples", "0", "--out", "x.json"],
    );
    assert_eq!(exit_code(&run), 2);
    assert!(stderr_text(&run).contains("at least one sample"));
    assert!(!tmp.path().join("x.json").exists());
}

#[test]
fn generate_skeleton_writes_a_spatiotemporal_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let run = run_in(
        tmp.path(),
        &[
            "generate", "--task", "skeleton", "--samples", "6", "--joints", "5", "--frames",
            "12", "--classes", "2", "--out", "sk.json",
        ],
    );
    assert_ok(&run);
    let ds: Value = serde_json::from_str(&read(tmp.path(), "sk.json")).unwrap();
    assert_eq!(ds["kind"], "spatiotemporal");
    assert_eq!(ds["samples"].as_array().unwrap().len(), 6);
}

#[test]
fn train_same_seed_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    generate_ego(tmp.path(), "d.json", "24", "1");
    write(tmp.path(), "cfg.json", gcn_config());
    let args = [
        "train", "--config", "cfg.json", "--data", "d.json", "--seed", "7",
    ];
    let run = run_in(tmp.path(), &[&args[..], &["--out", "a.ckpt.json"]].concat());
    assert_ok(&run);
    let run = run_in(tmp.path(), &[&args[..], &["--out", "b.ckpt.json"]].concat());
    assert_ok(&run);
    assert_eq!(read(tmp.path(), "a.ckpt.json"), read(tmp.path(), "b.ckpt.json"));

    let csv = read(tmp.path(), "a.ckpt.metrics.csv");
    assert!(csv.starts_with("epoch,split,loss,metric\n"));
    assert!(csv.lines().count() > 1, "csv has data rows");
    let manifest: Value = serde_json::from_str(&read(tmp.path(), "a.ckpt.manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 7, "--seed override recorded");
    assert_eq!(manifest["config"]["experiment"]["train"]["seed"], 7);
}

#[test]
fn train_with_pretrained_builds_a_variational_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    generate_ego(tmp.path(), "d.json", "24", "1");
    write(tmp.path(), "gcn.json", gcn_config());
    write(
        tmp.path(),
        "vgcn.json",
        r#"{
  "model": {"model": "vgcn", "in_channels": 4, "hidden": [8], "n_classes": 2},
  "train": {"epochs": 2, "learning_rate": 0.01, "seed": 5, "eval_samples": 4,
            "train_samples_per_input": 2}
}"#,
    );
    let run = run_in(
        tmp.path(),
        &["train", "--config", "gcn.json", "--data", "d.json", "--out", "gcn.ckpt.json"],
    );
    assert_ok(&run);
    let run = run_in(
        tmp.path(),
        &[
            "train", "--config", "vgcn.json", "--data", "d.json", "--out", "ivgcn.ckpt.json",
            "--pretrained", "gcn.ckpt.json",
        ],
    );
    assert_ok(&run);
    let ckpt: Value = serde_json::from_str(&read(tmp.path(), "ivgcn.ckpt.json")).unwrap();
    assert_eq!(ckpt["config"]["model"], "vgcn");
    let manifest: Value =
        serde_json::from_str(&read(tmp.path(), "ivgcn.ckpt.manifest.json")).unwrap();
    assert_eq!(manifest["config"]["pretrained"], "gcn.ckpt.json");
}

#[test]
fn train_pretrained_width_mismatch_exits_4_naming_the_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    generate_ego(tmp.path(), "d.json", "20", "1");
    write(tmp.path(), "gcn.json", gcn_config());
    write(
        tmp.path(),
        "wide.json",
        r#"{
  "model": {"model": "vgcn", "in_channels": 4, "hidden": [16], "n_classes": 2},
  "train": {"epochs": 1, "seed": 5}
}"#,
    );
    let run = run_in(
        tmp.path(),
        &["train", "--config", "gcn.json", "--data", "d.json", "--out", "gcn.ckpt.json"],
    );
    assert_ok(&run);
    let run = run_in(
        tmp.path(),
        &[
            "train", "--config", "wide.json", "--data", "d.json", "--out", "bad.ckpt.json",
            "--pretrained", "gcn.ckpt.json",
        ],
    );
    assert_eq!(exit_code(&run), 4);
    assert!(
        stderr_text(&run).contains("head.w"),
        "error names the mismatched parameter: {}",
        stderr_text(&run)
    );
}

#[test]
fn train_missing_data_file_exits_3_and_bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "cfg.json", gcn_config());
    let run = run_in(
        tmp.path(),
        &["train", "--config", "cfg.json", "--data", "nope.json", "--out", "o.json"],
    );
    assert_eq!(exit_code(&run), 3);

    generate_ego(tmp.path(), "d.json", "12", "1");
    write(tmp.path(), "broken.json", "{not json");
    let run = run_in(
        tmp.path(),
        &["train", "--config", "broken.json", "--data", "d.json", "--out", "o.json"],
    );
    assert_eq!(exit_code(&run), 2);

    write(
        tmp.path(),
        "invalid.json",
        r#"{"model": {"model": "gcn", "in_channels": 0, "hidden": [8], "n_classes": 2}}"#,
    );
    let run = run_in(
        tmp.path(),
        &["train", "--config", "invalid.json", "--data", "d.json", "--out", "o.json"],
    );
    assert_eq!(exit_code(&run), 2);
}

fn train_small_vgat(dir: &Path) {
    generate_ego(dir, "d.json", "24", "1");
    write(dir, "vgat.json", vgat_config());
    let run = run_in(
        dir,
        &["train", "--config", "vgat.json", "--data", "d.json", "--out", "vgat.ckpt.json"],
    );
    assert_ok(&run);
}

#[test]
fn eval_deterministic_checkpoint_is_k_independent() {
    let tmp = tempfile::tempdir().unwrap();
    generate_ego(tmp.path(), "d.json", "20", "1");
    write(tmp.path(), "cfg.json", gcn_config());
    let run = run_in(
        tmp.path(),
        &["train", "--config", "cfg.json", "--data", "d.json", "--out", "gcn.ckpt.json"],
    );
    assert_ok(&run);
    let a = run_in(
        tmp.path(),
        &["eval", "--ckpt", "gcn.ckpt.json", "--data", "d.json", "--samples", "1", "--json"],
    );
    assert_ok(&a);
    let b = run_in(
        tmp.path(),
        &["eval", "--ckpt", "gcn.ckpt.json", "--data", "d.json", "--samples", "64", "--json"],
    );
    assert_ok(&b);
    let ja: Value = serde_json::from_str(&stdout_text(&a)).unwrap();
    let jb: Value = serde_json::from_str(&stdout_text(&b)).unwrap();
    for field in ["f1", "top1", "mean_entropy", "ece", "mean_standard_error"] {
        assert_eq!(ja[field], jb[field], "{field} must not depend on K");
    }
}

#[test]
fn eval_standard_error_shrinks_with_more_samples() {
    let tmp = tempfile::tempdir().unwrap();
    train_small_vgat(tmp.path());
    let small = run_in(
        tmp.path(),
        &["eval", "--ckpt", "vgat.ckpt.json", "--data", "d.json", "--samples", "4", "--json"],
    );
    assert_ok(&small);
    let large = run_in(
        tmp.path(),
        &["eval", "--ckpt", "vgat.ckpt.json", "--data", "d.json", "--samples", "64", "--json"],
    );
    assert_ok(&large);
    let js: Value = serde_json::from_str(&stdout_text(&small)).unwrap();
    let jl: Value = serde_json::from_str(&stdout_text(&large)).unwrap();
    let se_small = js["mean_standard_error"].as_f64().unwrap();
    let se_large = jl["mean_standard_error"].as_f64().unwrap();
    assert!(
        se_large < se_small,
        "standard error should shrink: K=4 gives {se_small}, K=64 gives {se_large}"
    );
}

#[test]
fn eval_writes_report_and_manifest_when_out_is_given() {
    let tmp = tempfile::tempdir().unwrap();
    train_small_vgat(tmp.path());
    let run = run_in(
        tmp.path(),
        &[
            "eval", "--ckpt", "vgat.ckpt.json", "--data", "d.json", "--samples", "4", "--json",
            "--out", "report.json",
        ],
    );
    assert_ok(&run);
    assert_eq!(stdout_text(&run), read(tmp.path(), "report.json"));
    let report: Value = serde_json::from_str(&read(tmp.path(), "report.json")).unwrap();
    assert!(report["entropy_quantiles"]["median"].is_f64());
    let manifest: Value = serde_json::from_str(&read(tmp.path(), "report.manifest.json")).unwrap();
    assert_eq!(manifest["command"], "eval");
}

#[test]
fn eval_missing_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    generate_ego(tmp.path(), "d.json", "12", "1");
    let run = run_in(
        tmp.path(),
        &["eval", "--ckpt", "missing.json", "--data", "d.json"],
    );
    assert_eq!(exit_code(&run), 3);
}

#[test]
fn attention_on_model_without_attention_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    generate_ego(tmp.path(), "d.json", "16", "1");
    write(tmp.path(), "cfg.json", gcn_config());
    let run = run_in(
        tmp.path(),
        &["train", "--config", "cfg.json", "--data", "d.json", "--out", "gcn.ckpt.json"],
    );
    assert_ok(&run);
    let run = run_in(
        tmp.path(),
        &["attention", "--ckpt", "gcn.ckpt.json", "--data", "d.json", "--out", "a.json"],
    );
    assert_eq!(exit_code(&run), 5);
    assert!(stderr_text(&run).contains("has no attention"));
}

#[test]
fn attention_vgat_export_respects_the_mask_pattern() {
    let tmp = tempfile::tempdir().unwrap();
    train_small_vgat(tmp.path());
    let run = run_in(
        tmp.path(),
        &[
            "attention", "--ckpt", "vgat.ckpt.json", "--data", "d.json", "--sample-index", "0",
            "--samples", "16", "--format", "json", "--out", "attn.json",
        ],
    );
    assert_ok(&run);
    let export: Value = serde_json::from_str(&read(tmp.path(), "attn.json")).unwrap();
    let dataset: Value = serde_json::from_str(&read(tmp.path(), "d.json")).unwrap();
    let adjacency = dataset["samples"][0]["adjacency"].as_array().unwrap();

    // default masking keeps attention on non-edges: every edge position must
    // be exactly zero in both moments
    let record = &export[0];
    let mean = record["mean"].as_array().unwrap();
    let variance = record["variance"].as_array().unwrap();
    let mut checked_edges = 0;
    for (i, row) in adjacency.iter().enumerate() {
        for (j, a) in row.as_array().unwrap().iter().enumerate() {
            if a.as_f64().unwrap() != 0.0 {
                assert_eq!(
                    mean[i][j].as_f64().unwrap(),
                    0.0,
                    "mean attention leaked onto edge ({i}, {j})"
                );
                assert_eq!(
                    variance[i][j].as_f64().unwrap(),
                    0.0,
                    "variance leaked onto edge ({i}, {j})"
                );
                checked_edges += 1;
            }
        }
    }
    assert!(checked_edges > 0, "sample 0 has edges to check");
    let nonzero = mean
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .filter(|v| v.as_f64().unwrap() != 0.0)
        .count();
    assert!(nonzero > 0, "export carries attention somewhere");
}

#[test]
fn attention_vstgcn_export_is_independent_of_index_and_k() {
    let tmp = tempfile::tempdir().unwrap();
    let run = run_in(
        tmp.path(),
        &[
            "generate", "--task", "skeleton", "--samples", "8", "--joints", "5", "--frames",
            "12", "--out", "sk.json",
        ],
    );
    assert_ok(&run);
    write(
        tmp.path(),
        "vst.json",
        r#"{
  "model": {"model": "vstgcn", "in_channels": 2, "hidden": [4], "n_classes": 2,
            "temporal_kernel": 3, "batch_norm": false},
  "train": {"epochs": 1, "seed": 2, "eval_samples": 2, "batch_size": 4}
}"#,
    );
    let run = run_in(
        tmp.path(),
        &["train", "--config", "vst.json", "--data", "sk.json", "--out", "vst.ckpt.json"],
    );
    assert_ok(&run);
    let run = run_in(
        tmp.path(),
        &[
            "attention", "--ckpt", "vst.ckpt.json", "--data", "sk.json", "--sample-index", "0",
            "--samples", "8", "--out", "a.json",
        ],
    );
    assert_ok(&run);
    let run = run_in(
        tmp.path(),
        &[
            "attention", "--ckpt", "vst.ckpt.json", "--data", "sk.json", "--sample-index", "5",
            "--samples", "64", "--seed", "9", "--out", "b.json",
        ],
    );
    assert_ok(&run);
    assert_eq!(read(tmp.path(), "a.json"), read(tmp.path(), "b.json"));
}

#[test]
fn attention_dot_format_is_structurally_valid() {
    let tmp = tempfile::tempdir().unwrap();
    train_small_vgat(tmp.path());
    let run = run_in(
        tmp.path(),
        &[
            "attention", "--ckpt", "vgat.ckpt.json", "--data", "d.json", "--samples", "8",
            "--format", "dot", "--out", "attn.dot",
        ],
    );
    assert_ok(&run);
    let dot = read(tmp.path(), "attn.dot");
    assert!(dot.starts_with("digraph attention {"));
    assert_eq!(dot.matches('{').count(), dot.matches('}').count());
    assert!(dot.contains("attn_mean=\""));
    assert!(dot.contains("attn_var=\""));
}

#[test]
fn convert_preserves_parameters_and_records_the_rule() {
    let tmp = tempfile::tempdir().unwrap();
    train_small_vgat(tmp.path());
    let run = run_in(
        tmp.path(),
        &[
            "convert-fmci", "--ckpt", "vgat.ckpt.json", "--data", "d.json", "--samples", "16",
            "--limit", "inf", "--rule", "consistent", "--out", "fmci.ckpt.json",
        ],
    );
    assert_ok(&run);
    let source: Value = serde_json::from_str(&read(tmp.path(), "vgat.ckpt.json")).unwrap();
    let converted: Value = serde_json::from_str(&read(tmp.path(), "fmci.ckpt.json")).unwrap();
    assert_eq!(
        source["params"], converted["params"],
        "conversion must not touch parameter values"
    );
    assert_eq!(converted["config"]["model"], "ua-fmci");
    assert_eq!(converted["config"]["filter"]["limit"], "inf");
    assert_eq!(converted["config"]["filter"]["rule"], "consistent");
    assert!(
        !converted["cache"].as_array().unwrap().is_empty(),
        "filtered attentions attached"
    );
    let manifest: Value =
        serde_json::from_str(&read(tmp.path(), "fmci.ckpt.manifest.json")).unwrap();
    assert_eq!(manifest["config"]["filter"]["rule"], "consistent");
}

#[test]
fn convert_rejects_non_vgat_checkpoints_with_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    generate_ego(tmp.path(), "d.json", "16", "1");
    write(tmp.path(), "cfg.json", gcn_config());
    let run = run_in(
        tmp.path(),
        &["train", "--config", "cfg.json", "--data", "d.json", "--out", "gcn.ckpt.json"],
    );
    assert_ok(&run);
    let run = run_in(
        tmp.path(),
        &["convert-fmci", "--ckpt", "gcn.ckpt.json", "--data", "d.json", "--out", "f.json"],
    );
    assert_eq!(exit_code(&run), 4);
}

#[test]
fn sample_index_out_of_range_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    train_small_vgat(tmp.path());
    let run = run_in(
        tmp.path(),
        &[
            "attention", "--ckpt", "vgat.ckpt.json", "--data", "d.json", "--sample-index",
            "999", "--out", "a.json",
        ],
    );
    assert_eq!(exit_code(&run), 2);
    assert!(stderr_text(&run).contains("out of range"));
}
