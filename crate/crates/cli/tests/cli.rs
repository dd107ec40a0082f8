use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nvidehr::data::{parse_annotations, taxonomy, parse_predictions, records_as_predictions, write_predictions};
use nvidehr::metrics::{evaluate, EvalConfig};
use nvidehr::model::{Model, ModelConfig};
use tempfile::TempDir;

fn nvi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvi"))
        .args(args)
        .current_dir(cwd)
        .env("NVI_THREADS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, out: &str, seed: &str) {
    let o = nvi(&["synth", "--seed", seed, "--out", out], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn synth_is_byte_identical_and_validates() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "a", "3");
    synth(tmp.path(), "b", "3");
    for f in ["tokens.bin", "annotations.nvi.jsonl", "plan.json", "run.meta"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let o = nvi(&["validate", "--gt", "a/annotations.nvi.jsonl"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn missing_spec_is_a_usage_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let o = nvi(&["synth", "--spec", "no/such/spec.json", "--out", "d"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no/such/spec.json"), "{}", stderr(&o));
}

#[test]
fn custom_spec_file_is_honoured() {
    let tmp = TempDir::new().unwrap();
    let spec = r#"{"images":2,"persons_min":1,"persons_max":1,"grid_w":4,"grid_h":4,"annotations":2,"mix":{"smile":1}}"#;
    fs::write(tmp.path().join("spec.json"), spec).unwrap();
    let o = nvi(&["synth", "--spec", "spec.json", "--out", "d"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = parse_annotations(tmp.path().join("d/annotations.nvi.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    let smile = taxonomy().by_name("smile").unwrap().id;
    assert!(records.iter().flat_map(|r| &r.groups).all(|g| g.atomic == smile));
}

#[test]
fn ground_truth_as_predictions_scores_one() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "d", "0");
    let records = parse_annotations(tmp.path().join("d/annotations.nvi.jsonl")).unwrap();
    write_predictions(tmp.path().join("gt.pred.jsonl"), &records_as_predictions(&records)).unwrap();
    let o = nvi(&["eval", "--gt", "d/annotations.nvi.jsonl", "--pred", "gt.pred.jsonl", "--json"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["AR"].as_f64(), Some(1.0));
}

#[test]
fn train_infer_eval_pipeline_matches_the_library() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, "d", "0");

    // zero steps: the checkpoint is the seeded initialization
    let o = nvi(&["train", "--data", "d", "--steps", "0", "--seed", "5", "--out", "r0"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let saved = Model::load(&ModelConfig::default(), dir.join("r0/model.ckpt")).unwrap();
    let fresh = Model::new(ModelConfig {
        seed: 5,
        ..ModelConfig::desk()
    })
    .unwrap();
    assert_eq!(saved.weights().max_abs_diff(fresh.weights()), Some(0.0));

    for out in ["r1", "r2"] {
        let o = nvi(&["train", "--data", "d", "--steps", "2", "--out", out], dir);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let log = fs::read_to_string(dir.join("r1/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(log, fs::read_to_string(dir.join("r2/train_log.jsonl")).unwrap());
    assert_eq!(fs::read(dir.join("r1/model.ckpt")).unwrap(), fs::read(dir.join("r2/model.ckpt")).unwrap());

    let o = nvi(&["infer", "--ckpt", "r1/model.ckpt", "--data", "d", "--out", "p"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = nvi(
        &["eval", "--gt", "d/annotations.nvi.jsonl", "--pred", "p/predictions.pred.jsonl", "--out", "e"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mR@25"));

    let cli: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("e/report.json")).unwrap()).unwrap();
    let records = parse_annotations(dir.join("d/annotations.nvi.jsonl")).unwrap();
    let preds = parse_predictions(dir.join("p/predictions.pred.jsonl")).unwrap();
    let lib = evaluate(&preds, &records, &EvalConfig::default()).unwrap().to_json();
    assert_eq!(cli, lib);
    assert!(dir.join("e/run.meta").is_file());

    let o = nvi(&["dump", "--ckpt", "r1/model.ckpt", "--data", "d", "--image", &records[0].image_id.to_string()], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("# individual affinity 16x16") && text.contains("# group affinity"));
}

#[test]
fn eval_on_disjoint_images_fails_validation() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "a", "0");
    let records = parse_annotations(tmp.path().join("a/annotations.nvi.jsonl")).unwrap();
    let mut preds = records_as_predictions(&records);
    for p in &mut preds {
        p.image_id += 1000;
    }
    write_predictions(tmp.path().join("x.pred.jsonl"), &preds).unwrap();
    let o = nvi(&["eval", "--gt", "a/annotations.nvi.jsonl", "--pred", "x.pred.jsonl"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("image_id") || stderr(&o).contains("image"), "{}", stderr(&o));
    let o = nvi(&["validate", "--gt", "a/annotations.nvi.jsonl", "--pred", "x.pred.jsonl"], tmp.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn run_meta_comes_before_the_work() {
    let tmp = TempDir::new().unwrap();
    let o = nvi(&["train", "--data", "nowhere", "--steps", "1", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 2);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("r/run.meta")).unwrap()).unwrap();
    assert_eq!(meta["command"], "train");
    assert_eq!(meta["config"]["settings"]["steps"], 1);
    assert_eq!(meta["seed"], 0);
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"layers": 0, "bogus": 1}"#).unwrap();
    let o = nvi(&["train", "--data", "d", "--config", "c.json", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"));
    let o = nvi(&["train", "--data", "d", "--set", "lr=-1", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let o = nvi(&["verify", "--suite", "matching"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = nvi(&["verify", "--suite", "hypergraph", "--tamper-normalization"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    let o = nvi(&["verify", "--suite", "nonsense"], tmp.path());
    assert_eq!(code(&o), 2);
}
