use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use nvidehr::data::{
    parse_annotations, parse_predictions, stats as dataset_stats, synth_generate, write_annotations, write_predictions,
    ImageRecord, SynthSpec, TokenSet,
};
use nvidehr::hypergraph::{cosine_affinity, dump_text};
use nvidehr::infer::predict_all;
use nvidehr::metrics::{evaluate, EvalConfig};
use nvidehr::model::{ForwardOptions, Model, ModelConfig};
use nvidehr::train::{train as train_model, TrainingSet};
use nvidehr::verify::{run_suite, Faults, Suite};
use nvidehr::Tape;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{Failed, Usage};

pub const TOKENS: &str = "tokens.bin";
pub const ANNOTATIONS: &str = "annotations.nvi.jsonl";
pub const PLAN: &str = "plan.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const PREDICTIONS: &str = "predictions.pred.jsonl";
pub const REPORT: &str = "report.json";
pub const META: &str = "run.meta";

/// Creates `out` and records what is about to run. Always the first write.
fn write_meta(out: &Path, command: &str, seed: Option<u64>, config: Value) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
    });
    let path = out.join(META);
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn shown(p: &Path) -> String {
    p.display().to_string()
}

struct Dataset {
    tokens: TokenSet,
    records: Vec<ImageRecord>,
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let tokens_path = dir.join(TOKENS);
    if !tokens_path.is_file() {
        return Err(Usage(format!("{} is not a dataset directory (no {TOKENS})", dir.display())).into());
    }
    let tokens = TokenSet::load(&tokens_path)?;
    let records = parse_annotations(dir.join(ANNOTATIONS))?;
    Ok(Dataset { tokens, records })
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    if !path.is_file() {
        return Err(Usage(format!("checkpoint {} not found", path.display())).into());
    }
    Ok(Model::load(&ModelConfig::default(), path)?)
}

pub fn synth(spec_path: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Usage(format!("spec {}: {e}", p.display())))?
        }
        None => SynthSpec::standard(),
    };
    write_meta(
        out,
        "synth",
        Some(seed),
        json!({ "spec": spec, "spec_file": spec_path.map(shown) }),
    )?;
    let data = synth_generate(&spec, seed)?;
    data.tokens.save(out.join(TOKENS))?;
    write_annotations(out.join(ANNOTATIONS), &data.records)?;
    write_json(&out.join(PLAN), &serde_json::to_value(&data.plan)?)?;
    println!(
        "wrote {} images, {} interactions to {}",
        data.records.len(),
        data.records.iter().map(|r| r.groups.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

pub fn train(data_dir: &Path, cfg: RunConfig, log_every: usize, out: &Path) -> Result<()> {
    write_meta(
        out,
        "train",
        Some(cfg.model.seed),
        json!({ "data": shown(data_dir), "settings": cfg.resolved }),
    )?;
    let data = load_dataset(data_dir)?;
    let set = TrainingSet::new(&data.tokens, &data.records)?;
    let mut model = Model::new(cfg.model.clone())?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err: Option<std::io::Error> = None;
    let steps = cfg.train.steps;
    let result = train_model(&mut model, &set, &cfg.train, |l, _| {
        let line = json!({
            "step": l.step,
            "lr": l.lr,
            "total": l.loss.total,
            "l1": l.loss.l1,
            "giou": l.loss.giou,
            "focal": l.loss.focal,
            "grad_norm": l.grad_norm,
        });
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
        if log_every > 0 && (l.step % log_every == 0 || l.step + 1 == steps) {
            eprintln!(
                "step {:>5}  loss {:.4}  (l1 {:.4}  giou {:.4}  focal {:.4})  |g| {:.3}",
                l.step, l.loss.total, l.loss.l1, l.loss.giou, l.loss.focal, l.grad_norm
            );
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    result?;
    model.save(out.join(CHECKPOINT))?;
    println!("wrote {}", out.join(CHECKPOINT).display());
    Ok(())
}

pub fn infer(ckpt: &Path, data_dir: &Path, keep: usize, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    write_meta(
        out,
        "infer",
        Some(model.config().seed),
        json!({ "checkpoint": shown(ckpt), "data": shown(data_dir), "keep": keep, "model": model.config() }),
    )?;
    let data = load_dataset(data_dir)?;
    let preds = predict_all(&model, &data.tokens, &data.records, keep)?;
    write_predictions(out.join(PREDICTIONS), &preds)?;
    println!("wrote {} triplets to {}", preds.len(), out.join(PREDICTIONS).display());
    Ok(())
}

pub fn eval(gt: &Path, pred: &Path, out: Option<&Path>, as_json: bool) -> Result<()> {
    let cfg = EvalConfig::default();
    if let Some(dir) = out {
        write_meta(
            dir,
            "eval",
            None,
            json!({ "gt": shown(gt), "pred": shown(pred), "thresholds": cfg.thresholds, "ks": cfg.ks }),
        )?;
    }
    let records = parse_annotations(gt)?;
    let preds = parse_predictions(pred)?;
    let report = evaluate(&preds, &records, &cfg)?;
    let machine = report.to_json();
    if as_json {
        emit(&(serde_json::to_string_pretty(&machine)? + "\n"))?;
    } else {
        emit(&report.to_table())?;
    }
    if let Some(dir) = out {
        write_json(&dir.join(REPORT), &machine)?;
    }
    Ok(())
}

pub fn verify(name: &str, tamper_normalization: bool) -> Result<()> {
    let suites: Vec<Suite> = if name == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![name.parse().map_err(|e: nvidehr::Error| Usage(e.to_string()))?]
    };
    let faults = Faults {
        tamper_normalization,
    };
    let mut failed = Vec::new();
    for suite in suites {
        let report = run_suite(suite, faults)?;
        emit(&report.to_string())?;
        failed.extend(report.failures().map(|c| format!("{}/{}", suite.name(), c.name)));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failed(format!("failed checks: {}", failed.join(", "))).into())
    }
}

pub fn validate(gt: &Path, pred: Option<&Path>) -> Result<()> {
    let records = parse_annotations(gt)?;
    let triplets: usize = records.iter().map(|r| r.expand_triplets().len()).sum();
    println!("{}: {} images, {triplets} ground-truth triplets", gt.display(), records.len());
    if let Some(p) = pred {
        let preds = parse_predictions(p)?;
        let ids: std::collections::BTreeSet<u64> = records.iter().map(|r| r.image_id).collect();
        if let Some(stray) = preds.iter().find(|x| !ids.contains(&x.image_id)) {
            return Err(nvidehr::Error::validation(
                "image_id",
                format!("{}: image {} has no ground truth", p.display(), stray.image_id),
            )
            .into());
        }
        println!("{}: {} predicted triplets", p.display(), preds.len());
    }
    Ok(())
}

pub fn stats(gt: &Path) -> Result<()> {
    let records = parse_annotations(gt)?;
    emit(&(serde_json::to_string_pretty(&dataset_stats(&records))? + "\n"))?;
    Ok(())
}

pub fn dump(ckpt: &Path, data_dir: &Path, image: u64) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let data = load_dataset(data_dir)?;
    let tokens = data
        .tokens
        .get(image)
        .ok_or_else(|| nvidehr::Error::validation("image", format!("no tokens for image {image}")))?;
    let mut tape = Tape::new();
    let trace = model.bind(&mut tape, false, ForwardOptions::default()).forward_traced(&mut tape, tokens)?;
    for (label, q, graphs) in [
        ("individual", trace.instance_h, &trace.graphs_h),
        ("group", trace.instance_g, &trace.graphs_g),
    ] {
        let affinity = cosine_affinity(tape.value(q))?;
        emit(&dump_text(label, &affinity, graphs))?;
    }
    Ok(())
}
