//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Runs without the libtest harness so the lines are always shown.
//!
//! The two training criteria dominate the runtime (several minutes on one
//! core); everything else finishes in seconds.

use std::time::{Duration, Instant};

use nvidehr::data::{
    parse_annotations_str, parse_predictions_str, records_as_predictions, synth_generate, taxonomy, write_annotations_string,
    write_predictions_string, Arity, SynthSpec, NUM_CLASSES,
};
use nvidehr::infer::{predict_all, DEFAULT_KEEP};
use nvidehr::metrics::{evaluate, EvalConfig};
use nvidehr::model::{Model, ModelConfig};
use nvidehr::train::{evaluate_loss, train, TrainConfig, TrainingSet};
use nvidehr::verify::instances::{random_predictions, random_records};
use nvidehr::verify::{self, Check, Faults};
use nvidehr::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OVERFIT_STEPS: usize = 400;
const ABLATION_STEPS: usize = 150;
const ABLATION_SEEDS: u64 = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn from_checks(checks: &[Check]) -> Self {
        Outcome {
            passed: checks.iter().all(|c| c.passed),
            detail: checks.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; "),
        }
    }
}

fn hypergraph_oracle() -> Result<Outcome> {
    Ok(Outcome::from_checks(&[
        verify::greedy_equals_exhaustive(200)?,
        verify::exhaustive_density_dominates(200)?,
    ]))
}

fn convolution_reduction() -> Result<Outcome> {
    let f = Faults::default();
    Ok(Outcome::from_checks(&[
        verify::identity_conv_reduces(50, f)?,
        verify::pair_edge_averages(f)?,
    ]))
}

fn gradient_fidelity() -> Result<Outcome> {
    Ok(Outcome::from_checks(&[verify::full_model_gradient()?]))
}

fn hungarian_exactness() -> Result<Outcome> {
    Ok(Outcome::from_checks(&[verify::hungarian_matches_brute_force(200)?]))
}

fn metric_exactness() -> Result<Outcome> {
    Ok(Outcome::from_checks(&[
        verify::metric_matches_brute_force(100)?,
        verify::iou_hand_case()?,
    ]))
}

fn giou_hand_values() -> Result<Outcome> {
    Ok(Outcome::from_checks(&[verify::giou_hand_values()]))
}

fn synthetic_overfit() -> Result<Outcome> {
    let data = synth_generate(&SynthSpec::standard(), 0)?;
    let set = TrainingSet::new(&data.tokens, &data.records)?;
    let mut model = Model::new(ModelConfig::desk())?;
    let cfg = TrainConfig {
        steps: OVERFIT_STEPS,
        ..TrainConfig::default()
    };
    let mut curve = Vec::new();
    let mut failure = None;
    train(&mut model, &set, &cfg, |log, m| {
        if (log.step + 1) % 100 == 0 {
            match predict_all(m, &data.tokens, &data.records, DEFAULT_KEEP)
                .and_then(|p| evaluate(&p, &data.records, &EvalConfig::default()))
            {
                Ok(r) => curve.push(format!("{}:{:.3}", log.step + 1, r.ar)),
                Err(e) => failure = Some(e),
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let preds = predict_all(&model, &data.tokens, &data.records, DEFAULT_KEEP)?;
    let ar = evaluate(&preds, &data.records, &EvalConfig::default())?.ar;
    let sanity = evaluate(&records_as_predictions(&data.records), &data.records, &EvalConfig::default())?.ar;
    Ok(Outcome {
        passed: ar >= 0.90 && sanity == 1.0,
        detail: format!(
            "train AR {ar:.4} after {OVERFIT_STEPS} steps (need >= 0.90; curve {}), eval(gt, gt) AR {sanity}",
            curve.join(" ")
        ),
    })
}

fn ablation_direction() -> Result<Outcome> {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let data = synth_generate(&SynthSpec::standard(), seed)?;
        let set = TrainingSet::new(&data.tokens, &data.records)?;
        let mut finals = [0.0; 2];
        for (slot, layers) in [2usize, 0].into_iter().enumerate() {
            let mut model = Model::new(ModelConfig {
                layers,
                seed,
                ..ModelConfig::desk()
            })?;
            let cfg = TrainConfig {
                steps: ABLATION_STEPS,
                ..TrainConfig::default()
            };
            train(&mut model, &set, &cfg, |_, _| {})?;
            finals[slot] = evaluate_loss(&model, &set)?.total;
        }
        wins += usize::from(finals[0] <= finals[1]);
        rows.push(format!("seed {seed}: L=2 {:.4} vs L=0 {:.4}", finals[0], finals[1]));
    }
    Ok(Outcome {
        passed: wins >= 4,
        detail: format!("L=2 no worse in {wins}/{ABLATION_SEEDS} seeds ({})", rows.join(", ")),
    })
}

fn format_round_trips() -> Result<Outcome> {
    let classes: Vec<usize> = (0..NUM_CLASSES).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let records = random_records(&mut rng, 100, &classes);
    let text = write_annotations_string(&records);
    let parsed = parse_annotations_str(&text)?;
    let annotations_fixed = write_annotations_string(&parsed) == text && parse_annotations_str(&text)? == parsed;
    let preds = random_predictions(&mut rng, &records, &classes, 20);
    let ptext = write_predictions_string(&preds);
    let predictions_fixed = write_predictions_string(&parse_predictions_str(&ptext)?) == ptext;

    let tax = taxonomy();
    let individual = tax.entries().iter().filter(|e| e.arity() == Arity::Individual).count();
    let group = tax.entries().len() - individual;
    Ok(Outcome {
        passed: parsed.len() == 100 && annotations_fixed && predictions_fixed && tax.entries().len() == 22 && (individual, group) == (16, 6),
        detail: format!(
            "100 records fixed point: {annotations_fixed}, predictions fixed point: {predictions_fixed}, taxonomy {} classes ({individual} individual / {group} group)",
            tax.entries().len()
        ),
    })
}

type Criterion = (&'static str, fn() -> Result<Outcome>, Duration);

fn main() {
    let criteria: [Criterion; 9] = [
        ("hypergraph oracle suite", hypergraph_oracle, Duration::from_secs(10)),
        ("convolution reduction", convolution_reduction, Duration::MAX),
        ("gradient fidelity", gradient_fidelity, Duration::from_secs(120)),
        ("hungarian exactness", hungarian_exactness, Duration::from_secs(5)),
        ("metric exactness", metric_exactness, Duration::MAX),
        ("giou hand values", giou_hand_values, Duration::MAX),
        ("end-to-end synthetic overfit", synthetic_overfit, Duration::from_secs(15 * 60)),
        ("ablation direction", ablation_direction, Duration::MAX),
        ("format round-trips", format_round_trips, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (passed, detail) = match outcome {
            Ok(o) if elapsed <= budget => (o.passed, o.detail),
            Ok(o) => (false, format!("{} — over the {:.0?} budget", o.detail, budget)),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!(
            "{} {name:<30} [{:>6.1}s] {detail}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
