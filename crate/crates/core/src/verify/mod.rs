//! Oracle suites: every fast routine checked against a slow, independent
//! one on seeded random instances.
//!
//! ```
//! use nvidehr::verify::{run_suite, Faults, Suite};
//!
//! let report = run_suite(Suite::Matching, Faults::default()).unwrap();
//! assert!(report.passed(), "{report}");
//! ```

pub mod instances;
pub mod oracle;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{giou, iou, BBox, Corners};
use crate::data::{records_as_predictions, taxonomy, Arity, Group, ImageRecord, TripletPrediction};
use crate::error::{Error, Result};
use crate::gradcheck::grad_check_many;
use crate::hypergraph::{
    build_scale_hyperedges, conv_with_operator, exhaustive_hyperedges, hyperedge_conv, multi_scale_forward, subset_density,
    BranchParams, IncidenceMatrix, MlpParams, MultiScaleHypergraph,
};
use crate::loss::{hungarian, matching_cost, total_loss, CostMatrix, LossConfig, MatchTarget};
use crate::metrics::{evaluate, EvalConfig};
use crate::model::{ForwardOptions, Model, ModelConfig, ModelOutput};
use crate::tape::Tape;
use crate::tensor::Tensor;
use instances::{random_affinity, random_incidence, random_predictions, random_records, random_tensor};

/// Finite-difference step used by the gradient suite.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Hypergraph,
    Matching,
    Metric,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradcheck, Suite::Hypergraph, Suite::Matching, Suite::Metric];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Hypergraph => "hypergraph",
            Suite::Matching => "matching",
            Suite::Metric => "metric",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::validation("suite", format!("unknown suite {s:?}")))
    }
}

/// Deliberate faults, to show that the suites notice them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Drop the vertex-degree normalization around the convolution.
    pub tamper_normalization: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    /// Passes when `worst <= limit`.
    fn within(name: &str, worst: f64, limit: f64) -> Self {
        Check::new(name, worst <= limit, format!("max error {worst:.3e} (limit {limit:.0e})"))
    }

    fn agreement(name: &str, cases: usize, failures: usize) -> Self {
        Check::new(name, failures == 0, format!("{}/{cases} cases agree", cases - failures))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{tag} {:<34} {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {}", self.suite.name())?;
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite, faults: Faults) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Gradcheck => vec![conv_gradient()?, full_model_gradient()?],
        Suite::Hypergraph => vec![
            greedy_equals_exhaustive(200)?,
            exhaustive_density_dominates(200)?,
            identity_conv_reduces(50, faults)?,
            pair_edge_averages(faults)?,
            conv_matches_formula(50, faults)?,
            multi_scale_matches_reference(20)?,
        ],
        Suite::Matching => vec![
            hungarian_matches_brute_force(200)?,
            hungarian_tie_rule(100)?,
            giou_hand_values(),
            matching_cost_optimum(50)?,
        ],
        Suite::Metric => vec![metric_matches_brute_force(100)?, iou_hand_case()?],
    };
    Ok(SuiteReport { suite, checks })
}

fn rng(stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_0000 + stream)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn densities(a: &Tensor, h: &IncidenceMatrix) -> Vec<f64> {
    (0..h.edge_count()).map(|e| subset_density(a, &h.members(e))).collect()
}

/// Scale-2 greedy hyperedges equal the exhaustive optimum, N ≤ 10.
pub fn greedy_equals_exhaustive(cases: usize) -> Result<Check> {
    let mut rng = rng(1);
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.gen_range(2..=10);
        let a = random_affinity(&mut rng, n);
        if build_scale_hyperedges(&a, 2)? != exhaustive_hyperedges(&a, 2)? {
            bad += 1;
        }
    }
    Ok(Check::agreement("greedy = exhaustive at s=2", cases, bad))
}

/// At scales 3 and 4 the exhaustive hyperedge is at least as dense as the
/// greedy one, for every vertex.
pub fn exhaustive_density_dominates(cases: usize) -> Result<Check> {
    let mut rng = rng(2);
    let mut bad = 0;
    for case in 0..cases {
        let n = rng.gen_range(3..=10);
        let s = 3 + case % 2;
        let a = random_affinity(&mut rng, n);
        let greedy = densities(&a, &build_scale_hyperedges(&a, s)?);
        let exact = densities(&a, &exhaustive_hyperedges(&a, s)?);
        if greedy.iter().zip(&exact).any(|(g, e)| e < g) {
            bad += 1;
        }
    }
    Ok(Check::agreement("exhaustive density >= greedy", cases, bad))
}

/// The convolution under test, optionally with its normalization broken.
fn subject_conv(tape: &mut Tape, h: &IncidenceMatrix, v: &Tensor, theta: &Tensor, activate: bool, faults: Faults) -> Result<Tensor> {
    let vv = tape.constant(v.clone());
    let tv = tape.constant(theta.clone());
    let out = if faults.tamper_normalization {
        let mut op = h.propagation_operator();
        let d = h.vertex_degrees();
        for i in 0..op.rows() {
            for j in 0..op.cols() {
                let x = op.get(i, j) * ((d[i] * d[j]) as f64).sqrt();
                op.set(i, j, x);
            }
        }
        conv_with_operator(tape, &op, vv, tv, activate)?
    } else {
        hyperedge_conv(tape, h, vv, tv, activate)?
    };
    Ok(tape.value(out).clone())
}

/// Identity incidence reduces the convolution to `V θ`.
pub fn identity_conv_reduces(cases: usize, faults: Faults) -> Result<Check> {
    let mut rng = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, ci, co) = (rng.gen_range(1..=8), rng.gen_range(1..=6), rng.gen_range(1..=6));
        let v = random_tensor(&mut rng, &[n, ci], 2.0);
        let theta = random_tensor(&mut rng, &[ci, co], 2.0);
        let mut tape = Tape::new();
        let got = subject_conv(&mut tape, &IncidenceMatrix::identity(n), &v, &theta, false, faults)?;
        worst = worst.max(got.max_abs_diff(&v.matmul(&theta)?)?);
    }
    Ok(Check::within("identity incidence = V·θ", worst, 1e-10))
}

/// Two vertices sharing one hyperedge, `θ = I`: every row becomes the mean.
pub fn pair_edge_averages(faults: Faults) -> Result<Check> {
    let mut rng = rng(4);
    let h = IncidenceMatrix::from_hyperedges(2, &[vec![0, 1]])?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let c = rng.gen_range(1..=6);
        let v = random_tensor(&mut rng, &[2, c], 3.0);
        let mut tape = Tape::new();
        let got = subject_conv(&mut tape, &h, &v, &Tensor::eye(c), false, faults)?;
        for j in 0..c {
            let mean = (v.get(0, j) + v.get(1, j)) / 2.0;
            worst = worst.max((got.get(0, j) - mean).abs()).max((got.get(1, j) - mean).abs());
        }
    }
    Ok(Check::within("single pair edge = row means", worst, 1e-12))
}

/// Random 5-vertex hypergraphs against the factor-by-factor formula.
pub fn conv_matches_formula(cases: usize, faults: Faults) -> Result<Check> {
    let mut rng = rng(5);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let m = rng.gen_range(1..=6);
        let h = random_incidence(&mut rng, 5, m);
        let v = random_tensor(&mut rng, &[5, 4], 2.0);
        let theta = random_tensor(&mut rng, &[4, 3], 2.0);
        let activate = case % 2 == 0;
        let entries: Vec<u8> = h.iter().flatten().map(|&x| x as u8).collect();
        let inc = IncidenceMatrix::from_entries(5, m, &entries)?;
        let mut tape = Tape::new();
        let got = subject_conv(&mut tape, &inc, &v, &theta, activate, faults)?;
        let want = oracle::dense_conv(&h, &rows(&v), &rows(&theta), activate);
        worst = worst.max(max_diff(&rows(&got), &want));
    }
    Ok(Check::within("conv = literal formula", worst, 1e-10))
}

/// Full multi-scale branch (N=6, C=8, S=3, L=2) against the straight-line
/// version, which also rebuilds the hypergraphs itself.
pub fn multi_scale_matches_reference(cases: usize) -> Result<Check> {
    let mut rng = rng(6);
    let (n, c, s, l) = (6, 8, 3, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let v0 = random_tensor(&mut rng, &[n, c], 1.0);
        let thetas: Vec<Vec<Tensor>> = (0..s).map(|_| (0..l).map(|_| random_tensor(&mut rng, &[c, c], 0.5)).collect()).collect();
        let w1 = random_tensor(&mut rng, &[s * c, c], 0.3);
        let b1 = random_tensor(&mut rng, &[1, c], 0.3);
        let w2 = random_tensor(&mut rng, &[c, c], 0.3);
        let b2 = random_tensor(&mut rng, &[1, c], 0.3);

        let mut tape = Tape::new();
        let graphs = MultiScaleHypergraph::from_embeddings(&v0, s)?;
        let params = BranchParams {
            theta: thetas.iter().map(|ts| ts.iter().map(|t| tape.constant(t.clone())).collect()).collect(),
            mlp: MlpParams {
                w1: tape.constant(w1.clone()),
                b1: tape.constant(b1.clone()),
                w2: tape.constant(w2.clone()),
                b2: tape.constant(b2.clone()),
            },
        };
        let x = tape.constant(v0.clone());
        let got = multi_scale_forward(&mut tape, x, &graphs, &params, l)?;
        let reference = oracle::BranchWeights {
            theta: thetas.iter().map(|ts| ts.iter().map(rows).collect()).collect(),
            w1: rows(&w1),
            b1: b1.data().to_vec(),
            w2: rows(&w2),
            b2: b2.data().to_vec(),
        };
        worst = worst.max(max_diff(&rows(tape.value(got)), &oracle::multi_scale(&rows(&v0), &reference)));
    }
    Ok(Check::within("multi-scale = straight-line", worst, 1e-10))
}

fn random_cost(rng: &mut ChaCha8Rng, integer: bool) -> CostMatrix {
    let (m, n) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
    let data = (0..m * n)
        .map(|_| if integer { rng.gen_range(0..4) as f64 } else { rng.gen_range(-5.0..5.0) })
        .collect();
    CostMatrix::new(m, n, data).unwrap()
}

/// Hungarian totals equal the permutation minimum on matrices up to 7×7.
pub fn hungarian_matches_brute_force(cases: usize) -> Result<Check> {
    let mut rng = rng(7);
    let mut bad = 0;
    for _ in 0..cases {
        let cost = random_cost(&mut rng, false);
        let got = hungarian(&cost)?;
        let (best, _) = oracle::brute_force_assignment(&cost);
        let ok = got.pairs.len() == cost.rows().min(cost.cols()) && (got.total_cost(&cost) - best).abs() <= 1e-9;
        bad += usize::from(!ok);
    }
    Ok(Check::agreement("hungarian = permutation minimum", cases, bad))
}

/// Heavily tied small-integer costs: the pair list is the
/// lexicographically smallest optimum.
pub fn hungarian_tie_rule(cases: usize) -> Result<Check> {
    let mut rng = rng(8);
    let mut bad = 0;
    for _ in 0..cases {
        let cost = random_cost(&mut rng, true);
        let got = hungarian(&cost)?;
        let (_, pairs) = oracle::brute_force_assignment(&cost);
        bad += usize::from(got.pairs != pairs);
    }
    Ok(Check::agreement("hungarian lexicographic ties", cases, bad))
}

pub fn giou_hand_values() -> Check {
    let a = Corners::new(0.0, 0.0, 1.0, 1.0);
    let b = Corners::new(2.0, 2.0, 3.0, 3.0);
    let same = giou(a, a);
    let apart = giou(a, b);
    let err = (same - 1.0).abs().max((apart + 7.0 / 9.0).abs());
    Check::new(
        "giou hand values",
        err <= 1e-9,
        format!("identical {same}, disjoint {apart:.12} (want -7/9)"),
    )
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4))
}

/// Random model outputs: the Hungarian optimum of the matching cost equals
/// the brute-force optimum.
pub fn matching_cost_optimum(cases: usize) -> Result<Check> {
    let mut rng = rng(9);
    let cfg = LossConfig::default();
    let mut bad = 0;
    for _ in 0..cases {
        let (n, g, k) = (rng.gen_range(1..=6), rng.gen_range(0..=6), 5);
        let mut tape = Tape::new();
        let boxes = |rng: &mut ChaCha8Rng| Tensor::from_rows(&(0..n).map(|_| random_box(rng).to_array().to_vec()).collect::<Vec<_>>());
        let out = ModelOutput {
            boxes_h: tape.constant(boxes(&mut rng)?),
            boxes_g: tape.constant(boxes(&mut rng)?),
            logits: tape.constant(random_tensor(&mut rng, &[n, k], 4.0)),
        };
        let targets: Vec<MatchTarget> = (0..g)
            .map(|_| MatchTarget {
                individual: random_box(&mut rng),
                group: random_box(&mut rng),
                classes: vec![rng.gen_range(0..k)],
            })
            .collect();
        let cost = matching_cost(&tape, &out, &targets, &cfg)?;
        let got = hungarian(&cost)?.total_cost(&cost);
        let (best, _) = oracle::brute_force_assignment(&cost);
        bad += usize::from((got - best).abs() > 1e-9);
    }
    Ok(Check::agreement("matching cost optimum", cases, bad))
}

const METRIC_CLASSES: [usize; 6] = [0, 1, 3, 6, 13, 17];

fn reports_agree(preds: &[TripletPrediction], records: &[ImageRecord], cfg: &EvalConfig) -> Result<bool> {
    let got = evaluate(preds, records, cfg)?;
    let want = oracle::brute_force_evaluate(preds, records, &cfg.thresholds, &cfg.ks, cfg.num_classes);
    Ok(got.recall == want.recall && got.mean_recall == want.mean_recall && got.ar == want.ar)
}

/// `evaluate` equals the quadratic evaluator exactly, for the standard
/// cutoffs and for small ones that actually truncate.
pub fn metric_matches_brute_force(cases: usize) -> Result<Check> {
    let mut rng = rng(10);
    let small = EvalConfig {
        ks: vec![1, 2, 5, 10],
        ..EvalConfig::default()
    };
    let mut bad = 0;
    for _ in 0..cases {
        let images = rng.gen_range(1..=10);
        let records = random_records(&mut rng, images, &METRIC_CLASSES);
        let preds = random_predictions(&mut rng, &records, &METRIC_CLASSES, 20);
        let ok = reports_agree(&preds, &records, &EvalConfig::default())? && reports_agree(&preds, &records, &small)?;
        bad += usize::from(!ok);
    }
    Ok(Check::agreement("evaluate = brute-force evaluator", cases, bad))
}

/// One ground truth, one same-class prediction overlapping it with IoU
/// 0.6 on both boxes: mR = 2/3 at every K.
pub fn iou_hand_case() -> Result<Check> {
    let record = iou_case_record();
    let truth = Corners::new(0.0, 0.0, 50.0, 100.0);
    let shifted = Corners::new(12.5, 0.0, 62.5, 100.0);
    let overlap = iou(truth, shifted);
    let pred = TripletPrediction {
        image_id: record.image_id,
        individual: shifted,
        group: shifted,
        atomic: record.groups[0].atomic,
        confidence: 0.9,
    };
    let cfg = EvalConfig {
        ks: vec![1, 2, 25, 50, 100],
        ..EvalConfig::default()
    };
    let report = evaluate(&[pred], std::slice::from_ref(&record), &cfg)?;
    let worst = report.mean_recall.iter().map(|m| (m - 2.0 / 3.0).abs()).fold(0.0, f64::max);
    let own = evaluate(&records_as_predictions(std::slice::from_ref(&record)), &[record], &EvalConfig::default())?.ar;
    Ok(Check::new(
        "IoU 0.6 hand case",
        (overlap - 0.6).abs() < 1e-12 && worst < 1e-12 && own == 1.0,
        format!("iou {overlap}, mR {:?}, self AR {own}", report.mean_recall),
    ))
}

fn iou_case_record() -> ImageRecord {
    let tax = taxonomy();
    let smile = tax.by_name("smile").expect("smile is registered");
    debug_assert_eq!(smile.arity(), Arity::Individual);
    let person = Corners::new(0.0, 0.0, 50.0, 100.0).normalized(200.0, 100.0);
    ImageRecord {
        image_id: 7,
        width: 200,
        height: 100,
        individuals: vec![person],
        groups: vec![Group {
            members: vec![0],
            broad: smile.broad,
            atomic: smile.id,
            bbox: person,
        }],
    }
}

/// Hyperedge convolution composed with a sum on a random 5-vertex graph.
pub fn conv_gradient() -> Result<Check> {
    let mut rng = rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let m = rng.gen_range(1..=5);
        let entries: Vec<u8> = random_incidence(&mut rng, 5, m).iter().flatten().map(|&x| x as u8).collect();
        let h = IncidenceMatrix::from_entries(5, m, &entries)?;
        let v = random_tensor(&mut rng, &[5, 3], 1.0);
        let theta = random_tensor(&mut rng, &[3, 2], 1.0);
        let errs = grad_check_many(
            |t, x| {
                let y = hyperedge_conv(t, &h, x[0], x[1], true)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            },
            &[v, theta],
            FD_STEP,
        )?;
        worst = errs.into_iter().fold(worst, f64::max);
    }
    Ok(Check::within("hyperedge conv gradient", worst, GRAD_TOLERANCE))
}

/// Model config used by the full-model gradient check.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig::tiny()
}

/// Per-weight-tensor relative error of the full training loss on one
/// random image with two targets.
pub fn full_model_gradient_errors() -> Result<Vec<(String, f64)>> {
    let cfg = gradcheck_config();
    let model = Model::new(cfg.clone())?;
    let mut rng = rng(12);
    let tokens = random_tensor(&mut rng, &[cfg.token_count(), cfg.token_dim], 1.0);
    let targets: Vec<MatchTarget> = (0..2)
        .map(|i| MatchTarget {
            individual: random_box(&mut rng),
            group: random_box(&mut rng),
            classes: vec![i * 5, 21 - i],
        })
        .collect();
    let loss_cfg = cfg.loss();
    let errors = grad_check_many(
        |tape, vars| {
            let bound = model.bind_vars(tape, vars.to_vec(), ForwardOptions::default())?;
            let out = bound.forward(tape, &tokens)?;
            Ok(total_loss(tape, &out, &targets, &loss_cfg)?.total)
        },
        model.weights().tensors(),
        FD_STEP,
    )?;
    Ok(model.weights().names().iter().cloned().zip(errors).collect())
}

pub fn full_model_gradient() -> Result<Check> {
    let errors = full_model_gradient_errors()?;
    let (name, worst) = errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let mut check = Check::within("full-model loss gradient", worst, GRAD_TOLERANCE);
    check.detail = format!("{} over {} tensors, worst {name}", check.detail, errors.len());
    Ok(check)
}
