use nvidehr::data::{records_as_predictions, taxonomy, BroadType, ImageRecord, TripletPrediction};
use nvidehr::metrics::{evaluate, match_triplets, mean_recall, top_k, EvalConfig, EvalReport, EvalTriplet};
use nvidehr::verify::instances::{random_predictions, random_records};
use nvidehr::{Corners, Error};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CLASSES: [usize; 8] = [0, 2, 4, 7, 10, 14, 18, 20];

fn instance(seed: u64) -> (Vec<ImageRecord>, Vec<TripletPrediction>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = random_records(&mut rng, 6, &CLASSES);
    let preds = random_predictions(&mut rng, &records, &CLASSES, 20);
    (records, preds)
}

fn small_k() -> EvalConfig {
    EvalConfig {
        ks: vec![1, 3, 10],
        ..EvalConfig::default()
    }
}

fn pred(image_id: u64, c: Corners, atomic: usize, confidence: f64) -> TripletPrediction {
    TripletPrediction {
        image_id,
        individual: c,
        group: c,
        atomic,
        confidence,
    }
}

fn gt(c: Corners, atomic: usize) -> EvalTriplet {
    EvalTriplet {
        individual: c,
        group: c,
        atomic,
    }
}

#[test]
fn perfect_predictions_score_one() {
    let (records, _) = instance(1);
    let report = evaluate(&records_as_predictions(&records), &records, &EvalConfig::default()).unwrap();
    assert_eq!(report.ar, 1.0);
    assert!(report.mean_recall.iter().all(|&m| m == 1.0));
}

#[test]
fn empty_predictions_score_zero() {
    let (records, _) = instance(2);
    let report = evaluate(&[], &records, &EvalConfig::default()).unwrap();
    assert_eq!(report.ar, 0.0);
    assert_eq!(mean_recall(&[], &records, 25).unwrap(), 0.0);
}

#[test]
fn ar_is_mean_of_mean_recalls() {
    let (records, preds) = instance(3);
    let r = evaluate(&preds, &records, &EvalConfig::default()).unwrap();
    let mean = r.mean_recall.iter().sum::<f64>() / 3.0;
    assert!((r.ar - mean).abs() < 1e-12);
    assert_eq!(r.mean_recall_at(50), Some(r.mean_recall[1]));
    assert_eq!(r.mean_recall_at(7), None);
}

#[test]
fn single_prediction_rules() {
    let box_a = Corners::new(0.0, 0.0, 10.0, 10.0);
    let gts = [gt(box_a, 3)];
    // exact box: TP at every τ
    for tau in [0.25, 0.5, 0.75] {
        let (flags, _) = match_triplets(&[pred(0, box_a, 3, 0.5)], &gts, tau, 10);
        assert_eq!(flags, vec![true]);
    }
    // IoU 0.6: TP at 0.25 and 0.5, FP at 0.75
    let shifted = Corners::new(2.5, 0.0, 12.5, 10.0);
    let got: Vec<bool> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&t| match_triplets(&[pred(0, shifted, 3, 0.5)], &gts, t, 10).0[0])
        .collect();
    assert_eq!(got, vec![true, true, false]);
    // two predictions on one GT: only the more confident one counts
    let (flags, claimed) = match_triplets(&[pred(0, box_a, 3, 0.4), pred(0, box_a, 3, 0.8)], &gts, 0.5, 10);
    assert_eq!(flags, vec![false, true]);
    assert_eq!(claimed, vec![None, Some(0)]);
    // wrong class never matches
    assert_eq!(match_triplets(&[pred(0, box_a, 4, 0.9)], &gts, 0.25, 10).0, vec![false]);
    // outside the top K never matches
    let (flags, _) = match_triplets(&[pred(0, box_a, 3, 0.4), pred(0, shifted, 9, 0.8)], &gts, 0.5, 1);
    assert_eq!(flags, vec![false, false]);
}

#[test]
fn top_k_keeps_input_order_on_ties() {
    let c = Corners::new(0.0, 0.0, 1.0, 1.0);
    let preds: Vec<_> = [0.5, 0.9, 0.5, 0.9, 0.1].iter().map(|&s| pred(0, c, 0, s)).collect();
    assert_eq!(top_k(&preds, 4), vec![1, 3, 0, 2]);
    assert_eq!(top_k(&preds, 0), Vec::<usize>::new());
}

#[test]
fn group_box_must_also_overlap() {
    let ind = Corners::new(0.0, 0.0, 10.0, 10.0);
    let grp = Corners::new(0.0, 0.0, 30.0, 10.0);
    let truth = [EvalTriplet {
        individual: ind,
        group: grp,
        atomic: 1,
    }];
    let mut p = pred(0, ind, 1, 0.9);
    assert!(!match_triplets(&[p], &truth, 0.5, 5).0[0]);
    p.group = grp;
    assert!(match_triplets(&[p], &truth, 0.5, 5).0[0]);
}

#[test]
fn validation_errors() {
    let (records, preds) = instance(4);
    let mut stray = preds.clone();
    stray.push(pred(99_999, Corners::new(0.0, 0.0, 1.0, 1.0), 0, 0.5));
    assert!(matches!(evaluate(&stray, &records, &EvalConfig::default()), Err(Error::Validation { .. })));
    let mut bad_class = preds.clone();
    bad_class.push(pred(records[0].image_id, Corners::new(0.0, 0.0, 1.0, 1.0), 22, 0.5));
    assert!(matches!(evaluate(&bad_class, &records, &EvalConfig::default()), Err(Error::Validation { .. })));
    let mut dup = records.clone();
    dup.push(records[0].clone());
    assert!(evaluate(&preds, &dup, &EvalConfig::default()).is_err());
    let no_gt: Vec<ImageRecord> = records.iter().map(|r| ImageRecord { groups: vec![], ..r.clone() }).collect();
    assert!(matches!(evaluate(&[], &no_gt, &EvalConfig::default()), Err(Error::UndefinedMetric(_))));
    let unsorted = EvalConfig {
        thresholds: vec![0.5, 0.25],
        ..EvalConfig::default()
    };
    assert!(evaluate(&preds, &records, &unsorted).is_err());
}

#[test]
fn restricting_to_one_broad_type_zeroes_the_others() {
    let (records, _) = instance(5);
    let tax = taxonomy();
    let perfect = records_as_predictions(&records);
    let only: Vec<_> = perfect
        .into_iter()
        .filter(|p| tax.entries()[p.atomic].broad == BroadType::Gesture)
        .collect();
    let r = evaluate(&only, &records, &EvalConfig::default()).unwrap();
    for (b, v) in &r.broad {
        match (b, v) {
            (BroadType::Gesture, Some(x)) => assert_eq!(*x, 1.0),
            (_, Some(x)) => assert_eq!(*x, 0.0, "{b:?}"),
            (_, None) => {}
        }
    }
    assert_eq!(r.group, Some(0.0));
}

#[test]
fn report_serializations() {
    let (records, preds) = instance(6);
    let r = evaluate(&preds, &records, &EvalConfig::default()).unwrap();
    let table = r.to_table();
    assert!(table.contains("mR@25") && table.contains("AR") && table.contains("individual"));
    let json = r.to_json();
    assert_eq!(json["AR"].as_f64(), Some(r.ar));
    assert_eq!(json["mean_recall"]["mR@100"].as_f64(), Some(r.mean_recall[2]));
    assert!(json["per_class"].as_object().unwrap().len() <= CLASSES.len());
}

fn recalls_at_most(a: &EvalReport, b: &EvalReport) -> bool {
    let pairs = a.recall.iter().flatten().flatten().zip(b.recall.iter().flatten().flatten());
    pairs.into_iter().all(|(x, y)| match (x, y) {
        (Some(x), Some(y)) => x <= y,
        (None, None) => true,
        _ => false,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_grows_with_k_and_shrinks_with_tau(seed in any::<u64>()) {
        let (records, preds) = instance(seed);
        let cfg = EvalConfig { ks: vec![1, 2, 5, 25, 50, 100], ..EvalConfig::default() };
        let r = evaluate(&preds, &records, &cfg).unwrap();
        for w in r.mean_recall.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for per_k in &r.recall {
            for c in 0..r.gt_counts.len() {
                let col: Vec<f64> = per_k.iter().filter_map(|t| t[c]).collect();
                for w in col.windows(2) {
                    prop_assert!(w[0] >= w[1]);
                }
            }
        }
        prop_assert!(r.recall.iter().flatten().flatten().flatten().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn positive_rescaling_of_scores_changes_nothing(seed in any::<u64>(), factor in 0.01f64..100.0) {
        let (records, preds) = instance(seed);
        let scaled: Vec<_> = preds.iter().map(|p| TripletPrediction { confidence: p.confidence * factor, ..*p }).collect();
        let a = evaluate(&preds, &records, &small_k()).unwrap();
        let b = evaluate(&scaled, &records, &small_k()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn duplicating_a_matched_prediction_never_helps(seed in any::<u64>()) {
        let (records, preds) = instance(seed);
        let base = evaluate(&preds, &records, &small_k()).unwrap();
        let mut more = preds.clone();
        if let Some(p) = preds.iter().max_by(|a, b| a.confidence.total_cmp(&b.confidence)) {
            more.push(*p);
        }
        let after = evaluate(&more, &records, &small_k()).unwrap();
        prop_assert!(recalls_at_most(&after, &base));
    }
}
