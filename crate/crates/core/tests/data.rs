use nvidehr::data::{
    parse_annotations_str, parse_predictions_str, stats, synth_generate, taxonomy, write_annotations_string,
    write_predictions_string, Arity, BroadType, SynthSpec, NUM_CLASSES,
};
use nvidehr::verify::instances::{random_predictions, random_records};
use nvidehr::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn all_classes() -> Vec<usize> {
    (0..NUM_CLASSES).collect()
}

#[test]
fn taxonomy_has_the_published_split() {
    let tax = taxonomy();
    assert_eq!(tax.entries().len(), 22);
    let individual = tax.entries().iter().filter(|e| e.arity() == Arity::Individual).count();
    assert_eq!((individual, 22 - individual), (16, 6));
    let per_type: Vec<usize> = BroadType::ALL.iter().map(|&b| tax.ids_of(b).count()).collect();
    let mut sorted = per_type.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![3, 3, 4, 5, 7]);
    assert_eq!(tax.entries()[0].name, "gaze-following");
    assert_eq!(tax.entries()[21].name, "bow");
    assert_eq!(tax.ids_of(BroadType::Touch).count(), 3);
}

#[test]
fn hundred_seeded_records_are_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let records = random_records(&mut rng, 100, &all_classes());
    for r in &records {
        r.validate().unwrap();
    }
    let text = write_annotations_string(&records);
    let parsed = parse_annotations_str(&text).unwrap();
    assert_eq!(parsed.len(), 100);
    let again = write_annotations_string(&parsed);
    assert_eq!(again, text);
    assert_eq!(parse_annotations_str(&again).unwrap(), parsed);
    for (a, b) in records.iter().zip(&parsed) {
        assert_eq!(a.expand_triplets().len(), b.expand_triplets().len());
    }

    let preds = random_predictions(&mut rng, &records, &all_classes(), 20);
    let text = write_predictions_string(&preds);
    let parsed = parse_predictions_str(&text).unwrap();
    assert_eq!(write_predictions_string(&parsed), text);
}

#[test]
fn repeated_interaction_is_rejected() {
    let line = r#"{"image_id":1,"width":100,"height":50,"individuals":[[0,0,10,20]],"groups":[{"members":[0],"broad":"expression","atomic":"smile","box":[0,0,10,20]},{"members":[0],"broad":"expression","atomic":"smile","box":[0,0,10,20]}]}"#;
    let err = parse_annotations_str(line).unwrap_err();
    assert!(matches!(err, Error::Validation { .. }), "{err}");
    assert!(err.to_string().contains("groups[1]"), "{err}");
}

#[test]
fn triplet_expansion_examples() {
    let line = r#"{"image_id":1,"width":100,"height":100,"individuals":[[0,0,10,20],[20,0,30,20],[40,0,50,30]],"groups":[{"members":[2,0,1],"broad":"gaze","atomic":"gaze-following","box":[0,0,50,30]},{"members":[1],"broad":"expression","atomic":"smile","box":[20,0,30,20]}]}"#;
    let r = &parse_annotations_str(line).unwrap()[0];
    let t = r.expand_triplets();
    assert_eq!(t.len(), 4);
    assert_eq!(t.iter().map(|x| x.member).collect::<Vec<_>>(), vec![0, 1, 2, 1]);
    assert!(t[..3].iter().all(|x| x.group == r.groups[0].bbox));
    assert_eq!(t[3].group, r.individuals[1]);
}

#[test]
fn standard_spec_covers_every_broad_type() {
    let spec = SynthSpec::standard();
    let data = synth_generate(&spec, 0).unwrap();
    assert_eq!(data.records.len(), 16);
    let tax = taxonomy();
    let mut seen: Vec<BroadType> = data.records.iter().flat_map(|r| &r.groups).map(|g| tax.entries()[g.atomic].broad).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 5);
    for r in &data.records {
        assert!((2..=4).contains(&r.individuals.len()));
    }
    let s = stats(&data.records);
    assert_eq!(s.group_sizes, data.plan.group_sizes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_data_is_valid_and_reproducible(seed in any::<u64>()) {
        let spec = SynthSpec::standard();
        let a = synth_generate(&spec, seed).unwrap();
        let b = synth_generate(&spec, seed).unwrap();
        prop_assert_eq!(&a.records, &b.records);
        for r in &a.records {
            prop_assert!(r.validate().is_ok());
            let tokens = a.tokens.get(r.image_id).unwrap();
            prop_assert_eq!(tokens, b.tokens.get(r.image_id).unwrap());
        }
        let text = write_annotations_string(&a.records);
        prop_assert_eq!(write_annotations_string(&parse_annotations_str(&text).unwrap()), text);
    }

    #[test]
    fn random_records_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&mut rng, 5, &all_classes());
        let text = write_annotations_string(&records);
        let parsed = parse_annotations_str(&text).unwrap();
        prop_assert_eq!(write_annotations_string(&parsed), text);
    }
}
