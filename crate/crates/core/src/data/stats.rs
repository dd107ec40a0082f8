//! Dataset summaries: per-image means, class counts, group sizes.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::record::ImageRecord;
use crate::data::taxonomy::{taxonomy, Arity, BroadType, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub images: usize,
    pub mean_individuals: f64,
    /// Mean triplets per image for each broad type, in [`BroadType::ALL`] order.
    pub mean_per_broad: Vec<(String, f64)>,
    /// Annotated interactions per atomic class id.
    pub class_counts: Vec<usize>,
    /// Size → count over group-arity interactions.
    pub group_sizes: BTreeMap<usize, usize>,
}

pub fn stats(records: &[ImageRecord]) -> DatasetStats {
    let tax = taxonomy();
    let n = records.len();
    let per_image = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };

    let individuals: usize = records.iter().map(|r| r.individuals.len()).sum();
    let mut broad_totals: BTreeMap<BroadType, usize> = BTreeMap::new();
    let mut class_counts = vec![0; NUM_CLASSES];
    let mut group_sizes = BTreeMap::new();
    for g in records.iter().flat_map(|r| &r.groups) {
        *broad_totals.entry(g.broad).or_insert(0) += g.members.len();
        class_counts[g.atomic] += 1;
        if tax.entries()[g.atomic].arity() == Arity::Group {
            *group_sizes.entry(g.members.len()).or_insert(0) += 1;
        }
    }
    DatasetStats {
        images: n,
        mean_individuals: per_image(individuals),
        mean_per_broad: BroadType::ALL
            .iter()
            .map(|b| (b.name().to_string(), per_image(broad_totals.get(b).copied().unwrap_or(0))))
            .collect(),
        class_counts,
        group_sizes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::data::synth::{synth_generate, SynthSpec};

    #[test]
    fn empty_dataset() {
        let s = stats(&[]);
        assert_eq!(s.mean_individuals, 0.0);
        assert!(s.mean_per_broad.iter().all(|(_, v)| *v == 0.0));
        assert!(s.class_counts.iter().all(|&c| c == 0));
        assert!(s.group_sizes.is_empty());
    }

    #[test]
    fn mean_persons() {
        let rec = |id, k| ImageRecord {
            image_id: id,
            width: 10,
            height: 10,
            individuals: vec![BBox::new(0.5, 0.5, 0.1, 0.1); k],
            groups: vec![],
        };
        assert_eq!(stats(&[rec(0, 3), rec(1, 4)]).mean_individuals, 3.5);
    }

    #[test]
    fn matches_generator_plan() {
        let d = synth_generate(&SynthSpec::standard(), 21).unwrap();
        let s = stats(&d.records);
        assert_eq!(s.group_sizes, d.plan.group_sizes);
        for &(id, c) in &d.plan.class_counts {
            assert_eq!(s.class_counts[id], c);
        }
        let persons: usize = d.plan.persons_per_image.iter().sum();
        assert_eq!(s.mean_individuals, persons as f64 / 16.0);
    }
}
