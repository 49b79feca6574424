mod common;

use common::*;
use ovseg_core::data::metrics::{miou, IouAccumulator, LabelMap};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CLASSES: [(u32, &str); 3] = [(1, "a"), (2, "b"), (3, "c")];

#[test]
fn miou_matches_confusion_matrix_oracle() {
    let out = criterion_miou();
    assert!(out.pass, "{}", out.detail);
}

#[test]
fn pooled_counts_match_oracle_on_concatenated_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let pairs: Vec<_> = (0..4).map(|_| random_pair(&mut rng)).collect();
        let preds: Vec<LabelMap> = pairs.iter().map(|(p, _)| LabelMap::new(8, 8, p.clone()).unwrap()).collect();
        let truths: Vec<LabelMap> = pairs.iter().map(|(_, t)| LabelMap::new(8, 8, t.clone()).unwrap()).collect();
        let all_p: Vec<u32> = pairs.iter().flat_map(|(p, _)| p.clone()).collect();
        let all_t: Vec<u32> = pairs.iter().flat_map(|(_, t)| t.clone()).collect();
        let (expected, _) = oracle_miou(&all_p, &all_t, 3);
        assert!((miou(&preds, &truths, &CLASSES).unwrap().miou - expected).abs() <= 1e-12);
    }
}

#[test]
fn absent_class_scores_one_and_is_flagged() {
    let p = LabelMap::new(1, 2, vec![1, 0]).unwrap();
    let t = LabelMap::new(1, 2, vec![1, 2]).unwrap();
    let r = miou(&[p], &[t], &CLASSES).unwrap();
    assert_eq!(r.per_class_iou["c"], 1.0);
    assert_eq!(r.per_class_iou["b"], 0.0);
    assert_eq!(r.absent_classes, vec!["c".to_string()]);
}

proptest! {
    #[test]
    fn merging_partial_accumulators_is_order_free(seed in any::<u64>(), split in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<_> = (0..6).map(|_| random_pair(&mut rng)).collect();
        let maps: Vec<(LabelMap, LabelMap)> = pairs
            .into_iter()
            .map(|(p, t)| (LabelMap::new(8, 8, p).unwrap(), LabelMap::new(8, 8, t).unwrap()))
            .collect();
        let mut whole = IouAccumulator::new(&CLASSES);
        let (mut left, mut right) = (IouAccumulator::new(&CLASSES), IouAccumulator::new(&CLASSES));
        for (i, (p, t)) in maps.iter().enumerate() {
            whole.add(p, t).unwrap();
            if i < split { left.add(p, t).unwrap() } else { right.add(p, t).unwrap() }
        }
        right.merge(&left).unwrap();
        prop_assert_eq!(whole.report().unwrap(), right.report().unwrap());
    }

    #[test]
    fn miou_is_within_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, t) = random_pair(&mut rng);
        let r = miou(&[LabelMap::new(8, 8, p).unwrap()], &[LabelMap::new(8, 8, t).unwrap()], &CLASSES).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
    }
}
