mod common;

use common::*;
use ovseg_core::data::folds::{make_fold, pascal_universe};
use ovseg_core::data::synthetic::synthetic_universe;
use ovseg_core::train::run::audit_training_stream;
use ovseg_core::train::{fold_datasets, ExperimentConfig};
use ovseg_core::Error;

#[test]
fn pascal_folds_match_the_published_groups() {
    let u = pascal_universe();
    for (i, expected) in PASCAL_FOLDS.iter().enumerate() {
        let f = make_fold(i, &u).unwrap();
        assert_eq!(f.test_categories, expected.to_vec());
        assert_eq!(f.train_categories.len(), 15);
    }
    assert!(matches!(make_fold(4, &u), Err(Error::BadFoldIndex(4))));
}

#[test]
fn folds_partition_the_universe() {
    for u in [pascal_universe(), synthetic_universe(20).unwrap()] {
        let mut seen: Vec<String> = (0..4).flat_map(|i| make_fold(i, &u).unwrap().test_categories).collect();
        seen.sort();
        let mut all = u.clone();
        all.sort();
        assert_eq!(seen, all);
        for i in 0..4 {
            let f = make_fold(i, &u).unwrap();
            assert!(f.train_categories.iter().all(|c| !f.is_test(c)));
            assert_eq!(f.train_categories.len() + f.test_categories.len(), 20);
        }
    }
}

#[test]
fn training_streams_exclude_test_categories_and_leaks_are_caught() {
    let out = criterion_protocol();
    assert!(out.pass, "{}", out.detail);
}

#[test]
fn test_sets_hold_only_test_categories() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_images = 10;
    cfg.data.test_images = 20;
    for fold in 0..4 {
        let (_, test) = fold_datasets(&cfg, 1, fold).unwrap();
        let spec = make_fold(fold, &test.universe).unwrap();
        assert!(test.samples.iter().all(|s| s.categories.iter().all(|c| spec.is_test(c))));
        // The same audit applied to the test split must object.
        assert!(audit_training_stream(&test, &spec).is_err());
    }
}
