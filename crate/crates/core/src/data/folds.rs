//! Four-fold category splits of a 20-category universe.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PASCAL VOC categories in canonical fold order.
pub const PASCAL_CATEGORIES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motor-bike",
    "person",
    "potted plant",
    "sheep",
    "sofa",
    "train",
    "tv/monitor",
];

pub const NUM_FOLDS: usize = 4;
pub const CLASSES_PER_FOLD: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub test_categories: Vec<String>,
    pub train_categories: Vec<String>,
}

impl FoldSpec {
    pub fn is_test(&self, category: &str) -> bool {
        self.test_categories.iter().any(|c| c == category)
    }

    pub fn is_train(&self, category: &str) -> bool {
        self.train_categories.iter().any(|c| c == category)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn pascal_universe() -> Vec<String> {
    PASCAL_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

/// Fold `i` of `universe`. For the PASCAL categories (in any order) the
/// test split is the fixed PASCAL-5i group; for any other universe it is
/// entries `5i..5i+5` in the given order.
pub fn make_fold(i: usize, universe: &[String]) -> Result<FoldSpec> {
    if i >= NUM_FOLDS {
        return Err(Error::BadFoldIndex(i));
    }
    if universe.len() != NUM_FOLDS * CLASSES_PER_FOLD {
        return Err(Error::BadUniverse(format!("expected 20 categories, got {}", universe.len())));
    }
    let distinct: HashSet<&str> = universe.iter().map(String::as_str).collect();
    if distinct.len() != universe.len() {
        return Err(Error::BadUniverse("category names must be distinct".into()));
    }
    if universe.iter().any(|c| c.trim().is_empty()) {
        return Err(Error::BadUniverse("empty category name".into()));
    }
    let is_pascal = PASCAL_CATEGORIES.iter().all(|c| distinct.contains(c));
    let test: Vec<String> = if is_pascal {
        PASCAL_CATEGORIES[i * CLASSES_PER_FOLD..(i + 1) * CLASSES_PER_FOLD].iter().map(|s| s.to_string()).collect()
    } else {
        universe[i * CLASSES_PER_FOLD..(i + 1) * CLASSES_PER_FOLD].to_vec()
    };
    let train = universe.iter().filter(|c| !test.contains(c)).cloned().collect();
    Ok(FoldSpec { fold_index: i, test_categories: test, train_categories: train })
}
