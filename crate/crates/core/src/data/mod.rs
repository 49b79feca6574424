//! Category folds, samples, synthetic data, dataset directories and metrics.

pub mod disk;
pub mod folds;
pub mod metrics;
pub mod sample;
pub mod synthetic;

pub use folds::{make_fold, pascal_universe, FoldSpec};
pub use metrics::{miou, FoldReport, IouAccumulator, LabelMap};
pub use sample::{one_hot_mask, Dataset, SegmentationSample};
pub use synthetic::{gen_synthetic, synthetic_universe, SyntheticConfig};
