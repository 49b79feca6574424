//! Training loop, zero-shot evaluation, checkpoints and the ablation harness.

pub mod ablation;
pub mod config;
pub mod model;
pub mod optim;
pub mod run;

pub use ablation::{run_ablation, AblationTable};
pub use config::{AblationVariant, ExperimentConfig, QueryMode};
pub use model::{build_encoder, load_checkpoint, load_checkpoint_as, save_checkpoint, FeatureCache, Model};
pub use run::{evaluate, fold_datasets, predict, train, EvalOptions, TrainLog};
