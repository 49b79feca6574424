//! The three-variant ablation: learned positions, Fourier positions, and
//! Fourier positions with fusion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::folds::{make_fold, NUM_FOLDS};
use crate::encoders::FrozenEncoder;
use crate::error::Result;
use crate::io::write_atomic;
use crate::train::config::{AblationVariant, ExperimentConfig};
use crate::train::run::{evaluate, fold_datasets, train, EvalOptions};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub fold: usize,
    pub variant: String,
    pub miou: f64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub train_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_fourier: bool,
    pub use_fusion: bool,
    pub use_decoder: bool,
    /// Mean over seeds per fold; `None` for folds not run.
    pub fold_miou: [Option<f64>; NUM_FOLDS],
    /// Mean over the folds that were run.
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    /// Fold-mean mIoU of `variant` for one seed.
    pub fn seed_miou(&self, seed: u64, variant: AblationVariant) -> Option<f64> {
        let xs: Vec<f64> = self.runs.iter().filter(|r| r.seed == seed && r.variant == variant.name()).map(|r| r.miou).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Plain-text table: component flags, per-fold mIoU and the mean, in
    /// percent.
    pub fn to_text(&self) -> String {
        let mut out = String::from("variant  F_Emb  Fusion  Visual_Decoder    5^0    5^1    5^2    5^3   mIoU\n");
        let mark = |b: bool| if b { "yes" } else { "no" };
        for r in &self.rows {
            let _ = write!(out, "{:<8} {:>5}  {:>6}  {:>14}", r.variant, mark(r.use_fourier), mark(r.use_fusion), mark(r.use_decoder));
            for f in r.fold_miou {
                match f {
                    Some(v) => {
                        let _ = write!(out, " {:>6.1}", 100.0 * v);
                    }
                    None => out.push_str("    n/a"),
                }
            }
            let _ = writeln!(out, " {:>6.1}", 100.0 * r.miou);
        }
        out
    }
}

/// Trains and evaluates every variant on the same seeds and folds. Each
/// (seed, fold) pair gets its own generated train and test sets, shared by
/// the three variants.
pub fn run_ablation(cfg: &ExperimentConfig, enc: &FrozenEncoder, out: Option<&Path>) -> Result<AblationTable> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for &seed in &cfg.ablation_seeds {
        for &fold_index in &cfg.ablation_folds {
            let (train_set, test_set) = fold_datasets(cfg, seed, fold_index)?;
            let fold = make_fold(fold_index, &test_set.universe)?;
            for variant in AblationVariant::ALL {
                let mut c = cfg.clone();
                c.seed = seed;
                c.fold_index = fold_index;
                c.variant = variant;
                let (model, log) = train(&c, enc, &train_set, None)?;
                let report = evaluate(&model, enc, &fold, &test_set, &EvalOptions::default())?;
                runs.push(AblationRun {
                    seed,
                    fold: fold_index,
                    variant: variant.name().to_string(),
                    miou: report.miou,
                    first_loss: log.step_losses[0],
                    final_loss: *log.step_losses.last().expect("at least one step"),
                    train_secs: log.wall_clock_secs,
                });
            }
        }
    }
    let rows = AblationVariant::ALL
        .iter()
        .map(|&v| {
            let mut per_fold: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in runs.iter().filter(|r| r.variant == v.name()) {
                per_fold.entry(r.fold).or_default().push(r.miou);
            }
            let mut fold_miou = [None; NUM_FOLDS];
            for (f, xs) in &per_fold {
                fold_miou[*f] = Some(xs.iter().sum::<f64>() / xs.len() as f64);
            }
            let done: Vec<f64> = fold_miou.iter().flatten().copied().collect();
            AblationRow {
                variant: v.name().to_string(),
                use_fourier: v.use_fourier(),
                use_fusion: v.use_fusion(),
                use_decoder: v.use_decoder(),
                fold_miou,
                miou: done.iter().sum::<f64>() / done.len() as f64,
            }
        })
        .collect();
    let table = AblationTable { rows, runs };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
        write_atomic(&dir.join("ablation.txt"), table.to_text().as_bytes())?;
        write_atomic(&dir.join("ablation.json"), serde_json::to_string_pretty(&table)?.as_bytes())?;
    }
    Ok(table)
}
