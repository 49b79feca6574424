use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ovseg_core::data::disk::{export_folds, load_dataset, save_dataset};
use ovseg_core::data::folds::{make_fold, pascal_universe};
use ovseg_core::data::synthetic::synthetic_universe;
use ovseg_core::io::{load_tensor, write_atomic, write_pgm};
use ovseg_core::train::{
    build_encoder, evaluate, fold_datasets, load_checkpoint, predict, run_ablation, train, AblationVariant, EvalOptions,
    ExperimentConfig,
};
use ovseg_core::Error;

#[derive(Parser)]
#[command(name = "ovseg", version, about = "Open-vocabulary segmentation: data, training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Plain-text key=value config with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    /// Manifest of precomputed encoder features.
    #[arg(long)]
    precomputed: Option<PathBuf>,
    /// B_L_0, B_L_1 or B_L_2.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test sets of one fold.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory (generated on the fly when omitted).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot evaluation of a checkpoint on a test-fold dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write predicted label maps as PGM.
        #[arg(long)]
        masks: bool,
    },
    /// Segment one BLT0 image against a comma-separated category list.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        categories: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        precomputed: Option<PathBuf>,
    },
    /// Train and evaluate all three ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print (or write) the four category folds.
    Folds {
        /// `pascal` or `synthetic`.
        #[arg(long, default_value = "pascal")]
        universe: String,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-category binary masks and label maps for every image of a dataset.
    ExportMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        precomputed: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = c.fold {
        cfg.fold_index = f;
    }
    if let Some(v) = &c.variant {
        cfg.variant = v.parse::<AblationVariant>()?;
    }
    if let Some(p) = &c.precomputed {
        cfg.encoder.precomputed = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_prediction(dir: &Path, pred: &ovseg_core::seghead::PredictionSet) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (h, w) = (pred.height(), pred.width());
    for (c, name) in pred.categories.iter().enumerate() {
        let px: Vec<u8> = pred.masks.data()[c * h * w..(c + 1) * h * w].iter().map(|&m| if m == 1.0 { 255 } else { 0 }).collect();
        let safe: String = name.chars().map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' }).collect();
        write_pgm(&dir.join(format!("mask_{c}_{safe}.pgm")), w, h, &px)?;
    }
    let labels: Vec<u8> = pred.labels.iter().map(|l| l.map_or(0, |k| (k + 1).min(255) as u8)).collect();
    write_pgm(&dir.join("labels.pgm"), w, h, &labels)?;
    write_atomic(&dir.join("categories.txt"), (pred.categories.join("\n") + "\n").as_bytes())?;
    Ok(())
}

fn checkpoint_model(path: &Path, precomputed: Option<&PathBuf>) -> anyhow::Result<ovseg_core::train::Model> {
    let mut model = load_checkpoint(path)?;
    if let Some(p) = precomputed {
        model.cfg.encoder.precomputed = Some(p.clone());
    }
    Ok(model)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let (train_set, test_set) = fold_datasets(&cfg, cfg.seed, cfg.fold_index)?;
            save_dataset(&train_set, &out.join("train"), None)?;
            save_dataset(&test_set, &out.join("test"), None)?;
            write_atomic(&out.join("config.txt"), cfg.to_text().as_bytes())?;
            export_folds(&train_set.universe, &out.join("folds"))?;
            println!("wrote {} train and {} test images to {}", train_set.samples.len(), test_set.samples.len(), out.display());
        }
        Command::Train { common, data, out } => {
            let cfg = load_config(&common)?;
            let enc = build_encoder(&cfg)?;
            let dataset = match data {
                Some(d) => load_dataset(&d)?,
                None => fold_datasets(&cfg, cfg.seed, cfg.fold_index)?.0,
            };
            let (model, log) = train(&cfg, &enc, &dataset, Some(&out))?;
            println!(
                "trained {} ({} parameters) for {} steps: loss {:.4} -> {:.4}, {:.1}s; checkpoint in {}",
                cfg.variant,
                model.num_parameters(),
                log.step_losses.len(),
                log.step_losses[0],
                log.step_losses.last().copied().unwrap_or(f64::NAN),
                log.wall_clock_secs,
                out.join("checkpoint").display()
            );
        }
        Command::Eval { common, checkpoint, data, out, masks } => {
            let model = checkpoint_model(&checkpoint, common.precomputed.as_ref())?;
            let enc = build_encoder(&model.cfg)?;
            let dataset = load_dataset(&data)?;
            let fold = make_fold(common.fold.unwrap_or(model.cfg.fold_index), &dataset.universe)?;
            let report = evaluate(&model, &enc, &fold, &dataset, &EvalOptions { out, write_masks: masks, workers: None })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict { checkpoint, image, categories, out, precomputed } => {
            let model = checkpoint_model(&checkpoint, precomputed.as_ref())?;
            let enc = build_encoder(&model.cfg)?;
            let pixels = load_tensor(&image)?;
            let cats: Vec<String> = categories.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if cats.is_empty() {
                return Err(Error::EmptyCategory.into());
            }
            let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let pred = predict(&model, &enc, &id, &pixels, &cats)?;
            write_prediction(&out, &pred)?;
            println!("wrote {} masks to {}", cats.len(), out.display());
        }
        Command::Ablate { common, out } => {
            let cfg = load_config(&common)?;
            let enc = build_encoder(&cfg)?;
            let table = run_ablation(&cfg, &enc, out.as_deref())?;
            print!("{}", table.to_text());
        }
        Command::Folds { universe, fold, out } => {
            let u = match universe.as_str() {
                "pascal" => pascal_universe(),
                "synthetic" => synthetic_universe(20)?,
                other => bail!(Error::BadConfig(format!("unknown universe {other:?} (pascal or synthetic)"))),
            };
            if let Some(dir) = out {
                export_folds(&u, &dir)?;
            }
            let folds: Vec<usize> = fold.map_or_else(|| (0..4).collect(), |f| vec![f]);
            for f in folds {
                println!("{}", make_fold(f, &u)?.to_json()?);
            }
        }
        Command::ExportMasks { checkpoint, data, out, precomputed } => {
            let model = checkpoint_model(&checkpoint, precomputed.as_ref())?;
            let enc = build_encoder(&model.cfg)?;
            let dataset = load_dataset(&data)?;
            for s in &dataset.samples {
                let pred = predict(&model, &enc, &s.id, &s.image, &s.categories)?;
                write_prediction(&out.join(&s.id), &pred)?;
            }
            println!("wrote masks for {} images to {}", dataset.samples.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
