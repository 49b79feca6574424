//! Training, zero-shot evaluation and prediction.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::data::folds::{make_fold, FoldSpec};
use crate::data::metrics::{FoldReport, IouAccumulator, LabelMap};
use crate::data::sample::{Dataset, SegmentationSample};
use crate::data::synthetic::gen_synthetic;
use crate::encoders::{FrozenEncoder, ImageRef};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_pgm};
use crate::seghead::{predict_masks, PredictionSet, ThresholdCalibrator};
use crate::tensor::Tensor;
use crate::train::config::{ExperimentConfig, QueryMode};
use crate::train::model::{save_checkpoint, FeatureCache, Model};
use crate::train::optim::Adam;

pub const WORKERS_ENV: &str = "BL_NUM_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    /// Batch-mean loss after every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Pooled mIoU of the in-flight predictions over each epoch.
    pub epoch_train_miou: Vec<f64>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    /// Every category name embedded by the text encoder during training.
    pub embedded_categories: Vec<String>,
    /// Parameter names the optimizer updated.
    pub trainable: Vec<String>,
    pub threshold: f64,
}

impl TrainLog {
    /// Loss log in a form that compares bit for bit.
    pub fn loss_text(&self) -> String {
        self.step_losses.iter().map(|l| format!("{:016x} {l:.17e}\n", l.to_bits())).collect()
    }
}

/// Training set and zero-shot test set of one fold, generated from `seed`.
pub fn fold_datasets(cfg: &ExperimentConfig, seed: u64, fold_index: usize) -> Result<(Dataset, Dataset)> {
    let universe = crate::data::synthetic::synthetic_universe(cfg.data.universe_size)?;
    let fold = make_fold(fold_index, &universe)?;
    let index = |names: &[String]| -> Vec<usize> {
        names.iter().map(|n| universe.iter().position(|u| u == n).expect("fold names come from the universe")).collect()
    };
    let mut train_cfg = cfg.synthetic(true);
    train_cfg.allowed = Some(index(&fold.train_categories));
    let mut test_cfg = cfg.synthetic(false);
    test_cfg.allowed = Some(index(&fold.test_categories));
    let base = seed.wrapping_mul(0x9E37_79B9).wrapping_add(fold_index as u64 * 7919);
    Ok((gen_synthetic(base, &train_cfg)?, gen_synthetic(base.wrapping_add(1), &test_cfg)?))
}

/// Zero-shot audit: no test-fold category may reach training.
pub fn audit_training_stream(dataset: &Dataset, fold: &FoldSpec) -> Result<()> {
    for s in &dataset.samples {
        if let Some(c) = s.categories.iter().find(|c| fold.is_test(c)) {
            return Err(Error::LeakedTestCategory(c.clone()));
        }
    }
    Ok(())
}

fn query_categories(mode: QueryMode, sample: &SegmentationSample, split: &[String]) -> Vec<String> {
    match mode {
        QueryMode::Observed => sample.categories.clone(),
        QueryMode::Fold => split.to_vec(),
    }
}

/// `[C, H, W]` binary targets for `query` from the sample's one-hot mask.
fn targets(sample: &SegmentationSample, query: &[String]) -> Vec<f64> {
    let hw = sample.height() * sample.width();
    let mut out = vec![0.0; query.len() * hw];
    for (c, name) in query.iter().enumerate() {
        if let Some(k) = sample.categories.iter().position(|s| s == name) {
            for (px, v) in sample.channel(k).into_iter().enumerate() {
                if v {
                    out[c * hw + px] = 1.0;
                }
            }
        }
    }
    out
}

fn label_map_of(pred: &PredictionSet, ids: &[u32]) -> LabelMap {
    LabelMap {
        height: pred.height(),
        width: pred.width(),
        labels: pred.labels.iter().map(|l| l.map_or(0, |k| ids[k])).collect(),
    }
}

fn class_ids(dataset: &Dataset, names: &[String]) -> Result<Vec<u32>> {
    names
        .iter()
        .map(|n| dataset.category_id(n).ok_or_else(|| Error::CategoryMismatch(format!("{n:?} not in the dataset universe"))))
        .collect()
}

fn check_widths(model: &Model, enc: &FrozenEncoder) -> Result<()> {
    if model.fusion.d_visual() != enc.d_visual() || model.fusion.d_text() != enc.d_text() {
        return Err(Error::ConfigMismatch(format!(
            "model expects encoder widths {}/{}, encoder gives {}/{}",
            model.fusion.d_visual(),
            model.fusion.d_text(),
            enc.d_visual(),
            enc.d_text()
        )));
    }
    Ok(())
}

/// Trains fusion, decoder and (learned-position variant) the position
/// table on `dataset`; the encoder stays frozen. Writes a checkpoint,
/// `train_log.json` and `losses.txt` under `out` when given.
pub fn train(cfg: &ExperimentConfig, enc: &FrozenEncoder, dataset: &Dataset, out: Option<&Path>) -> Result<(Model, TrainLog)> {
    let started = Instant::now();
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset.validate()?;
    let fold = make_fold(cfg.fold_index, &dataset.universe)?;
    audit_training_stream(dataset, &fold)?;
    let mut model = Model::new(cfg)?;
    check_widths(&model, enc)?;
    let checksum_before = enc.checksum();
    let trainable = model.trainable_names();
    let cache = FeatureCache::default();
    let classes = class_ids(dataset, &fold.train_categories)?;
    let class_list: Vec<(u32, &str)> = classes.iter().copied().zip(fold.train_categories.iter().map(String::as_str)).collect();
    let mut opt = Adam::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_7EA1);
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    let inv_tau = 1.0 / cfg.decoder.tau;
    let mut log = TrainLog {
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        epoch_train_miou: Vec::new(),
        wall_clock_secs: 0.0,
        checkpoint: None,
        encoder_checksum_before: checksum_before.clone(),
        encoder_checksum_after: String::new(),
        embedded_categories: Vec::new(),
        trainable: trainable.iter().cloned().collect(),
        threshold: cfg.decoder.default_threshold,
    };
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = IouAccumulator::new(&class_list);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grads();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &dataset.samples[i];
                let query = query_categories(cfg.query, s, &fold.train_categories);
                let mut g = Graph::new();
                let image = ImageRef { id: &s.id, pixels: &s.image };
                let fwd = model.forward(&mut g, enc, &cache, image, &query)?;
                let loss = g.bce_with_logits(fwd.logits, &targets(s, &query), inv_tau)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::DivergedLoss { step: log.step_losses.len() });
                }
                batch_loss += value;
                let pred = predict_masks(g.value(fwd.logits), &model.cfg.decoder, &query)?;
                acc.add(&label_map_of(&pred, &class_ids(dataset, &query)?), &dataset.label_map(s)?)?;
                let grads = g.backward(loss)?;
                let touched: BTreeSet<String> = grads.params().map(|(n, _)| n.to_string()).collect();
                if touched != trainable {
                    return Err(Error::ConfigMismatch(format!(
                        "optimizer parameter set drifted: got {touched:?}, expected {trainable:?}"
                    )));
                }
                grads.accumulate_into(&mut model.fusion.params)?;
                grads.accumulate_into(&mut model.decoder.params)?;
                grads.accumulate_into(&mut model.positions)?;
            }
            let scale = 1.0 / batch.len() as f64;
            opt.begin_step();
            for name in &trainable {
                let p = model.param_mut(name).expect("trainable names come from the model");
                opt.update(name, p, scale);
                if !p.is_finite() {
                    return Err(Error::DivergedLoss { step: log.step_losses.len() });
                }
            }
            let mean = batch_loss * scale;
            log.step_losses.push(mean);
            epoch_loss += batch_loss;
        }
        log.epoch_losses.push(epoch_loss / dataset.samples.len() as f64);
        log.epoch_train_miou.push(acc.report()?.miou);
    }
    model.zero_grads();
    if cfg.calibrate {
        let mut cal = ThresholdCalibrator::default();
        for s in &dataset.samples {
            let query = query_categories(cfg.query, s, &fold.train_categories);
            let logits = model.logits(enc, &cache, ImageRef { id: &s.id, pixels: &s.image }, &query)?;
            let probs: Vec<f64> = logits.data().iter().map(|&z| crate::seghead::sigmoid(z * inv_tau)).collect();
            let truth: Vec<bool> = targets(s, &query).iter().map(|&t| t == 1.0).collect();
            cal.observe("*", &probs, &truth);
        }
        let t = cal.best()["*"];
        model.cfg.decoder.default_threshold = t;
        model.decoder.cfg.default_threshold = t;
        log.threshold = t;
    }
    log.embedded_categories = cache.embedded_categories().into_iter().collect();
    if let Some(c) = log.embedded_categories.iter().find(|c| fold.is_test(c)) {
        return Err(Error::LeakedTestCategory(c.clone()));
    }
    log.encoder_checksum_after = enc.checksum();
    if log.encoder_checksum_after != checksum_before {
        return Err(Error::ConfigMismatch("frozen encoder weights changed during training".into()));
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out {
        let ckpt = dir.join("checkpoint");
        save_checkpoint(&model, &ckpt)?;
        log.checkpoint = Some(ckpt);
        write_atomic(&dir.join("losses.txt"), log.loss_text().as_bytes())?;
        write_atomic(&dir.join("train_log.json"), serde_json::to_string_pretty(&log)?.as_bytes())?;
    }
    Ok((model, log))
}

/// Worker count: the requested number (or the machine's parallelism),
/// capped by `BL_NUM_WORKERS` when set.
pub fn worker_count(requested: Option<usize>) -> usize {
    let base = requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cap = std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    cap.map_or(base, |c| base.min(c)).max(1)
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Directory for `metrics.jsonl` (and `masks/` when `write_masks`).
    pub out: Option<PathBuf>,
    pub write_masks: bool,
    pub workers: Option<usize>,
}

struct ImageResult {
    id: String,
    pred: LabelMap,
    acc: IouAccumulator,
}

/// Zero-shot evaluation of `model` on a dataset of test-fold categories.
pub fn evaluate(model: &Model, enc: &FrozenEncoder, fold: &FoldSpec, dataset: &Dataset, opts: &EvalOptions) -> Result<FoldReport> {
    check_widths(model, enc)?;
    if dataset.samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    for c in dataset.observed_categories() {
        if !fold.is_test(&c) {
            return Err(Error::CategoryMismatch(format!("{c:?} is not a test category of fold {}", fold.fold_index)));
        }
    }
    let ids = class_ids(dataset, &fold.test_categories)?;
    let classes: Vec<(u32, &str)> = ids.iter().copied().zip(fold.test_categories.iter().map(String::as_str)).collect();
    let cache = FeatureCache::default();
    let run = |s: &SegmentationSample| -> Result<ImageResult> {
        let query = query_categories(model.cfg.query, s, &fold.test_categories);
        let logits = model.logits(enc, &cache, ImageRef { id: &s.id, pixels: &s.image }, &query)?;
        let pred = predict_masks(&logits, &model.cfg.decoder, &query)?;
        let pred = label_map_of(&pred, &class_ids(dataset, &query)?);
        let mut acc = IouAccumulator::new(&classes);
        acc.add(&pred, &dataset.label_map(s)?)?;
        Ok(ImageResult { id: s.id.clone(), pred, acc })
    };
    let workers = worker_count(opts.workers).min(dataset.samples.len());
    let chunk = dataset.samples.len().div_ceil(workers);
    let results: Vec<ImageResult> = if workers == 1 {
        dataset.samples.iter().map(run).collect::<Result<_>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = dataset
                .samples
                .chunks(chunk)
                .map(|part| scope.spawn(|| part.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(dataset.samples.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let mut total = IouAccumulator::new(&classes);
    for r in &results {
        total.merge(&r.acc)?;
    }
    let report = total.report()?;
    if let Some(dir) = &opts.out {
        write_eval_outputs(dir, fold, &results, &report, opts.write_masks)?;
    }
    Ok(report)
}

fn write_eval_outputs(dir: &Path, fold: &FoldSpec, results: &[ImageResult], report: &FoldReport, masks: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = Vec::new();
    for r in results {
        let counts: serde_json::Map<String, serde_json::Value> =
            r.acc.counts().map(|(n, c)| (n.to_string(), serde_json::json!({"tp": c.tp, "fp": c.fp, "fn": c.fn_}))).collect();
        lines.push(serde_json::json!({"id": r.id, "counts": counts}).to_string());
    }
    lines.push(
        serde_json::json!({
            "fold": fold.fold_index,
            "miou": report.miou,
            "per_class_iou": report.per_class_iou,
            "absent_classes": report.absent_classes,
        })
        .to_string(),
    );
    let path = dir.join("metrics.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&path, e))?;
    }
    if masks {
        let mdir = dir.join("masks");
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        for r in results {
            let px: Vec<u8> = r.pred.labels.iter().map(|&l| l.min(255) as u8).collect();
            write_pgm(&mdir.join(format!("{}.pgm", r.id)), r.pred.width, r.pred.height, &px)?;
        }
    }
    Ok(())
}

/// Per-category probabilities, masks and labels for one image.
pub fn predict(model: &Model, enc: &FrozenEncoder, id: &str, image: &Tensor, categories: &[String]) -> Result<PredictionSet> {
    check_widths(model, enc)?;
    let cache = FeatureCache::default();
    let logits = model.logits(enc, &cache, ImageRef { id, pixels: image }, categories)?;
    predict_masks(&logits, &model.cfg.decoder, categories)
}
