//! Training loop, evaluation and hyperparameter sweeps.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::{batch_gradients, Model};
use super::optim::Optimizer;
use crate::autograd::Tape;
use crate::data::{derive_seed, preprocess, Dataset};
use crate::error::{Error, Result};
use crate::localize::{self, BoxOptions, ImageBox, LocalizationReport, IOU_THRESHOLDS};
use crate::metrics::{classification_report, ClassificationReport};
use crate::nn::Mode;
use crate::params::apply_bn_updates;
use crate::tensor::Tensor;
use crate::wsl::{self, class_weights, ClassScores, Heatmap};

// Stream tags for derived seeds.
const SHUFFLE: u64 = 1;
const CROP: u64 = 2;
const BATCH: u64 = 3;

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub macro_auroc: Option<f64>,
}

/// `epoch,split,loss,macro_auroc`; undefined AUROC is written as `nan`.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,split,loss,macro_auroc\n");
    for r in rows {
        let auc = r.macro_auroc.map_or_else(|| "nan".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{},{},{},{auc}", r.epoch, r.split, r.loss);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation macro AUROC, ties
    /// broken by validation loss (the last epoch when no validation AUROC
    /// is defined).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
    /// Per class, the epoch with the best validation AUROC and its value.
    pub per_class_best: Vec<Option<(usize, f64)>>,
}

fn labels_tensor(data: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let c = data.class_names.len();
    let mut v = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        v.extend(data.samples[i].labels.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Tensor::new(&[indices.len(), c], v)
}

/// Preprocessed batch: center crops, or per-sample random crops seeded from
/// `(seed, sample, epoch)`.
fn input_batch(cfg: &TrainConfig, data: &Dataset, indices: &[usize], train_epoch: Option<usize>) -> Result<Tensor> {
    let p = &cfg.preprocess;
    let items = crate::par::map_slice(indices, |&i| {
        let offset = match train_epoch {
            Some(e) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ CROP, i as u64, e as u64));
                p.random_offset(&mut rng)
            }
            None => p.center_offset(),
        };
        preprocess(&data.samples[i].image, p, offset)
    });
    let items: Vec<Tensor> = items.into_iter().collect::<Result<_>>()?;
    Tensor::stack(&items)
}

fn check_dataset(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.class_names != cfg.head.class_names {
        return Err(Error::Config(format!(
            "dataset classes [{}] differ from head.classes [{}]",
            data.class_names.join(", "),
            cfg.head.class_names.join(", ")
        )));
    }
    Ok(())
}

/// Raw eval-mode heatmaps of every sample, in dataset order.
pub fn compute_heatmaps(model: &Model, data: &Dataset) -> Result<Heatmap> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in all.chunks(EVAL_BATCH) {
        let x = input_batch(&model.config, data, chunk, None)?;
        parts.push(model.heatmaps(&x)?);
    }
    let (_, c, h, w) = parts.first().map(Heatmap::dims).unwrap_or((0, data.class_names.len(), 0, 0));
    let data: Vec<f64> = parts.iter().flat_map(|p| p.tensor().data().iter().copied()).collect();
    let n = data.len() / (c * h * w).max(1);
    Ok(Heatmap(Tensor::new(&[n, c, h, w], data)?))
}

/// Validation loss (test-time pooling, same class weights) and AUROC report.
fn validate(model: &Model, data: &Dataset, weights: (&[f64], &[f64])) -> Result<(f64, ClassificationReport)> {
    let heat = compute_heatmaps(model, data)?;
    let logits = model.test_logits(&heat);
    let all: Vec<usize> = (0..data.len()).collect();
    let y = labels_tensor(data, &all)?;
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = wsl::weighted_bce(&mut tape, z, &y, weights.0, weights.1)?;
    let loss = tape.value(loss).data()[0];
    let probs = ClassScores::from_logits(logits).probabilities;
    Ok((loss, classification_report(&probs, &y, &data.class_names)?))
}

/// Trains on `train`, validating on `val` after every epoch (skipped when
/// `val` is empty).
pub fn train(cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, train, val, |_| {})
}

/// [`train`] with a callback after every log row.
pub fn train_with(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(cfg, train)?;
    if !val.is_empty() {
        check_dataset(cfg, val)?;
    }
    if train.len() < 2 {
        return Err(Error::invalid("train", "need at least 2 training samples"));
    }
    let mut model = Model::new(cfg)?;
    let all: Vec<usize> = (0..train.len()).collect();
    let (w_plus, w_minus) = class_weights(&labels_tensor(train, &all)?, cfg.class_weights)?;
    log::info!("{}", cfg.run_header().trim_end());
    log::info!("class weights w+ {w_plus:?} w- {w_minus:?}");
    let mut opt = Optimizer::new(cfg.optimizer, cfg.momentum, cfg.l2, model.store.len());
    let mut log_rows = Vec::new();
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    let mut per_class_best: Vec<Option<(usize, f64)>> = vec![None; cfg.head.num_classes()];

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = all.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ SHUFFLE, epoch as u64, 0)));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut logit_rows = Vec::new();
        let mut seen_idx = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                log::debug!("epoch {epoch}: skipping a trailing batch of one sample");
                continue;
            }
            let x = input_batch(cfg, train, batch, Some(epoch))?;
            let y = labels_tensor(train, batch)?;
            let seed = derive_seed(cfg.seed ^ BATCH, epoch as u64, b as u64);
            let res = batch_gradients(&model, &x, &y, (&w_plus, &w_minus), Mode::Train, cfg.workers, seed)?;
            if !res.loss.is_finite() || res.grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            opt.step(&mut model.store, &res.grads, lr);
            apply_bn_updates(&mut model.store, &res.bn_updates);
            loss_sum += res.loss * batch.len() as f64;
            seen += batch.len();
            logit_rows.extend_from_slice(res.logits.data());
            seen_idx.extend_from_slice(batch);
        }
        let c = cfg.head.num_classes();
        let train_scores = Tensor::new(&[seen_idx.len(), c], logit_rows)?;
        let train_auc = classification_report(&train_scores, &labels_tensor(train, &seen_idx)?, &train.class_names)?;
        let row = LogRow { epoch, split: "train", loss: loss_sum / seen.max(1) as f64, macro_auroc: train_auc.macro_auroc };
        on_row(&row);
        log_rows.push(row);

        if !val.is_empty() {
            let (val_loss, report) = validate(&model, val, (&w_plus, &w_minus))?;
            let row = LogRow { epoch, split: "val", loss: val_loss, macro_auroc: report.macro_auroc };
            on_row(&row);
            log_rows.push(row);
            for (slot, auc) in per_class_best.iter_mut().zip(&report.auroc) {
                if let Some(a) = *auc {
                    if slot.is_none_or(|(_, b)| a > b) {
                        *slot = Some((epoch, a));
                    }
                }
            }
            if let Some(m) = report.macro_auroc {
                // Ties in AUROC, common once validation is separable, go to
                // the lower validation loss.
                let better = best.as_ref().is_none_or(|(b, l, _)| m > *b || (m == *b && val_loss < *l));
                if better {
                    best = Some((m, val_loss, model.checkpoint(epoch as u64)));
                }
            }
        }
    }
    let last = model.checkpoint(cfg.epochs.saturating_sub(1) as u64);
    Ok(TrainOutcome {
        best: best.map_or_else(|| last.clone(), |(_, _, ck)| ck),
        last,
        log: log_rows,
        per_class_best,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Per-class box thresholds; defaults to 0.8 for Cardiomegaly and 0.9
    /// for the rest.
    pub thresholds: Option<Vec<f64>>,
    pub min_area: usize,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub classification: ClassificationReport,
    /// `None` when the dataset has no box annotations.
    pub localization: Option<LocalizationReport>,
    pub scores: ClassScores,
    /// Min-max normalized heatmaps.
    pub heatmaps: Heatmap,
    pub boxes: Vec<ImageBox>,
}

impl Evaluation {
    pub fn to_text(&self, header: &str) -> String {
        let mut out = String::new();
        for line in header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("\nClassification (AUROC)\n");
        out.push_str(&self.classification.to_text());
        out.push_str("\nLocalization\n");
        match &self.localization {
            Some(r) => out.push_str(&r.to_text()),
            None => out.push_str("n/a (no ground-truth boxes)\n"),
        }
        out
    }
}

/// Scores, reports and boxes from precomputed raw heatmaps.
pub fn evaluate_heatmaps(cfg: &TrainConfig, data: &Dataset, raw: &Heatmap, opts: &EvalOptions) -> Result<Evaluation> {
    let h = &cfg.head;
    let logits = wsl::spatial_pool_test_values(raw, h.k_plus_test, h.k_minus_test, h.alpha);
    let scores = ClassScores::from_logits(logits);
    let all: Vec<usize> = (0..data.len()).collect();
    let y = labels_tensor(data, &all)?;
    let classification = classification_report(&scores.probabilities, &y, &data.class_names)?;

    let heatmaps = localize::normalize_heatmap(raw);
    let thresholds = opts.thresholds.clone().unwrap_or_else(|| localize::default_thresholds(&data.class_names));
    let box_opts = BoxOptions { thresholds, min_area: opts.min_area };
    let crop = cfg.preprocess.crop;
    let per_image = localize::heatmap_to_boxes(&heatmaps, (crop, crop), &box_opts)?;
    let boxes: Vec<ImageBox> = per_image
        .into_iter()
        .zip(&data.samples)
        .flat_map(|(bs, s)| bs.into_iter().map(|bbox| ImageBox { image_id: s.image_id.clone(), bbox }))
        .collect();

    let localization = if data.has_boxes {
        let offset = cfg.preprocess.center_offset();
        let gt: Vec<ImageBox> = data
            .samples
            .iter()
            .flat_map(|s| {
                let orig = (s.image.height, s.image.width);
                s.boxes.iter().filter_map(move |b| {
                    cfg.preprocess
                        .map_box(b, orig, offset)
                        .map(|bbox| ImageBox { image_id: s.image_id.clone(), bbox })
                })
            })
            .collect();
        Some(localize::score_localization(&boxes, &gt, &data.class_names, &IOU_THRESHOLDS)?)
    } else {
        None
    };
    Ok(Evaluation { classification, localization, scores, heatmaps, boxes })
}

/// Evaluates a checkpoint under `cfg`, whose architecture must match the
/// checkpoint's; test-time pooling and preprocessing come from `cfg`.
pub fn evaluate(ck: &Checkpoint, cfg: &TrainConfig, data: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    ck.check_matches(cfg)?;
    check_dataset(cfg, data)?;
    let mut model = Model::from_checkpoint(ck)?;
    model.config.preprocess = cfg.preprocess.clone();
    model.set_test_pooling(cfg.head.k_plus_test, cfg.head.k_minus_test, cfg.head.alpha);
    let raw = compute_heatmaps(&model, data)?;
    evaluate_heatmaps(&model.config, data, &raw, opts)
}

/// Inclusive bounds of the sweepable settings.
pub const M_RANGE: (usize, usize) = (2, 18);
pub const K_PLUS_RANGE: (usize, usize) = (1, 20);
pub const K_MINUS_RANGE: (usize, usize) = (1, 25);
pub const ALPHA_RANGE: (f64, f64) = (0.25, 1.0);

/// Values to try per setting; an empty list keeps the base value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepGrid {
    pub m: Vec<usize>,
    pub k_plus_train: Vec<usize>,
    pub k_plus_test: Vec<usize>,
    pub k_minus_test: Vec<usize>,
    pub alpha: Vec<f64>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
            && self.k_plus_train.is_empty()
            && self.k_plus_test.is_empty()
            && self.k_minus_test.is_empty()
            && self.alpha.is_empty()
    }

    fn retrains(&self) -> bool {
        !self.m.is_empty() || !self.k_plus_train.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub m: usize,
    pub k_plus_train: usize,
    pub k_plus_test: usize,
    pub k_minus_test: usize,
    pub alpha: f64,
    pub macro_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub training_runs: usize,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,k_plus_train,k_plus_test,k_minus_test,alpha,macro_auroc\n");
        for r in &self.rows {
            let auc = r.macro_auroc.map_or_else(|| "nan".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{auc}",
                r.m, r.k_plus_train, r.k_plus_test, r.k_minus_test, r.alpha
            );
        }
        out
    }
}

fn or_base<T: Copy>(list: &[T], base: T) -> Vec<T> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

fn in_range<T: PartialOrd + std::fmt::Display>(name: &str, v: T, (lo, hi): (T, T)) -> bool {
    let ok = v >= lo && v <= hi;
    if !ok {
        log::warn!("sweep: skipping {name}={v} outside [{lo}, {hi}]");
    }
    ok
}

/// Evaluates every grid point on `test`. Test-time settings are applied to
/// cached heatmaps of one trained model; each train-time point (`M`,
/// `k+` of training) trains a new model. Without train-time lists the
/// given checkpoint is used, or one model is trained when none is given.
pub fn sweep(
    base: &TrainConfig,
    checkpoint: Option<&Checkpoint>,
    grid: &SweepGrid,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut train_points = Vec::new();
    for m in or_base(&grid.m, base.head.m) {
        for kt in or_base(&grid.k_plus_train, base.head.k_plus_train) {
            if in_range("m", m, M_RANGE) && in_range("k_plus_train", kt, K_PLUS_RANGE) {
                train_points.push((m, kt));
            }
        }
    }
    let mut test_points = Vec::new();
    for kp in or_base(&grid.k_plus_test, base.head.k_plus_test) {
        for km in or_base(&grid.k_minus_test, base.head.k_minus_test) {
            for a in or_base(&grid.alpha, base.head.alpha) {
                if in_range("k_plus_test", kp, K_PLUS_RANGE)
                    && in_range("k_minus_test", km, K_MINUS_RANGE)
                    && in_range("alpha", a, ALPHA_RANGE)
                {
                    test_points.push((kp, km, a));
                }
            }
        }
    }

    let mut rows = Vec::new();
    let mut training_runs = 0;
    for (m, kt) in train_points {
        let ck = match checkpoint {
            Some(ck) if !grid.retrains() => {
                ck.check_matches(base)?;
                ck.clone()
            }
            _ => {
                let mut cfg = base.clone();
                cfg.head.m = m;
                cfg.head.k_plus_train = kt;
                log::info!("sweep: training with M={m}, k_plus_train={kt}");
                training_runs += 1;
                train(&cfg, train_set, val_set)?.best
            }
        };
        let mut model = Model::from_checkpoint(&ck)?;
        model.config.preprocess = base.preprocess.clone();
        let raw = compute_heatmaps(&model, test_set)?;
        let all: Vec<usize> = (0..test_set.len()).collect();
        let y = labels_tensor(test_set, &all)?;
        for &(kp, km, a) in &test_points {
            let logits = wsl::spatial_pool_test_values(&raw, kp, km, a);
            let probs = ClassScores::from_logits(logits).probabilities;
            let report = classification_report(&probs, &y, &test_set.class_names)?;
            rows.push(SweepRow {
                m: ck.config.head.m,
                k_plus_train: ck.config.head.k_plus_train,
                k_plus_test: kp,
                k_minus_test: km,
                alpha: a,
                macro_auroc: report.macro_auroc,
            });
        }
    }
    Ok(SweepResult { rows, training_runs })
}
