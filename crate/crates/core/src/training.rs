//! Training recipes: baseline classification, the three-stage multi-task
//! schedule, MoCo and inpainting pre-training, fine-tuning, k-fold runs and
//! the pairwise binary ablation.
//!
//! Every random draw (initialization, batch order, augmentation, dropout,
//! masks, queue) comes from a stream keyed by the run seed and the step it
//! serves, so a recipe re-run with the same config reproduces its checkpoints
//! bit for bit.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{boxes_to_mask, make_kfolds, make_split, write_grayscale8, ClassLabel, ImageRecord};
use crate::error::{Error, Result};
use crate::evaluation::{
    binary_report, class_names, kfold_summary, metrics_indexed, BinaryReport, ClassPair, KFoldSummary,
    MetricsReport,
};
use crate::losses::{dice_wce, info_nce, masked_mse, weighted_cross_entropy, CompoundLossConfig};
use crate::models::{
    build_backbone, load_encoder, save_checkpoint, transfer_encoder, BackboneConfig, CheckpointMeta, CheckpointRef,
    Classifier, ContrastiveEncoder, EncoderDecoder, MomentumPair, Stage, NUM_CLASSES,
};
use crate::nn::layers::stack_images;
use crate::nn::{Adam, Mode, Parameterized};
use crate::pretext::{make_inpaint_sample, sample_masks, FillMode, InpaintConfig, MocoConfig};
use crate::rng::{name_hash, stream_rng};
use crate::scalar::Scalar;
use crate::transforms::{apply_augment, moco_aug_pipeline, AugPolicy, PreprocConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Recipe {
    Baseline,
    Multitask,
    MocoPretrain,
    InpaintPretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum OptimizerKind {
    Adam,
}

/// Per-stage overrides of the multi-task schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct MultitaskConfig {
    /// Start stage 2 from a randomly initialized encoder.
    pub skip_stage1: bool,
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub stage3_epochs: Option<usize>,
}

impl Default for MultitaskConfig {
    fn default() -> Self {
        Self {
            skip_stage1: false,
            stage1_epochs: None,
            stage2_epochs: None,
            stage3_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct TrainConfig {
    pub recipe: Recipe,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub lr_min: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Stratified fraction of the training records held out for per-epoch metrics.
    pub val_fraction: f64,
    /// Compound objective of the final multi-task stage.
    pub loss_cfg: CompoundLossConfig,
    pub multitask: MultitaskConfig,
}

impl Default for TrainConfig {
    /// Full-scale values: Adam at 1e-3, 30 epochs, batch 16.
    fn default() -> Self {
        Self {
            recipe: Recipe::Baseline,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            schedule: Schedule::Constant,
            lr_min: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            val_fraction: 0.1,
            loss_cfg: CompoundLossConfig::default(),
            multitask: MultitaskConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batchSize must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(Error::Config(format!(
                "need 0 <= lrMin <= lr, got lr={} lrMin={}",
                self.lr, self.lr_min
            )));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!("valFraction {} not in [0, 0.5)", self.val_fraction)));
        }
        self.loss_cfg.validate()
    }

    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => cosine_anneal_lr(epoch, total, self.lr, self.lr_min),
        }
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/total))`.
pub fn cosine_anneal_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let t = epoch.min(total) as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

/// Where and how a recipe writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunEnv {
    pub out_dir: PathBuf,
    pub preproc: PreprocConfig,
    pub augment: AugPolicy,
    pub backbone: BackboneConfig,
    /// Hash of the resolved experiment config, stamped into checkpoints.
    pub experiment_hash: Option<String>,
}

impl RunEnv {
    pub fn new(out_dir: impl Into<PathBuf>, preproc: PreprocConfig, augment: AugPolicy, backbone: BackboneConfig) -> Self {
        Self {
            out_dir: out_dir.into(),
            preproc,
            augment,
            backbone,
            experiment_hash: None,
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.jsonl")
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        let name = serde_json::to_value(stage)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| "checkpoint".into());
        self.out_dir.join(format!("{name}.safetensors"))
    }

    fn meta<T: Scalar>(&self, stage: Stage, epoch: usize, num_classes: Option<usize>) -> CheckpointMeta {
        let mut meta = CheckpointMeta::new::<T>(&self.backbone, stage, epoch, num_classes);
        meta.experiment_hash = self.experiment_hash.clone();
        meta
    }
}

struct Logger {
    file: File,
    path: PathBuf,
    history: Vec<EpochLog>,
}

impl Logger {
    fn open(env: &RunEnv) -> Result<Self> {
        std::fs::create_dir_all(&env.out_dir).map_err(|e| Error::io(&env.out_dir, e))?;
        let path = env.log_path();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file,
            path,
            history: Vec::new(),
        })
    }

    fn write(&mut self, entry: EpochLog) -> Result<()> {
        let line = serde_json::to_string(&entry)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        info!("{line}");
        self.history.push(entry);
        Ok(())
    }
}

/// A preprocessed image with its class and rasterized opacity mask.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub id: String,
    pub image: Array2<T>,
    pub label: ClassLabel,
    pub mask: Array2<T>,
}

pub fn prepare<T: Scalar>(records: &[ImageRecord], preproc: &PreprocConfig) -> Result<Vec<Sample<T>>> {
    records
        .iter()
        .map(|r| {
            let image = preproc.apply::<T>(&r.pixels)?;
            let mask = boxes_to_mask(r, image.dim()).mapv(|v| if v > 0 { T::one() } else { T::zero() });
            Ok(Sample {
                id: r.id.clone(),
                image,
                label: r.label,
                mask,
            })
        })
        .collect()
}

fn stream(tag: &str) -> u64 {
    name_hash(tag)
}

fn epoch_batches(n: usize, batch_size: usize, seed: u64, tag: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, &[stream(tag), stream("shuffle"), epoch as u64]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_finite<T: Scalar>(value: T, stage: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{stage}: loss became {value} at epoch {epoch}, step {step}; lower the learning rate"
        )))
    }
}

/// Augmented (N, 1, H, W) images and masks for the given sample indices.
fn augmented_batch<T: Scalar>(
    samples: &[Sample<T>],
    idx: &[usize],
    policy: &AugPolicy,
    seed: u64,
    tag: &str,
    epoch: usize,
    with_masks: bool,
) -> (Array4<T>, Option<Array4<T>>) {
    let mut imgs = Vec::with_capacity(idx.len());
    let mut masks = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut rng = stream_rng(seed, &[stream(tag), stream("augment"), policy.seed_stream, epoch as u64, i as u64]);
        let s = &samples[i];
        let (img, m) = apply_augment(s.image.view(), with_masks.then(|| s.mask.view()), policy, &mut rng);
        imgs.push(img);
        if let Some(m) = m {
            masks.push(m);
        }
    }
    let x = stack_images(&imgs.iter().collect::<Vec<_>>());
    let m = with_masks.then(|| stack_images(&masks.iter().collect::<Vec<_>>()));
    (x, m)
}

fn argmax_rows<T: Scalar>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

const EVAL_BATCH: usize = 32;

/// Predicted class indices for every sample (evaluation mode, no augmentation).
pub fn predict<T: Scalar>(model: &mut Classifier<T>, samples: &[Sample<T>]) -> Vec<usize> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>());
        preds.extend(argmax_rows(&model.forward(&x, &mut Mode::eval())));
    }
    preds
}

pub fn predict_multitask<T: Scalar>(model: &mut EncoderDecoder<T>, samples: &[Sample<T>]) -> Vec<usize> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>());
        preds.extend(argmax_rows(&model.forward(&x, &mut Mode::eval()).class_logits));
    }
    preds
}

/// Four-class metrics of a classifier on `samples`.
pub fn evaluate<T: Scalar>(model: &mut Classifier<T>, samples: &[Sample<T>]) -> Result<MetricsReport> {
    let preds = predict(model, samples);
    let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    metrics_indexed(&preds, &labels, &class_names())
}

pub fn evaluate_multitask<T: Scalar>(model: &mut EncoderDecoder<T>, samples: &[Sample<T>]) -> Result<MetricsReport> {
    let preds = predict_multitask(model, samples);
    let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    metrics_indexed(&preds, &labels, &class_names())
}

/// Split training records into (fit, validation) with a stratified holdout.
fn holdout(records: &[ImageRecord], frac: f64, seed: u64) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    if frac <= 0.0 || records.len() < 8 {
        return Ok((records.to_vec(), Vec::new()));
    }
    let split = make_split(records, frac, seed ^ 0x5A17)?;
    let (fit, val) = split.partition(records);
    Ok((fit.into_iter().cloned().collect(), val.into_iter().cloned().collect()))
}

fn require_classes(records: &[ImageRecord], what: &str) -> Result<()> {
    let mut seen = [false; NUM_CLASSES];
    for r in records {
        seen[r.label.index()] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Validation(format!("{what} needs examples of at least two classes")));
    }
    Ok(())
}

/// Targets, class names and validation data for a classification fit.
struct ClassTask<'a, T> {
    fit: &'a [Sample<T>],
    fit_targets: Vec<usize>,
    val: &'a [Sample<T>],
    val_targets: Vec<usize>,
    names: Vec<String>,
}

impl<'a, T: Scalar> ClassTask<'a, T> {
    fn four_way(fit: &'a [Sample<T>], val: &'a [Sample<T>]) -> Self {
        Self {
            fit_targets: fit.iter().map(|s| s.label.index()).collect(),
            val_targets: val.iter().map(|s| s.label.index()).collect(),
            fit,
            val,
            names: class_names(),
        }
    }
}

/// Cross-entropy training of a classifier; logs one line per epoch.
fn fit_classifier<T: Scalar>(
    model: &mut Classifier<T>,
    task: &ClassTask<'_, T>,
    cfg: &TrainConfig,
    env: &RunEnv,
    stage: Stage,
    epochs: usize,
    logger: &mut Logger,
) -> Result<()> {
    let tag = format!("{stage:?}");
    let weights = vec![1.0; task.names.len()];
    let mut opt = Adam::new(cfg.lr);
    let mut step = 0;
    for epoch in 0..epochs {
        opt.lr = cfg.lr_at(epoch, epochs);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in epoch_batches(task.fit.len(), cfg.batch_size, cfg.seed, &tag, epoch) {
            let (x, _) = augmented_batch(task.fit, &batch, &env.augment, cfg.seed, &tag, epoch, false);
            let targets: Vec<usize> = batch.iter().map(|&i| task.fit_targets[i]).collect();
            let mut rng = stream_rng(cfg.seed, &[stream(&tag), stream("dropout"), step as u64]);
            let logits = model.forward(&x, &mut Mode::train(&mut rng));
            let (loss, grad) = weighted_cross_entropy(logits.view(), &targets, &weights)?;
            check_finite(loss, &tag, epoch, step)?;
            correct += argmax_rows(&logits).iter().zip(&targets).filter(|(p, t)| p == t).count();
            total += loss.as_f64() * batch.len() as f64;
            model.zero_grad();
            model.backward(&grad);
            opt.step(model);
            step += 1;
        }
        let mut values = BTreeMap::from([
            ("trainLoss".to_string(), total / task.fit.len() as f64),
            ("trainAcc".to_string(), 100.0 * correct as f64 / task.fit.len() as f64),
        ]);
        if !task.val.is_empty() {
            let preds = predict(model, task.val);
            let r = metrics_indexed(&preds, &task.val_targets, &task.names)?;
            values.insert("valF1Macro".into(), r.f1_macro);
            values.insert("valAcc".into(), r.accuracy);
        }
        logger.write(EpochLog {
            stage,
            epoch: epoch + 1,
            lr: opt.lr,
            values,
        })?;
    }
    Ok(())
}

/// A trained model with its final checkpoint and epoch log.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub checkpoint: CheckpointRef,
    pub log: Vec<EpochLog>,
}

/// Baseline 4-way classifier: Adam, cross-entropy, augmentation from `env`.
pub fn train_baseline<T: Scalar>(cfg: &TrainConfig, env: &RunEnv, records: &[ImageRecord]) -> Result<Trained<Classifier<T>>> {
    cfg.validate()?;
    require_classes(records, "baseline training")?;
    let model = Classifier::build(&env.backbone, NUM_CLASSES, cfg.seed)?;
    fit_new_classifier(model, cfg, env, records, Stage::Baseline)
}

fn fit_new_classifier<T: Scalar>(
    mut model: Classifier<T>,
    cfg: &TrainConfig,
    env: &RunEnv,
    records: &[ImageRecord],
    stage: Stage,
) -> Result<Trained<Classifier<T>>> {
    let (fit, val) = holdout(records, cfg.val_fraction, cfg.seed)?;
    let fit = prepare::<T>(&fit, &env.preproc)?;
    let val = prepare::<T>(&val, &env.preproc)?;
    let mut logger = Logger::open(env)?;
    fit_classifier(&mut model, &ClassTask::four_way(&fit, &val), cfg, env, stage, cfg.epochs, &mut logger)?;
    let checkpoint = save_checkpoint(
        &model,
        &env.meta::<T>(stage, cfg.epochs, Some(NUM_CLASSES)),
        &env.checkpoint_path(stage),
    )?;
    Ok(Trained {
        model,
        checkpoint,
        log: logger.history,
    })
}

/// Fresh classifier whose encoder is loaded from `checkpoint`; the head is
/// newly initialized.
pub fn finetune<T: Scalar>(
    cfg: &TrainConfig,
    env: &RunEnv,
    checkpoint: &Path,
    records: &[ImageRecord],
) -> Result<Trained<Classifier<T>>> {
    cfg.validate()?;
    require_classes(records, "fine-tuning")?;
    let mut model = Classifier::<T>::build(&env.backbone, NUM_CLASSES, cfg.seed)?;
    let report = load_encoder(&mut model, &env.backbone, checkpoint)?;
    info!("fine-tune: loaded encoder from {} ({})", checkpoint.display(), report.describe());
    fit_new_classifier(model, cfg, env, records, Stage::Finetune)
}

fn stage_epochs(cfg: &TrainConfig, stage: Option<usize>) -> usize {
    stage.unwrap_or(cfg.epochs).max(1)
}

/// Multi-task training with the classification head on the shared encoder.
fn fit_multitask<T: Scalar>(
    model: &mut EncoderDecoder<T>,
    fit: &[Sample<T>],
    val: &[Sample<T>],
    loss_cfg: &CompoundLossConfig,
    cfg: &TrainConfig,
    env: &RunEnv,
    stage: Stage,
    epochs: usize,
    logger: &mut Logger,
) -> Result<()> {
    loss_cfg.validate()?;
    let tag = format!("{stage:?}");
    let mut opt = Adam::new(cfg.lr);
    let mut step = 0;
    for epoch in 0..epochs {
        opt.lr = cfg.lr_at(epoch, epochs);
        let (mut total, mut ce_sum, mut dice_sum) = (0.0, 0.0, 0.0);
        for batch in epoch_batches(fit.len(), cfg.batch_size, cfg.seed, &tag, epoch) {
            let (x, m) = augmented_batch(fit, &batch, &env.augment, cfg.seed, &tag, epoch, true);
            let m = m.expect("masks requested");
            let targets: Vec<usize> = batch.iter().map(|&i| fit[i].label.index()).collect();
            let mut rng = stream_rng(cfg.seed, &[stream(&tag), stream("dropout"), step as u64]);
            let out = model.forward(&x, &mut Mode::train(&mut rng));
            let loss = dice_wce(out.class_logits.view(), &targets, out.seg_logits.view(), m.view(), loss_cfg)?;
            check_finite(loss.value, &tag, epoch, step)?;
            let n = batch.len() as f64;
            total += loss.value.as_f64() * n;
            ce_sum += loss.ce.as_f64() * n;
            dice_sum += loss.dice.as_f64() * n;
            model.zero_grad();
            model.backward(Some(&loss.grad_class), Some(&loss.grad_seg));
            opt.step(model);
            step += 1;
        }
        let n = fit.len() as f64;
        let mut values = BTreeMap::from([
            ("trainLoss".to_string(), total / n),
            ("ce".to_string(), ce_sum / n),
            ("dice".to_string(), dice_sum / n),
        ]);
        if !val.is_empty() {
            let r = evaluate_multitask(model, val)?;
            values.insert("valF1Macro".into(), r.f1_macro);
            values.insert("valAcc".into(), r.accuracy);
        }
        logger.write(EpochLog {
            stage,
            epoch: epoch + 1,
            lr: opt.lr,
            values,
        })?;
    }
    Ok(())
}

/// Output of the multi-task schedule: the final encoder-decoder and one
/// checkpoint per stage that ran.
#[derive(Debug, Clone)]
pub struct MultitaskRun<T> {
    pub model: EncoderDecoder<T>,
    pub checkpoints: Vec<CheckpointRef>,
    pub log: Vec<EpochLog>,
}

/// Data of the three multi-task stages. At desk scale all three are usually
/// the same phantom training set.
pub struct MultitaskData<'a> {
    pub stage1: &'a [ImageRecord],
    pub stage2: &'a [ImageRecord],
    pub stage3: &'a [ImageRecord],
}

/// Stage 1: classification pre-training of the encoder. Stage 2: encoder
/// transferred by name into the encoder-decoder, trained with equal-weight
/// Dice + CE. Stage 3: fine-tuning with the configured compound weights.
pub fn train_multitask<T: Scalar>(cfg: &TrainConfig, env: &RunEnv, data: &MultitaskData<'_>) -> Result<MultitaskRun<T>> {
    cfg.validate()?;
    let mut logger = Logger::open(env)?;
    let mut checkpoints = Vec::new();
    let mut model = EncoderDecoder::<T>::build(&env.backbone, NUM_CLASSES, cfg.seed)?;

    if !cfg.multitask.skip_stage1 {
        require_classes(data.stage1, "multi-task stage 1")?;
        let epochs = stage_epochs(cfg, cfg.multitask.stage1_epochs);
        let mut clf = Classifier::<T>::build(&env.backbone, NUM_CLASSES, cfg.seed)?;
        let (fit, val) = holdout(data.stage1, cfg.val_fraction, cfg.seed)?;
        let (fit, val) = (prepare::<T>(&fit, &env.preproc)?, prepare::<T>(&val, &env.preproc)?);
        let stage = Stage::MultitaskStage1;
        fit_classifier(&mut clf, &ClassTask::four_way(&fit, &val), cfg, env, stage, epochs, &mut logger)?;
        checkpoints.push(save_checkpoint(
            &clf,
            &env.meta::<T>(stage, epochs, Some(NUM_CLASSES)),
            &env.checkpoint_path(stage),
        )?);
        let report = transfer_encoder(&mut model, &clf.state_dict()).map_err(Error::Compat)?;
        info!("multi-task stage 2 initialized from stage 1: {}", report.describe());
    }

    for (stage, records, loss_cfg, epochs) in [
        (
            Stage::MultitaskStage2,
            data.stage2,
            CompoundLossConfig::equal(NUM_CLASSES),
            stage_epochs(cfg, cfg.multitask.stage2_epochs),
        ),
        (
            Stage::MultitaskStage3,
            data.stage3,
            cfg.loss_cfg.clone(),
            stage_epochs(cfg, cfg.multitask.stage3_epochs),
        ),
    ] {
        require_classes(records, "multi-task training")?;
        let (fit, val) = holdout(records, cfg.val_fraction, cfg.seed)?;
        let (fit, val) = (prepare::<T>(&fit, &env.preproc)?, prepare::<T>(&val, &env.preproc)?);
        fit_multitask(&mut model, &fit, &val, &loss_cfg, cfg, env, stage, epochs, &mut logger)?;
        checkpoints.push(save_checkpoint(
            &model,
            &env.meta::<T>(stage, epochs, Some(NUM_CLASSES)),
            &env.checkpoint_path(stage),
        )?);
    }
    Ok(MultitaskRun {
        model,
        checkpoints,
        log: logger.history,
    })
}

/// Momentum-contrast pre-training. Only the query encoder is handed to the
/// optimizer; the key encoder follows by momentum averaging and the queue
/// is updated with each batch of keys.
pub fn train_moco<T: Scalar>(
    cfg: &TrainConfig,
    env: &RunEnv,
    moco: &MocoConfig,
    records: &[ImageRecord],
) -> Result<Trained<MomentumPair<T>>> {
    cfg.validate()?;
    moco.validate()?;
    if cfg.batch_size > moco.queue_size {
        return Err(Error::Validation(format!(
            "batch size {} exceeds queue size {}",
            cfg.batch_size, moco.queue_size
        )));
    }
    if records.is_empty() {
        return Err(Error::Validation("MoCo pre-training needs at least one image".into()));
    }
    let samples = prepare::<T>(records, &env.preproc)?;
    let encoder = build_backbone::<T>(&env.backbone, cfg.seed)?;
    let query = ContrastiveEncoder::new(encoder, moco.projection_kind(), moco.proj_dim, cfg.seed);
    let tau = moco.temperature();
    let mut pair = MomentumPair::new(query, moco.queue_size, moco.momentum, tau, cfg.seed)?;
    let views = moco_aug_pipeline(moco.variant);
    let mut logger = Logger::open(env)?;
    let mut opt = Adam::new(cfg.lr);
    let tag = "moco";
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch, cfg.epochs);
        let mut total = 0.0;
        for batch in epoch_batches(samples.len(), cfg.batch_size, cfg.seed, tag, epoch) {
            let mut qs = Vec::with_capacity(batch.len());
            let mut ks = Vec::with_capacity(batch.len());
            for &i in &batch {
                let key = [stream(tag), epoch as u64, i as u64];
                let mut rq = stream_rng(cfg.seed, &[key[0], key[1], key[2], stream("query")]);
                let mut rk = stream_rng(cfg.seed, &[key[0], key[1], key[2], stream("key")]);
                let (q, k) = views.views(samples[i].image.view(), &mut rq, &mut rk);
                qs.push(q);
                ks.push(k);
            }
            let xq = stack_images(&qs.iter().collect::<Vec<_>>());
            let xk = stack_images(&ks.iter().collect::<Vec<_>>());
            let loss = moco_step(&mut pair, &mut opt, &xq, &xk)?;
            check_finite(loss, tag, epoch, step)?;
            total += loss.as_f64() * batch.len() as f64;
            step += 1;
        }
        logger.write(EpochLog {
            stage: Stage::MocoPretrain,
            epoch: epoch + 1,
            lr: opt.lr,
            values: BTreeMap::from([
                ("contrastiveLoss".to_string(), total / samples.len() as f64),
                ("temperature".to_string(), tau),
                ("momentum".to_string(), moco.momentum),
                ("queueSize".to_string(), moco.queue_size as f64),
            ]),
        })?;
    }
    let checkpoint = save_checkpoint(
        &pair.query,
        &env.meta::<T>(Stage::MocoPretrain, cfg.epochs, None),
        &env.checkpoint_path(Stage::MocoPretrain),
    )?;
    Ok(Trained {
        model: pair,
        checkpoint,
        log: logger.history,
    })
}

/// One contrastive step: encode both views (keys without gradient), InfoNCE
/// against the queue, optimizer step on the query encoder only, momentum
/// update of the key encoder, then enqueue the keys. Returns the loss.
pub fn moco_step<T: Scalar>(
    pair: &mut MomentumPair<T>,
    opt: &mut Adam<T>,
    x_query: &Array4<T>,
    x_key: &Array4<T>,
) -> Result<T> {
    let batch_stats = Mode { train: true, rng: None };
    let q = pair.query.forward(x_query, &batch_stats);
    let k = pair.key.forward(x_key, &batch_stats);
    let (loss, grad) = info_nce(q.view(), k.view(), pair.queue.rows.view(), pair.temperature)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    pair.query.zero_grad();
    pair.query.backward(&grad.q);
    opt.step(&mut pair.query_params());
    assert!(
        opt.tracked().all(|name| name.starts_with("query.")),
        "optimizer must only track query-encoder parameters"
    );
    pair.momentum_update();
    pair.enqueue_keys(&k)?;
    Ok(loss)
}

/// Mean pixel value over a set of samples.
pub fn dataset_mean<T: Scalar>(samples: &[Sample<T>]) -> T {
    let (sum, count) = samples
        .iter()
        .fold((0.0, 0usize), |(s, c), x| (s + x.image.iter().map(|v| v.as_f64()).sum::<f64>(), c + x.image.len()));
    T::lit(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Build the masked inputs, targets and loss masks of one inpainting batch.
fn inpaint_batch<T: Scalar>(
    samples: &[Sample<T>],
    idx: &[usize],
    inpaint: &InpaintConfig,
    fill: T,
    seed: u64,
    epoch: usize,
) -> Result<(Array4<T>, Array4<T>, Array4<T>)> {
    let mut inputs = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len());
    let mut loss_masks = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut rng = stream_rng(seed, &[stream("inpaint"), stream("masks"), epoch as u64, i as u64]);
        let img = &samples[i].image;
        let masks = sample_masks(inpaint.mask_mode, img.dim(), &mut rng)?;
        let s = make_inpaint_sample(img.view(), &masks, fill)?;
        inputs.push(s.input);
        targets.push(s.target);
        loss_masks.push(s.loss_mask);
    }
    let st = |v: &Vec<Array2<T>>| stack_images(&v.iter().collect::<Vec<_>>());
    Ok((st(&inputs), st(&targets), st(&loss_masks)))
}

/// Inpainting pre-training: masked images → encoder-decoder reconstruction
/// → MSE over the masked pixels.
pub fn train_inpaint<T: Scalar>(
    cfg: &TrainConfig,
    env: &RunEnv,
    inpaint: &InpaintConfig,
    records: &[ImageRecord],
) -> Result<Trained<EncoderDecoder<T>>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Validation("inpainting pre-training needs at least one image".into()));
    }
    let samples = prepare::<T>(records, &env.preproc)?;
    let fill = match inpaint.fill {
        FillMode::DatasetMean => dataset_mean(&samples),
        FillMode::Zero => T::zero(),
    };
    let mut model = EncoderDecoder::<T>::build(&env.backbone, NUM_CLASSES, cfg.seed)?;
    let mut logger = Logger::open(env)?;
    let mut opt = Adam::new(cfg.lr);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch, cfg.epochs);
        let mut total = 0.0;
        for batch in epoch_batches(samples.len(), cfg.batch_size, cfg.seed, "inpaint", epoch) {
            let (x, target, loss_mask) = inpaint_batch(&samples, &batch, inpaint, fill, cfg.seed, epoch)?;
            let mut mode = Mode { train: true, rng: None };
            let out = model.forward(&x, &mut mode);
            let (loss, grad) = masked_mse(out.seg_logits.view(), target.view(), loss_mask.view())?;
            check_finite(loss, "inpaint", epoch, step)?;
            total += loss.as_f64() * batch.len() as f64;
            model.zero_grad();
            model.backward(None, Some(&grad));
            // The classification head is not part of this objective.
            opt.step(&mut ReconstructionParams(&mut model));
            step += 1;
        }
        logger.write(EpochLog {
            stage: Stage::InpaintPretrain,
            epoch: epoch + 1,
            lr: opt.lr,
            values: BTreeMap::from([("maskedMse".to_string(), total / samples.len() as f64)]),
        })?;
    }
    if inpaint.dump_grids {
        dump_inpaint_grids(&mut model, &samples, inpaint, fill, cfg.seed, cfg.epochs, &env.out_dir)?;
    }
    let checkpoint = save_checkpoint(
        &model,
        &env.meta::<T>(Stage::InpaintPretrain, cfg.epochs, None),
        &env.checkpoint_path(Stage::InpaintPretrain),
    )?;
    Ok(Trained {
        model,
        checkpoint,
        log: logger.history,
    })
}

/// Encoder, decoder and output conv of an encoder-decoder, without the
/// classification head.
struct ReconstructionParams<'a, T>(&'a mut EncoderDecoder<T>);

impl<T: Scalar> Parameterized<T> for ReconstructionParams<'_, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &crate::nn::Param<T>)) {
        self.0.visit(prefix, &mut |n, p| {
            if !n.starts_with("head.") {
                f(n, p)
            }
        });
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut crate::nn::Param<T>)) {
        self.0.visit_mut(prefix, &mut |n, p| {
            if !n.starts_with("head.") {
                f(n, p)
            }
        });
    }
}

/// Up to eight rows of `input | reconstruction | target`, written as
/// `inpaint_grid.png`, with reconstructions pasted only inside the holes.
fn dump_inpaint_grids<T: Scalar>(
    model: &mut EncoderDecoder<T>,
    samples: &[Sample<T>],
    inpaint: &InpaintConfig,
    fill: T,
    seed: u64,
    epoch: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    let idx: Vec<usize> = (0..samples.len().min(8)).collect();
    let (x, target, loss_mask) = inpaint_batch(samples, &idx, inpaint, fill, seed, epoch)?;
    let out = model.forward(&x, &mut Mode::eval());
    let (n, _, h, w) = x.dim();
    let mut grid = Array2::<f32>::zeros((n * h, 3 * w));
    for i in 0..n {
        let input = x.slice(s![i, 0, .., ..]);
        let recon = ndarray::Zip::from(&input)
            .and(out.seg_logits.slice(s![i, 0, .., ..]))
            .and(loss_mask.slice(s![i, 0, .., ..]))
            .map_collect(|&a, &r, &m| if m > T::zero() { r } else { a });
        for (col, img) in [input.to_owned(), recon, target.slice(s![i, 0, .., ..]).to_owned()].iter().enumerate() {
            grid.slice_mut(s![i * h..(i + 1) * h, col * w..(col + 1) * w])
                .assign(&img.mapv(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0) as f32));
        }
    }
    let path = out_dir.join("inpaint_grid.png");
    write_grayscale8(&path, &grid)?;
    Ok(path)
}

/// Baseline recipe on each of `k` stratified folds; returns per-fold test
/// reports and their summary.
pub fn kfold_baseline<T: Scalar>(
    cfg: &TrainConfig,
    env: &RunEnv,
    records: &[ImageRecord],
    k: usize,
) -> Result<KFoldSummary> {
    let folds = make_kfolds(records, k, cfg.seed)?;
    let mut reports = Vec::with_capacity(k);
    for split in folds {
        let (train, test) = split.partition(records);
        let train: Vec<ImageRecord> = train.into_iter().cloned().collect();
        let test: Vec<ImageRecord> = test.into_iter().cloned().collect();
        let mut fold_env = env.clone();
        fold_env.out_dir = env.out_dir.join(format!("fold{}", split.fold_index + 1));
        let mut trained = train_baseline::<T>(cfg, &fold_env, &train)?;
        let test = prepare::<T>(&test, &env.preproc)?;
        reports.push(evaluate(&mut trained.model, &test)?);
    }
    kfold_summary(&reports)
}

/// For each class pair: keep the records of the two classes (or relabel for
/// positive-vs-negative), train a fresh 2-way classifier with the baseline
/// recipe (optionally from a pre-trained encoder) and score it on the
/// equally filtered test records. Pairs with an empty class are skipped.
pub fn pairwise_ablation<T: Scalar>(
    cfg: &TrainConfig,
    env: &RunEnv,
    train: &[ImageRecord],
    test: &[ImageRecord],
    pairs: &[ClassPair],
    init_from: Option<&Path>,
) -> Result<Vec<BinaryReport>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &pair in pairs {
        let select = |records: &[ImageRecord]| -> Vec<(ImageRecord, usize)> {
            records
                .iter()
                .filter_map(|r| pair.relabel(r.label).map(|t| (r.clone(), t)))
                .collect()
        };
        let (tr, te) = (select(train), select(test));
        let has_both = |v: &[(ImageRecord, usize)]| (0..2).all(|c| v.iter().any(|(_, t)| *t == c));
        if !has_both(&tr) || !has_both(&te) {
            warn!("skipping pair {}: a class is empty after filtering", pair.name());
            continue;
        }
        let mut model = Classifier::<T>::build(&env.backbone, 2, cfg.seed)?;
        if let Some(path) = init_from {
            load_encoder(&mut model, &env.backbone, path)?;
        }
        let fit_records: Vec<ImageRecord> = tr.iter().map(|(r, _)| r.clone()).collect();
        let fit = prepare::<T>(&fit_records, &env.preproc)?;
        let task = ClassTask {
            fit: &fit,
            fit_targets: tr.iter().map(|(_, t)| *t).collect(),
            val: &[],
            val_targets: Vec::new(),
            names: pair.class_names(),
        };
        let mut pair_env = env.clone();
        pair_env.out_dir = env.out_dir.join(pair.name());
        let mut logger = Logger::open(&pair_env)?;
        fit_classifier(&mut model, &task, cfg, &pair_env, Stage::Finetune, cfg.epochs, &mut logger)?;
        let test_records: Vec<ImageRecord> = te.iter().map(|(r, _)| r.clone()).collect();
        let test_samples = prepare::<T>(&test_records, &env.preproc)?;
        let preds = predict(&mut model, &test_samples);
        let labels: Vec<usize> = te.iter().map(|(_, t)| *t).collect();
        rows.push(binary_report(pair, &preds, &labels)?);
    }
    Ok(rows)
}

/// Pooled encoder features of a classifier for every sample, in order.
pub fn pooled_features<T: Scalar>(model: &mut Classifier<T>, samples: &[Sample<T>]) -> Array2<T> {
    let mut rows = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>());
        model.forward(&x, &mut Mode::eval());
        rows.push(model.head.pooled().expect("forward ran").clone());
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, model.encoder.feature_dim())))
}
