//! The three training procedures: the global classifier with cut-out, the
//! in-painting pretext for the local classifier, and local fine-tuning.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::backbone::checkpoint::{save_checkpoint, CheckpointManifest};
use crate::backbone::loss::scalar;
use crate::backbone::{
    classification_loss_tensor, mse_loss_tensor, perceptual_loss, Arch, ClassifierModel, DecoderModel,
};
use crate::dataset::{
    adaptive_threshold, augment, derive_seed, extract_roi_patches, sample_training_patches, shuffled_indices,
    DatasetSplit, FingerprintSample, Label, Patch, PATCH_SIZE,
};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::imaging::{self, Image};
use crate::transforms::{cutout_batch, pixel_shuffle, CutoutConfig, ShuffleConfig};

pub const REPORT_FILE: &str = "train_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub arch: Arch,
    /// Print `epoch <k> train_loss <x> val_ace <y>` after each epoch.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            arch: Arch::Tiny,
            verbose: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }

    fn optimizer(&self, vars: Vec<candle_core::Var>) -> Result<AdamW> {
        let params = ParamsAdamW {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(AdamW::new(vars, params)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_ace: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of the initial model on the clean training data.
    pub initial_train_loss: f64,
    /// Loss of the returned model on the same data.
    pub final_train_loss: f64,
    /// Loss of the first optimizer step, evaluated before the update.
    pub first_step_loss: Option<f64>,
    /// Every optimizer step's loss, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_ace: Option<f64>,
    pub seconds: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub parameter_count: usize,
}

impl TrainReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Batches of indices for one epoch, in a seed-determined order.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    shuffled_indices(n, derive_seed(seed, &[0xBA7C, epoch as u64]))
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

fn label_tensor(labels: &[Label], dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = labels.iter().map(|l| l.as_index() as f32).collect();
    Ok(Tensor::new(v.as_slice(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean cross-entropy over images that may differ in size: equally sized
/// images share one forward pass.
fn image_batch_loss(model: &ClassifierModel, images: &[Image], labels: &[Label], train: bool) -> Result<Tensor> {
    let dtype = model.params().dtype();
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        match groups.iter_mut().find(|(d, _)| *d == img.dim()) {
            Some((_, v)) => v.push(i),
            None => groups.push((img.dim(), vec![i])),
        }
    }
    let n = images.len() as f64;
    let mut total: Option<Tensor> = None;
    for (_, idx) in groups {
        let imgs: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
        let labs: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
        let x = imaging::images_tensor(&imgs, dtype, model.device())?;
        let p = model.spoofness(&x, train)?;
        let loss = (classification_loss_tensor(&p, &label_tensor(&labs, dtype)?)? * (idx.len() as f64 / n))?;
        total = Some(match total {
            Some(t) => (t + loss)?,
            None => loss,
        });
    }
    total.ok_or_else(|| Error::Training("empty batch".into()))
}

/// Spoofness of each image, evaluation mode.
pub fn score_images(model: &ClassifierModel, images: &[&Image]) -> Result<Vec<f64>> {
    images.iter().map(|img| model.score_image(img)).collect()
}

/// Spoofness of each patch after resizing to the model's patch side.
pub fn score_patches(model: &ClassifierModel, patches: &[&Image]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let owned: Vec<Image> = chunk.iter().map(|p| (*p).clone()).collect();
        let x = model.patch_batch(&owned)?;
        let s: Vec<f64> = model.spoofness(&x, false)?.to_dtype(DType::F64)?.to_vec1()?;
        out.extend(s);
    }
    Ok(out)
}

fn mean_loss(scores: &[f64], labels: &[Label]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| crate::backbone::classification_loss(p, y))
        .sum();
    total / scores.len() as f64
}

fn require_both_classes(labels: &[Label], what: &str) -> Result<()> {
    let live = labels.iter().filter(|&&l| l == Label::Live).count();
    if live == 0 || live == labels.len() {
        return Err(Error::Training(format!("{what} must contain both live and spoof samples")));
    }
    Ok(())
}

fn progress(cfg: &TrainConfig, rec: &EpochRecord) {
    if cfg.verbose {
        match rec.val_ace {
            Some(a) => println!("epoch {} train_loss {:.6} val_ace {:.4}", rec.epoch, rec.train_loss, a),
            None => println!("epoch {} train_loss {:.6} val_ace nan", rec.epoch, rec.train_loss),
        }
    }
}

fn save_classifier_run(
    dir: &Path,
    model: &ClassifierModel,
    report: &mut TrainReport,
    epoch: usize,
) -> Result<()> {
    let mut manifest = CheckpointManifest::for_classifier(model, epoch);
    if let Some(a) = report.best_val_ace {
        manifest.metrics.insert("val_ace".into(), a);
    }
    manifest.metrics.insert("final_train_loss".into(), report.final_train_loss);
    save_checkpoint(dir, &manifest, model.params())?;
    report.checkpoint_path = Some(dir.to_path_buf());
    report.write(&dir.join(REPORT_FILE))
}

/// Trains the global classifier. Every batch goes through cut-out, then
/// augmentation, before the forward pass. The model with the best
/// validation ACE is returned and, with `checkpoint_dir`, saved.
pub fn train_global(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    cutout_cfg: &CutoutConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ClassifierModel, TrainReport)> {
    cfg.validate()?;
    cutout_cfg.validate()?;
    let start = Instant::now();
    let train_labels: Vec<Label> = split.train.iter().map(|s| s.label).collect();
    require_both_classes(&train_labels, "training split")?;
    let val_labels: Vec<Label> = split.validation.iter().map(|s| s.label).collect();
    require_both_classes(&val_labels, "validation split")?;
    let train_imgs: Vec<&Image> = split.train.iter().map(|s| &s.image).collect();
    let val_imgs: Vec<&Image> = split.validation.iter().map(|s| &s.image).collect();

    let model = ClassifierModel::new(cfg.arch, DType::F32, cfg.seed)?;
    let mut opt = cfg.optimizer(model.params().trainable())?;
    let mut report = TrainReport {
        parameter_count: model.params().parameter_count(),
        initial_train_loss: mean_loss(&score_images(&model, &train_imgs)?, &train_labels),
        ..TrainReport::default()
    };
    let mut best: Option<(f64, usize, ClassifierModel)> = None;

    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        let batches = batch_order(split.train.len(), cfg.batch_size, cfg.seed, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let step_seed = derive_seed(cfg.seed, &[epoch as u64, b as u64]);
            let raw: Vec<Image> = idx.iter().map(|&i| split.train[i].image.clone()).collect();
            let masked = cutout_batch(&raw, cutout_cfg, derive_seed(step_seed, &[1]));
            let imgs: Vec<Image> = masked
                .iter()
                .enumerate()
                .map(|(j, img)| augment(img, derive_seed(step_seed, &[2, j as u64])))
                .collect();
            let labels: Vec<Label> = idx.iter().map(|&i| train_labels[i]).collect();
            let loss = image_batch_loss(&model, &imgs, &labels, true)?;
            let v = scalar(&loss)?;
            if report.first_step_loss.is_none() {
                report.first_step_loss = Some(v);
            }
            report.step_losses.push(v);
            epoch_loss += v * idx.len() as f64;
            opt.backward_step(&loss)?;
        }
        let val_scores = score_images(&model, &val_imgs)?;
        let val_ace = evaluation::ace(&val_scores, &val_labels, evaluation::DEFAULT_THRESHOLD)?;
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_loss / split.train.len() as f64,
            val_loss: Some(mean_loss(&val_scores, &val_labels)),
            val_ace: Some(val_ace),
        };
        progress(cfg, &rec);
        report.epochs.push(rec);
        if best.as_ref().is_none_or(|(a, _, _)| val_ace < *a) {
            best = Some((val_ace, epoch, model.deep_clone()?));
        }
    }

    let (best_ace, best_epoch, best_model) = best.expect("at least one epoch");
    report.best_epoch = Some(best_epoch);
    report.best_val_ace = Some(best_ace);
    report.final_train_loss = mean_loss(&score_images(&best_model, &train_imgs)?, &train_labels);
    report.seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = checkpoint_dir {
        save_classifier_run(dir, &best_model, &mut report, best_epoch)?;
    }
    Ok((best_model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextConfig {
    pub shuffle: ShuffleConfig,
    pub perceptual_weight: f64,
    pub pixel_weight: f64,
    /// Optimizer steps; when unset, `epochs` passes over the patches.
    pub steps: Option<usize>,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self { shuffle: ShuffleConfig::default(), perceptual_weight: 1.0, pixel_weight: 1.0, steps: None }
    }
}

/// In-painting objective on one batch: the corrupted patches go through the
/// local classifier and the decoder, and the reconstruction is compared
/// with the clean patches.
pub fn inpainting_loss(
    lf: &ClassifierModel,
    decoder: &DecoderModel,
    corrupted: &[Image],
    clean: &[Image],
    cfg: &PretextConfig,
    train: bool,
) -> Result<Tensor> {
    let x = lf.patch_batch(corrupted)?;
    let (_, pyramid) = lf.logits_with_taps(&x, train, None)?;
    let recon = decoder.forward(&pyramid)?;
    let target = imaging::images_tensor(clean, lf.params().dtype(), lf.device())?;
    let lp = perceptual_loss(&recon, &target, lf, train)?;
    let l2 = mse_loss_tensor(&recon, &target)?;
    Ok(((lp * cfg.perceptual_weight)? + (l2 * cfg.pixel_weight)?)?)
}

/// Mean in-painting loss over `patches` in evaluation mode, with shuffled
/// inputs when `corrupt` is set and clean inputs otherwise.
pub fn evaluate_inpainting(
    lf: &ClassifierModel,
    decoder: &DecoderModel,
    patches: &[Image],
    cfg: &PretextConfig,
    corrupt: bool,
    seed: u64,
) -> Result<f64> {
    let inputs = if corrupt {
        patches
            .iter()
            .enumerate()
            .map(|(i, p)| pixel_shuffle(p, &cfg.shuffle, derive_seed(seed, &[i as u64])))
            .collect::<Result<Vec<_>>>()?
    } else {
        patches.to_vec()
    };
    let mut total = 0.0;
    for (inp, clean) in inputs.chunks(32).zip(patches.chunks(32)) {
        total += scalar(&inpainting_loss(lf, decoder, inp, clean, cfg, false)?)? * inp.len() as f64;
    }
    Ok(total / patches.len() as f64)
}

/// Trains the local classifier and a decoder on the in-painting pretext
/// task. Returns both; the decoder is only needed for diagnostics.
pub fn pretrain_local_inpainting(
    patches: &[Image],
    cfg: &TrainConfig,
    pretext: &PretextConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ClassifierModel, DecoderModel, TrainReport)> {
    cfg.validate()?;
    pretext.shuffle.validate(PATCH_SIZE)?;
    if patches.is_empty() {
        return Err(Error::Training("no patches for the pretext task".into()));
    }
    if let Some(p) = patches.iter().find(|p| p.dim() != (PATCH_SIZE, PATCH_SIZE)) {
        return Err(Error::Shape(format!("pretext patches must be {PATCH_SIZE}x{PATCH_SIZE}, got {:?}", p.dim())));
    }
    let start = Instant::now();
    let lf = ClassifierModel::new(cfg.arch, DType::F32, cfg.seed)?;
    let decoder = DecoderModel::new(
        &cfg.arch.tap_spec(),
        cfg.arch.patch_input_side(),
        DType::F32,
        derive_seed(cfg.seed, &[0xDEC]),
    )?;
    let mut vars = lf.params().trainable();
    vars.extend(decoder.params().trainable());
    let mut opt = cfg.optimizer(vars)?;
    let total_steps = pretext
        .steps
        .unwrap_or(cfg.epochs * patches.len().div_ceil(cfg.batch_size));
    let mut report = TrainReport { parameter_count: lf.params().parameter_count(), ..TrainReport::default() };

    let mut step = 0;
    let mut epoch = 0;
    while step < total_steps {
        epoch += 1;
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for (b, idx) in batch_order(patches.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            if step == total_steps {
                break;
            }
            let step_seed = derive_seed(cfg.seed, &[0x5EF, epoch as u64, b as u64]);
            let clean: Vec<Image> = idx.iter().map(|&i| patches[i].clone()).collect();
            let corrupted = clean
                .iter()
                .enumerate()
                .map(|(j, p)| pixel_shuffle(p, &pretext.shuffle, derive_seed(step_seed, &[j as u64])))
                .collect::<Result<Vec<_>>>()?;
            let loss = inpainting_loss(&lf, &decoder, &corrupted, &clean, pretext, true)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::Training(format!("non-finite pretext loss at step {}", step + 1)));
            }
            if report.first_step_loss.is_none() {
                report.first_step_loss = Some(v);
            }
            report.step_losses.push(v);
            epoch_loss += v * idx.len() as f64;
            seen += idx.len();
            opt.backward_step(&loss)?;
            step += 1;
        }
        let rec = EpochRecord { epoch, train_loss: epoch_loss / seen.max(1) as f64, val_loss: None, val_ace: None };
        progress(cfg, &rec);
        report.epochs.push(rec);
    }
    report.initial_train_loss = report.first_step_loss.unwrap_or(f64::NAN);
    report.final_train_loss = report.step_losses.last().copied().unwrap_or(f64::NAN);
    report.seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = checkpoint_dir {
        save_classifier_run(dir, &lf, &mut report, epoch)?;
        let dec_dir = dir.join("decoder");
        save_checkpoint(&dec_dir, &CheckpointManifest::for_decoder(&decoder, cfg.arch, epoch), decoder.params())?;
    }
    Ok((lf, decoder, report))
}

/// Label of every patch, looked up by its source image id.
pub fn patch_labels(patches: &[Patch], labels: &HashMap<String, Label>) -> Result<Vec<Label>> {
    patches
        .iter()
        .map(|p| {
            labels
                .get(&p.source_id)
                .copied()
                .ok_or_else(|| Error::Data(format!("no label for patch source {}", p.source_id)))
        })
        .collect()
}

/// Source id to label map for a set of samples.
pub fn label_map<'a>(samples: impl IntoIterator<Item = &'a FingerprintSample>) -> HashMap<String, Label> {
    samples.into_iter().map(|s| (s.id.clone(), s.label)).collect()
}

/// Fine-tunes a copy of the pretext-initialized local classifier on labeled
/// patches. Patches inherit their source image's label; selection uses
/// patch-level validation ACE.
pub fn finetune_local(
    pretrained: &ClassifierModel,
    train: &[Patch],
    validation: &[Patch],
    labels: &HashMap<String, Label>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ClassifierModel, TrainReport)> {
    cfg.validate()?;
    let train_labels = patch_labels(train, labels)?;
    let val_labels = patch_labels(validation, labels)?;
    require_both_classes(&train_labels, "local training patches")?;
    require_both_classes(&val_labels, "local validation patches")?;
    let start = Instant::now();
    let model = pretrained.deep_clone()?;
    let dtype = model.params().dtype();
    let mut opt = cfg.optimizer(model.params().trainable())?;
    let train_px: Vec<&Image> = train.iter().map(|p| &p.pixels).collect();
    let val_px: Vec<&Image> = validation.iter().map(|p| &p.pixels).collect();
    let mut report = TrainReport {
        parameter_count: model.params().parameter_count(),
        initial_train_loss: mean_loss(&score_patches(&model, &train_px)?, &train_labels),
        ..TrainReport::default()
    };
    let mut best: Option<(f64, usize, ClassifierModel)> = None;
    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        for idx in batch_order(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let imgs: Vec<Image> = idx.iter().map(|&i| train[i].pixels.clone()).collect();
            let labs: Vec<Label> = idx.iter().map(|&i| train_labels[i]).collect();
            let x = model.patch_batch(&imgs)?;
            let p = model.spoofness(&x, true)?;
            let loss = classification_loss_tensor(&p, &label_tensor(&labs, dtype)?)?;
            let v = scalar(&loss)?;
            if report.first_step_loss.is_none() {
                report.first_step_loss = Some(v);
            }
            report.step_losses.push(v);
            epoch_loss += v * idx.len() as f64;
            opt.backward_step(&loss)?;
        }
        let val_scores = score_patches(&model, &val_px)?;
        let val_ace = evaluation::ace(&val_scores, &val_labels, evaluation::DEFAULT_THRESHOLD)?;
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss: Some(mean_loss(&val_scores, &val_labels)),
            val_ace: Some(val_ace),
        };
        progress(cfg, &rec);
        report.epochs.push(rec);
        if best.as_ref().is_none_or(|(a, _, _)| val_ace < *a) {
            best = Some((val_ace, epoch, model.deep_clone()?));
        }
    }
    let (best_ace, best_epoch, best_model) = best.expect("at least one epoch");
    report.best_epoch = Some(best_epoch);
    report.best_val_ace = Some(best_ace);
    report.final_train_loss = mean_loss(&score_patches(&best_model, &train_px)?, &train_labels);
    report.seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = checkpoint_dir {
        save_classifier_run(dir, &best_model, &mut report, best_epoch)?;
    }
    Ok((best_model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub per_image: usize,
    pub stride: usize,
    /// ROI threshold as a multiple of the mean grid-patch variance.
    pub threshold_factor: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { per_image: 70, stride: 32, threshold_factor: 0.5 }
    }
}

/// ROI patches for local training: variance-filtered grid patches, `per_image`
/// of them drawn per sample. An image with no ROI patch falls back to its
/// whole grid.
pub fn prepare_patches(samples: &[FingerprintSample], cfg: &PatchConfig, seed: u64) -> Result<Vec<Patch>> {
    let mut out = Vec::with_capacity(samples.len() * cfg.per_image);
    for (i, s) in samples.iter().enumerate() {
        let t = adaptive_threshold(&s.image, PATCH_SIZE, cfg.stride, cfg.threshold_factor);
        let mut roi = extract_roi_patches(s, PATCH_SIZE, cfg.stride, t)?;
        if roi.is_empty() {
            roi = extract_roi_patches(s, PATCH_SIZE, cfg.stride, f64::NEG_INFINITY)?;
        }
        let picked = sample_training_patches(&roi, cfg.per_image, derive_seed(seed, &[i as u64]))?;
        out.extend(picked.patches);
    }
    Ok(out)
}
