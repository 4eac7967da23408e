//! Evidence-map classification.
//!
//! The head is a single 1x1 convolution over the patch features, so each
//! spatial position emits one score per class ("evidence") that can only
//! depend on its own image patch, and the class logit is *exactly* the
//! spatial mean of that class's evidence map. Interpretation needs no
//! saliency post-hoc: the map is the decision, decomposed over patches.
//!
//! Fine-tuning runs participant-level cross-validation: within each
//! training fold a participant-disjoint validation part drives model
//! selection, the head trains alone on frozen features first, then the
//! whole network trains at a lower encoder rate. The objective is
//! class-weighted cross-entropy plus an optional L1 penalty on the
//! evidence values, which trades a little accuracy for sparser, more
//! localized maps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ImageRecord, SplitSpec};
use crate::encoder::{BagNetEncoder, PatchGeometry};
use crate::error::{Error, Result};
use crate::metrics::{auroc, class_weights, patch_precision_at_k};
use crate::nn::{Conv2d, Param};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seeds::{self, tag};
use crate::trainer::checkpoint::{
    Checkpoint, CheckpointMeta, OptimizerMeta, RngMeta, FORMAT_VERSION,
};
use crate::trainer::{collect_tensors, restore_tensors};

/// Per-class, per-position evidence in NHWC layout, with the geometry
/// tying each position back to its image patch.
#[derive(Debug, Clone)]
pub struct EvidenceMaps {
    /// (N, h, w, n_classes)
    pub values: Array4<f64>,
    pub geometry: PatchGeometry,
    pub image_hw: (usize, usize),
}

impl EvidenceMaps {
    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    /// Evidence map of one image for one class.
    pub fn class_map(&self, image: usize, class: usize) -> ArrayView2<'_, f64> {
        self.values.slice(ndarray::s![image, .., .., class])
    }
}

/// Encoder plus evidence head.
pub struct Classifier {
    pub encoder: BagNetEncoder,
    pub head: Conv2d,
    n_classes: usize,
}

impl Classifier {
    /// Put a freshly initialized 1x1 evidence head on an encoder.
    pub fn attach_head(encoder: BagNetEncoder, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 classes, got {n_classes}"
            )));
        }
        let mut rng = seeds::rng_for(seed, &[tag::INIT_HEAD]);
        let head = Conv2d::new(
            "head",
            encoder.config.feature_dim(),
            n_classes,
            1,
            1,
            true,
            &mut rng,
        );
        Ok(Classifier {
            encoder,
            head,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Logits as the exact spatial mean of the evidence maps (NCHW in,
    /// one row per image out). Adding a constant to an evidence map
    /// shifts the logit by that same constant.
    pub fn logits_from_evidence(evidence_nchw: &Array4<f64>) -> Array2<f64> {
        crate::nn::global_avg_pool(evidence_nchw)
    }

    /// Evidence maps and logits for a batch of NCHW images under
    /// evaluation statistics.
    pub fn forward_with_evidence(
        &self,
        images: &Array4<f64>,
    ) -> Result<(EvidenceMaps, Array2<f64>)> {
        let features = self.encoder.forward_eval(images)?;
        let ev = self.head.forward_eval(&features)?;
        let logits = Self::logits_from_evidence(&ev);
        let (_, _, h, w) = images.dim();
        Ok((
            EvidenceMaps {
                values: crate::encoder::nchw_to_nhwc(&ev),
                geometry: self.encoder.geometry(),
                image_hw: (h, w),
            },
            logits,
        ))
    }

    /// Training-mode forward returning evidence in NCHW for the loss.
    fn forward_train(&mut self, images: &Array4<f64>) -> Result<Array4<f64>> {
        let features = self.encoder.forward_train(images)?;
        self.head.forward_train(&features)
    }

    fn backward(&mut self, grad_evidence: &Array4<f64>) {
        let gf = self.head.backward(grad_evidence);
        self.encoder.backward(&gf);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.round_to_f32();
        }
        for bn in self.encoder.batchnorms_mut() {
            bn.running_mean.mapv_inplace(|v| v as f32 as f64);
            bn.running_var.mapv_inplace(|v| v as f32 as f64);
        }
    }

    fn tensors(&self) -> BTreeMap<String, ndarray::ArrayD<f64>> {
        collect_tensors(self.params(), self.encoder.batchnorms())
    }
}

/// Rebuild a classifier from a fine-tuning checkpoint.
pub fn classifier_from_checkpoint(ck: &Checkpoint) -> Result<Classifier> {
    let n_classes = ck.meta.n_classes.ok_or_else(|| {
        Error::Data("checkpoint has no classifier head; fine-tune first".into())
    })?;
    let encoder = BagNetEncoder::build(ck.meta.encoder.clone(), 0)?;
    let mut model = Classifier::attach_head(encoder, n_classes, 0)?;
    restore_tensors(&ck.tensors, model.params_mut(), Vec::new())?;
    restore_tensors(&ck.tensors, Vec::new(), model.encoder.batchnorms_mut())?;
    Ok(model)
}

/// Objective pieces for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
}

/// Class-weighted cross-entropy on the evidence-mean logits plus
/// `lambda * mean(|evidence|)`, with the gradient w.r.t. the evidence.
///
/// Weighting follows the usual convention: per-sample losses scale by
/// the weight of the true class and the batch normalizes by the sum of
/// those weights, so at `lambda = 0` and unit weights this is plain
/// mean cross-entropy.
pub fn evidence_objective(
    evidence_nchw: &Array4<f64>,
    labels: &[usize],
    weights: &[f64],
    lambda: f64,
) -> Result<(LossParts, Array4<f64>)> {
    let (n, c, h, w) = evidence_nchw.dim();
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{n} evidence maps but {} labels",
            labels.len()
        )));
    }
    if weights.len() != c {
        return Err(Error::Data(format!(
            "{c} classes but {} class weights",
            weights.len()
        )));
    }
    let logits = Classifier::logits_from_evidence(evidence_nchw);
    let mut grad_logits = Array2::<f64>::zeros((n, c));
    let weight_sum: f64 = labels.iter().map(|&y| weights[y]).sum();
    let mut ce = 0.0;
    for i in 0..n {
        let y = labels[i];
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(i);
        let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        ce -= weights[y] * ((logits[[i, y]] - mx) - denom.ln());
        for k in 0..c {
            let p = (logits[[i, k]] - mx).exp() / denom;
            let target = if k == y { 1.0 } else { 0.0 };
            grad_logits[[i, k]] = weights[y] * (p - target) / weight_sum;
        }
    }
    ce /= weight_sum;

    let area = (h * w) as f64;
    let numel = (n * c * h * w) as f64;
    let mut penalty = 0.0;
    let mut grad = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for k in 0..c {
            let spread = grad_logits[[i, k]] / area;
            for a in 0..h {
                for b in 0..w {
                    let v = evidence_nchw[[i, k, a, b]];
                    penalty += v.abs();
                    grad[[i, k, a, b]] = spread + lambda * v.signum() / numel;
                }
            }
        }
    }
    penalty = lambda * penalty / numel;
    Ok((
        LossParts {
            total: ce + penalty,
            cross_entropy: ce,
            penalty,
        },
        grad,
    ))
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub head_lr: f64,
    pub encoder_lr: f64,
    pub weight_decay: f64,
    /// Epochs with the encoder frozen before unfreezing everything.
    pub head_only_epochs: usize,
    /// Total epoch budget including the head-only phase.
    pub max_epochs: usize,
    /// Stop this many epochs after the best validation AUROC.
    pub patience: usize,
    /// L1 penalty on evidence values.
    pub lambda: f64,
    pub folds: usize,
    pub batch_size: usize,
    /// Participant fraction of each training fold held out for model
    /// selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            head_lr: 1e-4,
            encoder_lr: 1e-5,
            weight_decay: 1e-4,
            head_only_epochs: 5,
            max_epochs: 50,
            patience: 10,
            lambda: 0.0,
            folds: 5,
            batch_size: 64,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_lr <= 0.0 || self.encoder_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "evidence penalty must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.max_epochs == 0 || self.head_only_epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "epoch budget {} must cover the {} head-only epochs",
                self.max_epochs, self.head_only_epochs
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    fn snapshot(&self) -> BTreeMap<String, serde_json::Value> {
        let mut out = BTreeMap::new();
        if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(self) {
            for (k, v) in map {
                out.insert(format!("finetune.{k}"), v);
            }
        }
        out
    }
}

/// One cross-validation fold's outcome: `auroc` is measured on the
/// held-out fold with the best-validation-epoch model.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub best_epoch: usize,
    pub val_auroc: f64,
    pub auroc: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub folds: Vec<FoldOutcome>,
    pub mean_auroc: f64,
}

fn labeled(records: &[ImageRecord], idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            records[i].label.ok_or_else(|| {
                Error::Data(format!(
                    "record {} has no label; fine-tuning needs labeled data",
                    records[i].id
                ))
            })
        })
        .collect()
}

fn require_all_classes(
    labels: &[usize],
    n_classes: usize,
    what: &str,
    fold: usize,
) -> Result<()> {
    let mut seen = vec![false; n_classes];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Data(format!(
            "fold {fold}: {what} has no images of class {missing}"
        )));
    }
    Ok(())
}

/// Split the training indices of a fold into inner-train and validation
/// by participant, stratified on each participant's majority label.
pub(crate) fn holdout_validation(
    manifest: &DatasetManifest,
    train_pool: &[usize],
    fraction: f64,
    seed: u64,
    fold: usize,
) -> (Vec<usize>, Vec<usize>) {
    // Participant -> labels, in first-appearance order.
    let mut order: Vec<&str> = Vec::new();
    let mut by_participant: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in train_pool {
        let r = &manifest.records[i];
        if !by_participant.contains_key(r.participant_id.as_str()) {
            order.push(&r.participant_id);
        }
        by_participant
            .entry(&r.participant_id)
            .or_default()
            .push(i);
    }
    // Group participants by majority label (ties toward the smaller
    // class index), then hold out a fraction of each group.
    let mut strata: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for p in &order {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &by_participant[p] {
            if let Some(l) = manifest.records[i].label {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
        let majority = counts
            .iter()
            .max_by_key(|(l, c)| (**c, usize::MAX - **l))
            .map(|(l, _)| *l)
            .unwrap_or(usize::MAX);
        strata.entry(majority).or_default().push(p);
    }
    let mut rng = seeds::rng_for(seed, &[tag::HOLDOUT, fold as u64]);
    let mut val_participants: BTreeSet<&str> = BTreeSet::new();
    for (_, mut members) in strata {
        members.shuffle(&mut rng);
        let take = ((members.len() as f64 * fraction).round() as usize)
            .clamp(1, members.len().saturating_sub(1).max(1));
        for p in members.into_iter().take(take) {
            val_participants.insert(p);
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for &i in train_pool {
        if val_participants.contains(manifest.records[i].participant_id.as_str()) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Stack records into an NCHW batch; all images must share one size.
fn stack_images(manifest: &DatasetManifest, idx: &[usize]) -> Result<Array4<f64>> {
    let first = manifest.records[idx[0]].pixels()?;
    let (h, w, _) = first.dim();
    let mut out = Array4::<f64>::zeros((idx.len(), 3, h, w));
    for (n, &i) in idx.iter().enumerate() {
        let p = manifest.records[i].pixels()?;
        if p.dim() != (h, w, 3) {
            return Err(Error::Data(format!(
                "record {}: size {:?} differs from {:?}",
                manifest.records[i].id,
                p.dim(),
                (h, w, 3)
            )));
        }
        for c in 0..3 {
            for a in 0..h {
                for b in 0..w {
                    out[[n, c, a, b]] = p[[a, b, c]];
                }
            }
        }
    }
    Ok(out)
}

/// Evaluation-mode logits for a set of records, in chunks.
fn eval_logits(
    model: &Classifier,
    manifest: &DatasetManifest,
    idx: &[usize],
) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((idx.len(), model.n_classes()));
    for (chunk_start, chunk) in idx.chunks(64).enumerate().map(|(c, s)| (c * 64, s)) {
        let x = stack_images(manifest, chunk)?;
        let (_, logits) = model.forward_with_evidence(&x)?;
        for r in 0..chunk.len() {
            for k in 0..model.n_classes() {
                out[[chunk_start + r, k]] = logits[[r, k]];
            }
        }
    }
    Ok(out)
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn val_auroc(
    model: &Classifier,
    manifest: &DatasetManifest,
    idx: &[usize],
    labels: &[usize],
) -> Result<f64> {
    let logits = eval_logits(model, manifest, idx)?;
    auroc(&softmax_rows(&logits), labels)
}

/// Class probabilities for the given records under evaluation
/// statistics, one row per index.
pub fn predict_proba(
    model: &Classifier,
    manifest: &DatasetManifest,
    idx: &[usize],
) -> Result<Array2<f64>> {
    if idx.is_empty() {
        return Err(Error::Data("no records to score".into()));
    }
    Ok(softmax_rows(&eval_logits(model, manifest, idx)?))
}

struct FoldModel {
    model: Classifier,
    best_epoch: usize,
    best_val: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    epochs_run: usize,
}

/// Train one fold and return the best-epoch model.
#[allow(clippy::too_many_arguments)]
fn train_fold(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    cfg: &FinetuneConfig,
    fold: usize,
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<FoldModel> {
    let n_classes = manifest.n_classes;
    let train_labels = labeled(&manifest.records, train_idx)?;
    let val_labels = labeled(&manifest.records, val_idx)?;
    require_all_classes(&train_labels, n_classes, "training part", fold)?;
    require_all_classes(&val_labels, n_classes, "validation part", fold)?;
    let weights = class_weights(&train_labels, n_classes)?;

    let mut encoder = BagNetEncoder::build(pretrained.meta.encoder.clone(), 0)?;
    restore_tensors(&pretrained.tensors, encoder.params_mut(), Vec::new())?;
    restore_tensors(&pretrained.tensors, Vec::new(), encoder.batchnorms_mut())?;
    let head_seed = seeds::derive_seed(cfg.seed, &[fold as u64]);
    let mut model = Classifier::attach_head(encoder, n_classes, head_seed)?;
    model.round_to_f32();

    let mut optimizer = Optimizer::new(OptimizerConfig::adamw(cfg.weight_decay));

    // Head-only phase: the encoder is frozen in evaluation mode, so its
    // feature maps are fixed and computed once.
    let mut feature_cache: BTreeMap<usize, Array4<f64>> = BTreeMap::new();
    for chunk in train_idx.chunks(64) {
        let x = stack_images(manifest, chunk)?;
        let f = model.encoder.forward_eval(&x)?;
        for (r, &i) in chunk.iter().enumerate() {
            feature_cache.insert(
                i,
                f.index_axis(ndarray::Axis(0), r)
                    .insert_axis(ndarray::Axis(0))
                    .to_owned(),
            );
        }
    }
    let label_of: BTreeMap<usize, usize> = train_idx
        .iter()
        .zip(&train_labels)
        .map(|(&i, &l)| (i, l))
        .collect();

    let mut best: Option<(f64, usize, BTreeMap<String, ndarray::ArrayD<f64>>)> = None;
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        let head_only = epoch < cfg.head_only_epochs;
        let mut perm = train_idx.to_vec();
        let mut rng = seeds::rng_for(
            cfg.seed,
            &[tag::SHUFFLE, tag::FINETUNE, fold as u64, epoch as u64],
        );
        perm.shuffle(&mut rng);
        for batch in perm.chunks(cfg.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| label_of[&i]).collect();
            model.zero_grad();
            if head_only {
                let (_, _, fh, fw) = feature_cache[&batch[0]].dim();
                let d = model.encoder.config.feature_dim();
                let mut f = Array4::<f64>::zeros((batch.len(), d, fh, fw));
                for (r, &i) in batch.iter().enumerate() {
                    f.index_axis_mut(ndarray::Axis(0), r)
                        .assign(&feature_cache[&i].index_axis(ndarray::Axis(0), 0));
                }
                let ev = model.head.forward_train(&f)?;
                let (_, gev) = evidence_objective(&ev, &labels, &weights, cfg.lambda)?;
                model.head.backward(&gev);
                optimizer.step(&mut model.head.params_mut(), cfg.head_lr)?;
            } else {
                let x = stack_images(manifest, batch)?;
                let ev = model.forward_train(&x)?;
                let (_, gev) = evidence_objective(&ev, &labels, &weights, cfg.lambda)?;
                model.backward(&gev);
                optimizer.step(&mut model.head.params_mut(), cfg.head_lr)?;
                optimizer.step(&mut model.encoder.params_mut(), cfg.encoder_lr)?;
            }
        }
        epochs_run = epoch + 1;
        let score = val_auroc(&model, manifest, val_idx, &val_labels)?;
        let improved = best.as_ref().map_or(true, |(b, _, _)| score > *b);
        if improved {
            best = Some((score, epochs_run, model.tensors()));
        }
        let (_, best_epoch, _) = best.as_ref().unwrap();
        if epochs_run - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_val, best_epoch, tensors) = best.unwrap();
    restore_tensors(&tensors, model.params_mut(), Vec::new())?;
    restore_tensors(&tensors, Vec::new(), model.encoder.batchnorms_mut())?;
    Ok(FoldModel {
        model,
        best_epoch,
        best_val,
        epochs_run,
    })
}

fn save_classifier_checkpoint(
    model: &mut Classifier,
    optimizer_config: &OptimizerConfig,
    cfg: &FinetuneConfig,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    model.round_to_f32();
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        // Fine-tuned artifacts are not a pretraining stage.
        stage_id: 0,
        epoch,
        encoder: model.encoder.config.clone(),
        projector: None,
        n_classes: Some(model.n_classes()),
        rng: RngMeta {
            master_seed: cfg.seed,
        },
        optimizer: Some(OptimizerMeta {
            config: optimizer_config.clone(),
            step_counts: BTreeMap::new(),
        }),
        config_snapshot: cfg.snapshot(),
        tensors: Vec::new(),
    };
    Checkpoint::new(meta, model.tensors()).save(path)
}

/// Cross-validated fine-tuning from a pretraining checkpoint. Writes one
/// best-epoch checkpoint per fold plus `folds.csv`
/// (`fold,best_epoch,auroc`) under `out_dir` and returns the per-fold
/// held-out AUROCs.
pub fn finetune(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    split: &SplitSpec,
    cfg: &FinetuneConfig,
    out_dir: &Path,
) -> Result<FinetuneReport> {
    let folds: Vec<usize> = (0..cfg.folds).collect();
    finetune_folds(pretrained, manifest, split, cfg, &folds, out_dir)
}

/// Fine-tune only the given folds (the sparsity sweep caps the fold
/// count to control runtime).
pub fn finetune_folds(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    split: &SplitSpec,
    cfg: &FinetuneConfig,
    folds: &[usize],
    out_dir: &Path,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if split.folds != cfg.folds {
        return Err(Error::Config(format!(
            "split has {} folds but config asks for {}",
            split.folds, cfg.folds
        )));
    }
    if manifest.n_classes < 2 {
        return Err(Error::Data(format!(
            "dataset declares {} classes; need at least 2",
            manifest.n_classes
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let optimizer_config = OptimizerConfig::adamw(cfg.weight_decay);

    let mut outcomes = Vec::new();
    for &fold in folds {
        if fold >= cfg.folds {
            return Err(Error::Config(format!(
                "fold {fold} out of range for {} folds",
                cfg.folds
            )));
        }
        let test_idx = split.test_indices(manifest, fold);
        let pool = split.train_indices(manifest, fold);
        let test_labels = labeled(&manifest.records, &test_idx)?;
        require_all_classes(&test_labels, manifest.n_classes, "held-out fold", fold)?;
        let (train_idx, val_idx) =
            holdout_validation(manifest, &pool, cfg.val_fraction, cfg.seed, fold);

        let mut fm = train_fold(pretrained, manifest, cfg, fold, &train_idx, &val_idx)?;
        let test_scores = softmax_rows(&eval_logits(&fm.model, manifest, &test_idx)?);
        let test_auroc = auroc(&test_scores, &test_labels)?;
        let ck_path = out_dir.join(format!("fold{fold}_best.ckpt"));
        save_classifier_checkpoint(
            &mut fm.model,
            &optimizer_config,
            cfg,
            fm.best_epoch,
            &ck_path,
        )?;
        outcomes.push(FoldOutcome {
            fold,
            best_epoch: fm.best_epoch,
            val_auroc: fm.best_val,
            auroc: test_auroc,
            checkpoint: ck_path,
        });
    }

    let mut writer = csv::Writer::from_path(out_dir.join("folds.csv"))
        .map_err(|e| Error::Data(format!("cannot write folds.csv: {e}")))?;
    writer
        .write_record(["fold", "best_epoch", "auroc"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for o in &outcomes {
        writer
            .write_record([
                o.fold.to_string(),
                o.best_epoch.to_string(),
                format!("{:.6}", o.auroc),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush()?;

    let mean_auroc = outcomes.iter().map(|o| o.auroc).sum::<f64>() / outcomes.len() as f64;
    Ok(FinetuneReport {
        folds: outcomes,
        mean_auroc,
    })
}

/// Mean lesion-localization precision of the top-k evidence patches over
/// the records in `idx` that carry a nonempty lesion mask, scoring each
/// image's own class channel. `None` when no record qualifies.
pub fn mean_precision_at_k(
    model: &Classifier,
    manifest: &DatasetManifest,
    idx: &[usize],
    k: usize,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for &i in idx {
        let rec = &manifest.records[i];
        let Some(label) = rec.label else { continue };
        let Some(mask) = rec.lesion_mask()? else { continue };
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let x = stack_images(manifest, &[i])?;
        let (maps, _) = model.forward_with_evidence(&x)?;
        total += patch_precision_at_k(
            maps.class_map(0, label),
            &maps.geometry,
            maps.image_hw,
            mask,
            k,
        )?;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// One row of the sparsity sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_auroc: f64,
    pub mean_precision_at_k: f64,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Largest penalty whose mean AUROC stays within `tolerance` of the
    /// weakest-penalty baseline.
    pub recommended_lambda: f64,
}

/// Sweep the evidence penalty: fine-tune at each strength, measure mean
/// held-out AUROC and lesion precision@k, and recommend the sparsest
/// setting that does not cost accuracy. Writes
/// `sweep.csv` (`lambda,mean_auroc,mean_precision_at_k`) under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn sparsity_sweep(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    split: &SplitSpec,
    base: &FinetuneConfig,
    lambdas: &[f64],
    k: usize,
    tolerance: f64,
    fold_cap: Option<usize>,
    out_dir: &Path,
) -> Result<SweepReport> {
    if lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one penalty value".into()));
    }
    if tolerance < 0.0 {
        return Err(Error::Config("sweep tolerance must be nonnegative".into()));
    }
    let mut grid: Vec<f64> = lambdas.to_vec();
    if grid.iter().any(|l| *l < 0.0 || !l.is_finite()) {
        return Err(Error::Config("penalties must be finite and nonnegative".into()));
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();

    let n_folds = fold_cap.unwrap_or(base.folds).clamp(1, base.folds);
    let folds: Vec<usize> = (0..n_folds).collect();
    std::fs::create_dir_all(out_dir)?;

    let mut rows = Vec::new();
    for &lambda in &grid {
        let cfg = FinetuneConfig {
            lambda,
            ..base.clone()
        };
        let run_dir = out_dir.join(format!("lambda_{lambda}"));
        let report = finetune_folds(pretrained, manifest, split, &cfg, &folds, &run_dir)?;
        let mut precisions = Vec::new();
        for o in &report.folds {
            let model = classifier_from_checkpoint(&Checkpoint::load(&o.checkpoint)?)?;
            let test_idx = split.test_indices(manifest, o.fold);
            if let Some(p) = mean_precision_at_k(&model, manifest, &test_idx, k)? {
                precisions.push(p);
            }
        }
        if precisions.is_empty() {
            return Err(Error::Data(
                "no held-out image carries a lesion mask; cannot score precision".into(),
            ));
        }
        rows.push(SweepRow {
            lambda,
            mean_auroc: report.mean_auroc,
            mean_precision_at_k: precisions.iter().sum::<f64>() / precisions.len() as f64,
        });
    }

    let baseline = rows[0].mean_auroc;
    let recommended_lambda = rows
        .iter()
        .rev()
        .find(|r| r.mean_auroc >= baseline - tolerance)
        .map(|r| r.lambda)
        .unwrap_or(rows[0].lambda);

    let mut writer = csv::Writer::from_path(out_dir.join("sweep.csv"))
        .map_err(|e| Error::Data(format!("cannot write sweep.csv: {e}")))?;
    writer
        .write_record(["lambda", "mean_auroc", "mean_precision_at_k"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in &rows {
        writer
            .write_record([
                r.lambda.to_string(),
                format!("{:.6}", r.mean_auroc),
                format!("{:.6}", r.mean_precision_at_k),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush()?;

    Ok(SweepReport {
        rows,
        recommended_lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::encoder::EncoderConfig;
    use crate::nn::params_checksum;

    fn tiny_encoder() -> BagNetEncoder {
        let cfg = EncoderConfig {
            stem_channels: 4,
            stage_channels: [4, 6, 8, 8],
            ..EncoderConfig::default()
        };
        BagNetEncoder::build(cfg, 11).unwrap()
    }

    #[test]
    fn head_has_expected_parameter_count() {
        // feature dim 8, 3 classes: 8*3 weights + 3 biases.
        let model = Classifier::attach_head(tiny_encoder(), 3, 5).unwrap();
        let head_params: usize = model.head.params().iter().map(|p| p.value.len()).sum();
        assert_eq!(head_params, 27);
        assert!(Classifier::attach_head(tiny_encoder(), 1, 5).is_err());
    }

    #[test]
    fn attach_is_deterministic_in_the_seed() {
        let a = Classifier::attach_head(tiny_encoder(), 3, 5).unwrap();
        let b = Classifier::attach_head(tiny_encoder(), 3, 5).unwrap();
        let c = Classifier::attach_head(tiny_encoder(), 3, 6).unwrap();
        assert_eq!(params_checksum(a.head.params()), params_checksum(b.head.params()));
        assert_ne!(params_checksum(a.head.params()), params_checksum(c.head.params()));
    }

    #[test]
    fn zero_features_give_bias_evidence_everywhere() {
        let model = Classifier::attach_head(tiny_encoder(), 3, 5).unwrap();
        let f = Array4::<f64>::zeros((2, 8, 4, 4));
        let ev = model.head.forward_eval(&f).unwrap();
        let bias: Vec<f64> = model.head.params()[1].value.iter().copied().collect();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        assert_eq!(ev[[n, c, i, j]], bias[c]);
                    }
                }
            }
        }
        let logits = Classifier::logits_from_evidence(&ev);
        for n in 0..2 {
            for c in 0..3 {
                assert!((logits[[n, c]] - bias[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logit_is_spatial_mean_and_additive_in_constants() {
        let mut rng = seeds::rng_for(3, &[8]);
        let ev = Array4::from_shape_simple_fn((2, 3, 4, 5), || seeds::normal(&mut rng));
        let logits = Classifier::logits_from_evidence(&ev);
        for n in 0..2 {
            for c in 0..3 {
                let mean = ev
                    .index_axis(ndarray::Axis(0), n)
                    .index_axis(ndarray::Axis(0), c)
                    .mean()
                    .unwrap();
                assert!((logits[[n, c]] - mean).abs() < 1e-15);
            }
        }
        // Shifting one class's map by a constant shifts only that logit,
        // by exactly that constant.
        let mut shifted = ev.clone();
        shifted
            .index_axis_mut(ndarray::Axis(0), 1)
            .index_axis_mut(ndarray::Axis(0), 2)
            .mapv_inplace(|v| v + 0.37);
        let l2 = Classifier::logits_from_evidence(&shifted);
        for n in 0..2 {
            for c in 0..3 {
                let delta = if (n, c) == (1, 2) { 0.37 } else { 0.0 };
                assert!((l2[[n, c]] - logits[[n, c]] - delta).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unpenalized_objective_is_exactly_weighted_cross_entropy() {
        let mut rng = seeds::rng_for(4, &[8]);
        let ev = Array4::from_shape_simple_fn((4, 3, 2, 2), || seeds::normal(&mut rng));
        let labels = [0usize, 2, 1, 2];
        let weights = [1.5, 0.5, 1.0];
        let (parts, _) = evidence_objective(&ev, &labels, &weights, 0.0).unwrap();
        // Hand-computed reference from the logits.
        let logits = Classifier::logits_from_evidence(&ev);
        let mut want = 0.0;
        let mut wsum = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = logits.row(i).to_vec();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            want -= weights[y] * ((row[y] - mx) - denom.ln());
            wsum += weights[y];
        }
        want /= wsum;
        assert!((parts.total - want).abs() < 1e-7, "{} vs {want}", parts.total);
        assert_eq!(parts.penalty, 0.0);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        use crate::nn::gradcheck::{central_diff_grad, rel_error};
        let mut rng = seeds::rng_for(6, &[8]);
        let ev = Array4::from_shape_simple_fn((3, 2, 2, 3), || seeds::normal(&mut rng));
        let labels = [1usize, 0, 1];
        let weights = [0.8, 1.7];
        let lambda = 0.01;
        let theta: Vec<f64> = ev.iter().copied().collect();
        let f = |t: &[f64]| {
            let e = Array4::from_shape_vec((3, 2, 2, 3), t.to_vec()).unwrap();
            evidence_objective(&e, &labels, &weights, lambda).unwrap().0.total
        };
        let fd = central_diff_grad(f, &theta);
        let (_, grad) = evidence_objective(&ev, &labels, &weights, lambda).unwrap();
        let analytic: Vec<f64> = grad.iter().copied().collect();
        let err = rel_error(&analytic, &fd);
        assert!(err < 1e-6, "gradient mismatch {err}");
    }

    fn toy_dataset() -> DatasetManifest {
        generate_synthetic_dataset(60, 2, 36, &[0, 4], 99).unwrap()
    }

    #[test]
    fn holdout_is_participant_disjoint_and_deterministic() {
        let data = toy_dataset();
        let split = crate::data::stratified_participant_split(&data, 3, 7).unwrap();
        let pool = split.train_indices(&data, 0);
        let (tr1, va1) = holdout_validation(&data, &pool, 0.2, 5, 0);
        let (tr2, va2) = holdout_validation(&data, &pool, 0.2, 5, 0);
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        assert!(!va1.is_empty() && !tr1.is_empty());
        let tp: BTreeSet<&str> = tr1
            .iter()
            .map(|&i| data.records[i].participant_id.as_str())
            .collect();
        let vp: BTreeSet<&str> = va1
            .iter()
            .map(|&i| data.records[i].participant_id.as_str())
            .collect();
        assert!(tp.is_disjoint(&vp));
        // Different folds draw different holdouts.
        let (_, va_other) = holdout_validation(&data, &pool, 0.2, 5, 1);
        assert_ne!(va1, va_other);
    }

    fn quick_cfg() -> FinetuneConfig {
        FinetuneConfig {
            head_lr: 5e-3,
            encoder_lr: 5e-4,
            head_only_epochs: 2,
            max_epochs: 4,
            patience: 10,
            folds: 3,
            batch_size: 16,
            seed: 21,
            ..FinetuneConfig::default()
        }
    }

    fn pretrained_checkpoint(data: &DatasetManifest, dir: &Path) -> Checkpoint {
        let cfg = crate::trainer::PretrainConfig {
            encoder: EncoderConfig {
                stem_channels: 4,
                stage_channels: [4, 6, 8, 8],
                ..EncoderConfig::default()
            },
            projector: crate::projector::ProjectorConfig {
                hidden_dims: vec![16],
                out_dim: 128,
            },
            batch_size: 16,
            base_lr: Some(0.05),
            stage_epochs: [2, 1, 1],
            warmup_epochs: 1,
            checkpoint_every: 10,
            augment_out_size: 36,
            ..crate::trainer::PretrainConfig::default()
        };
        crate::trainer::pretrain(data, &cfg, dir).unwrap();
        Checkpoint::load(&crate::trainer::final_ckpt_path(dir, 3)).unwrap()
    }

    #[test]
    fn encoder_is_untouched_while_head_trains_then_moves() {
        let data = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let ck = pretrained_checkpoint(&data, dir.path());
        let split = crate::data::stratified_participant_split(&data, 3, 7).unwrap();
        let pool = split.train_indices(&data, 0);
        let (train_idx, val_idx) = holdout_validation(&data, &pool, 0.2, 21, 0);

        // Head-only budget: encoder must end bit-identical to its start.
        let head_only = FinetuneConfig {
            max_epochs: 2,
            head_only_epochs: 2,
            ..quick_cfg()
        };
        let fm = train_fold(&ck, &data, &head_only, 0, &train_idx, &val_idx).unwrap();
        let mut reference = BagNetEncoder::build(ck.meta.encoder.clone(), 0).unwrap();
        restore_tensors(&ck.tensors, reference.params_mut(), Vec::new()).unwrap();
        restore_tensors(&ck.tensors, Vec::new(), reference.batchnorms_mut()).unwrap();
        reference.params_mut().iter_mut().for_each(|p| p.round_to_f32());
        for bn in reference.batchnorms_mut() {
            bn.running_mean.mapv_inplace(|v| v as f32 as f64);
            bn.running_var.mapv_inplace(|v| v as f32 as f64);
        }
        assert_eq!(
            params_checksum(fm.model.encoder.params()),
            params_checksum(reference.params()),
            "encoder drifted during the head-only phase"
        );

        // One unfrozen epoch moves it.
        let unfrozen = FinetuneConfig {
            max_epochs: 3,
            head_only_epochs: 2,
            ..quick_cfg()
        };
        let fm2 = train_fold(&ck, &data, &unfrozen, 0, &train_idx, &val_idx).unwrap();
        if fm2.best_epoch > 2 {
            assert_ne!(
                params_checksum(fm2.model.encoder.params()),
                params_checksum(reference.params())
            );
        }
        assert_eq!(fm2.epochs_run, 3);
    }

    #[test]
    fn finetune_reports_folds_and_writes_artifacts() {
        let data = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let ck = pretrained_checkpoint(&data, dir.path());
        let split = crate::data::stratified_participant_split(&data, 3, 7).unwrap();
        let out = dir.path().join("ft");
        let report = finetune(&ck, &data, &split, &quick_cfg(), &out).unwrap();
        assert_eq!(report.folds.len(), 3);
        for o in &report.folds {
            assert!(o.best_epoch >= 1 && o.best_epoch <= 4);
            assert!((0.0..=1.0).contains(&o.auroc));
            assert!(o.checkpoint.is_file());
            // Round trip: the saved model scores the fold identically.
            let model = classifier_from_checkpoint(&Checkpoint::load(&o.checkpoint).unwrap())
                .unwrap();
            let test_idx = split.test_indices(&data, o.fold);
            let labels = labeled(&data.records, &test_idx).unwrap();
            let again =
                auroc(&softmax_rows(&eval_logits(&model, &data, &test_idx).unwrap()), &labels)
                    .unwrap();
            assert!((again - o.auroc).abs() < 1e-12);
        }
        let csv = std::fs::read_to_string(out.join("folds.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("fold,best_epoch,auroc"));
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn same_seed_same_folds_different_seed_differs() {
        let data = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let ck = pretrained_checkpoint(&data, dir.path());
        let split = crate::data::stratified_participant_split(&data, 3, 7).unwrap();
        let cfg = FinetuneConfig { max_epochs: 2, head_only_epochs: 1, ..quick_cfg() };
        let r1 = finetune_folds(&ck, &data, &split, &cfg, &[0], &dir.path().join("a")).unwrap();
        let r2 = finetune_folds(&ck, &data, &split, &cfg, &[0], &dir.path().join("b")).unwrap();
        assert_eq!(r1.folds[0].auroc, r2.folds[0].auroc);
        let a = std::fs::read(&r1.folds[0].checkpoint).unwrap();
        let b = std::fs::read(&r2.folds[0].checkpoint).unwrap();
        assert_eq!(a, b, "same-seed fine-tunes should be byte-identical");
        let cfg3 = FinetuneConfig { seed: 22, ..cfg };
        let r3 = finetune_folds(&ck, &data, &split, &cfg3, &[0], &dir.path().join("c")).unwrap();
        let c = std::fs::read(&r3.folds[0].checkpoint).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fold_missing_a_class_is_an_error() {
        // Single-class manifest slips past n_classes but not the folds.
        let mut data = toy_dataset();
        for r in &mut data.records {
            r.label = Some(0);
        }
        let dir = tempfile::tempdir().unwrap();
        let ck = pretrained_checkpoint(&toy_dataset(), dir.path());
        let split = crate::data::stratified_participant_split(&data, 3, 7).unwrap();
        let err = finetune(&ck, &data, &split, &quick_cfg(), &dir.path().join("ft"))
            .unwrap_err();
        assert!(err.to_string().contains("class"), "{err}");
    }

    #[test]
    fn giant_penalty_flattens_evidence() {
        let data = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let ck = pretrained_checkpoint(&data, dir.path());
        let mut encoder = BagNetEncoder::build(ck.meta.encoder.clone(), 0).unwrap();
        restore_tensors(&ck.tensors, encoder.params_mut(), Vec::new()).unwrap();
        restore_tensors(&ck.tensors, Vec::new(), encoder.batchnorms_mut()).unwrap();
        let mut model = Classifier::attach_head(encoder, 2, 5).unwrap();

        let idx: Vec<usize> = (0..24).collect();
        let x = stack_images(&data, &idx).unwrap();
        let features = model.encoder.forward_eval(&x).unwrap();
        let labels = labeled(&data.records, &idx).unwrap();
        let weights = class_weights(&labels, 2).unwrap();

        let mean_abs = |m: &Classifier| {
            let ev = m.head.forward_eval(&features).unwrap();
            ev.iter().map(|v| v.abs()).sum::<f64>() / ev.len() as f64
        };
        let before = mean_abs(&model);
        let mut opt = Optimizer::new(OptimizerConfig::adamw(1e-4));
        for _ in 0..200 {
            let ev = model.head.forward_train(&features).unwrap();
            let (_, gev) = evidence_objective(&ev, &labels, &weights, 10.0).unwrap();
            for p in model.head.params_mut() {
                p.zero_grad();
            }
            model.head.backward(&gev);
            opt.step(&mut model.head.params_mut(), 0.01).unwrap();
        }
        let after = mean_abs(&model);
        assert!(
            after < 0.1 * before && after < 0.1,
            "evidence should be crushed: {before} -> {after}"
        );
        // Near-constant evidence means near-constant logits.
        let ev = model.head.forward_eval(&features).unwrap();
        let logits = Classifier::logits_from_evidence(&ev);
        let spread = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v))
            - logits.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        assert!(spread < 0.2, "logit spread {spread}");
    }
}
