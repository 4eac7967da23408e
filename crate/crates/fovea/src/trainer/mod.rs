//! Three-stage self-supervised pretraining: NT-Xent at 128-D, annealed
//! alignment of a fresh 2-D layer, then end-to-end Cauchy training at a
//! thousandth of the base rate.
//!
//! Determinism contract: every random choice (shuffling, augmentation,
//! initialization) derives from the master seed plus structural tags
//! (stage, epoch, image index), and all training state is rounded to f32
//! precision at stage entry and at every checkpoint write. A run resumed
//! from a checkpoint therefore reproduces the uninterrupted loss
//! trajectory bit for bit.

pub mod checkpoint;
pub mod log;
pub mod plan;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::data::{augment_pair, AugmentConfig, DatasetManifest};
use crate::encoder::{BagNetEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::{loss_gradient, ContrastiveBatch};
use crate::nn::{global_avg_pool, global_avg_pool_backward, BatchNorm2d, Param};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::projector::{Projector, ProjectorConfig};
use crate::seeds::{self, tag};

use checkpoint::{Checkpoint, CheckpointMeta, OptimizerMeta, RngMeta, FORMAT_VERSION};
use log::{LogRow, TrainLog};
use plan::{lr_at, StagePlan, TrainableSet};

/// Encoder plus projection head; the unit the pretrainer owns.
pub struct SslModel {
    pub encoder: BagNetEncoder,
    pub projector: Projector,
}

impl SslModel {
    pub fn build(
        encoder_cfg: EncoderConfig,
        projector_cfg: ProjectorConfig,
        seed: u64,
    ) -> Result<SslModel> {
        let encoder = BagNetEncoder::build(encoder_cfg, seed)?;
        let projector = Projector::build(encoder.config.feature_dim(), projector_cfg, seed)?;
        Ok(SslModel { encoder, projector })
    }

    /// Embeddings of NCHW images under evaluation-mode statistics.
    pub fn embed_eval(&self, images: &Array4<f64>) -> Result<ndarray::Array2<f64>> {
        let fm = self.encoder.forward_eval(images)?;
        let pooled = global_avg_pool(&fm);
        self.projector.project(&pooled)
    }

    pub fn round_to_f32(&mut self) {
        for p in self.encoder.params_mut() {
            p.round_to_f32();
        }
        for p in self.projector.params_mut() {
            p.round_to_f32();
        }
        for bn in self.encoder.batchnorms_mut() {
            bn.running_mean.mapv_inplace(|v| v as f32 as f64);
            bn.running_var.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.projector.zero_grad();
    }
}

/// Named tensors of a parameter set plus batch-norm running statistics.
pub fn collect_tensors<'a>(
    params: impl IntoIterator<Item = &'a Param>,
    batchnorms: impl IntoIterator<Item = &'a BatchNorm2d>,
) -> BTreeMap<String, ArrayD<f64>> {
    let mut out = BTreeMap::new();
    for p in params {
        out.insert(p.name.clone(), p.value.clone());
    }
    for bn in batchnorms {
        out.insert(
            format!("{}.running_mean", bn.name()),
            bn.running_mean.clone().into_dyn(),
        );
        out.insert(
            format!("{}.running_var", bn.name()),
            bn.running_var.clone().into_dyn(),
        );
    }
    out
}

/// Restore parameters and running statistics by name, with shape checks.
pub fn restore_tensors(
    tensors: &BTreeMap<String, ArrayD<f64>>,
    params: Vec<&mut Param>,
    batchnorms: Vec<&mut BatchNorm2d>,
) -> Result<()> {
    for p in params {
        let t = tensors
            .get(&p.name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(crate::error::shape_error(p.value.shape(), t.shape()));
        }
        p.value.assign(t);
    }
    for bn in batchnorms {
        let base = bn.name().to_string();
        for (suffix, stat) in [
            ("running_mean", &mut bn.running_mean),
            ("running_var", &mut bn.running_var),
        ] {
            let name = format!("{base}.{suffix}");
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))?;
            if t.len() != stat.len() {
                return Err(crate::error::shape_error(stat.shape(), t.shape()));
            }
            for (dst, src) in stat.iter_mut().zip(t.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(())
}

fn model_tensors(model: &SslModel) -> BTreeMap<String, ArrayD<f64>> {
    collect_tensors(
        model
            .encoder
            .params()
            .into_iter()
            .chain(model.projector.params()),
        model.encoder.batchnorms(),
    )
}

/// Options shared by all stages of one pretraining run.
#[derive(Debug, Clone)]
pub struct StageOpts {
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub config_snapshot: BTreeMap<String, serde_json::Value>,
}

/// Shuffled batch index lists for one epoch. The tail batch is kept when
/// it still holds at least two images (one negative pair), else dropped.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size + usize::from(n % batch_size >= 2)
}

/// Augment every image in `indices` and stack the views into an NCHW
/// tensor with rows 2k, 2k+1 holding image k's pair.
fn view_tensor(
    manifest: &DatasetManifest,
    indices: &[usize],
    augment: &AugmentConfig,
    master_seed: u64,
    stage: u8,
    epoch: usize,
) -> Result<Array4<f64>> {
    let s = augment.out_size;
    let mut x = Array4::<f64>::zeros((2 * indices.len(), 3, s, s));
    for (k, &idx) in indices.iter().enumerate() {
        let mut rng = seeds::rng_for(
            master_seed,
            &[tag::AUGMENT, stage as u64, epoch as u64, idx as u64],
        );
        let pair = augment_pair(&manifest.records[idx], augment, &mut rng)?;
        for (v, view) in [(2 * k, &pair.view_a), (2 * k + 1, &pair.view_b)] {
            for i in 0..s {
                for j in 0..s {
                    for c in 0..3 {
                        x[[v, c, i, j]] = view[[i, j, c]];
                    }
                }
            }
        }
    }
    Ok(x)
}

fn periodic_ckpt_path(out_dir: &Path, stage: u8, epoch: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("stage{stage}_epoch{epoch:04}.ckpt"))
}

pub fn final_ckpt_path(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("stage{stage}_final.ckpt"))
}

fn write_checkpoint(
    model: &mut SslModel,
    optimizer: &mut Optimizer,
    plan: &StagePlan,
    opts: &StageOpts,
    epoch: usize,
    path: &Path,
) -> Result<Checkpoint> {
    // Round live state to what f32 storage keeps, then snapshot.
    model.round_to_f32();
    optimizer.round_to_f32();
    let mut tensors = model_tensors(model);
    for (name, t) in optimizer.state_tensors() {
        tensors.insert(name, t);
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        stage_id: plan.stage_id,
        epoch,
        encoder: model.encoder.config.clone(),
        projector: Some(model.projector.config.clone()),
        n_classes: None,
        rng: RngMeta {
            master_seed: opts.master_seed,
        },
        optimizer: Some(OptimizerMeta {
            config: optimizer.config.clone(),
            step_counts: optimizer.step_counts(),
        }),
        config_snapshot: opts.config_snapshot.clone(),
        tensors: Vec::new(),
    };
    let ck = Checkpoint::new(meta, tensors);
    ck.save(path)?;
    Ok(ck)
}

/// Run one pretraining stage. Stage two accepts a 128-D projector and
/// anneals it to 2-D internally; stage three requires 2-D; stage one
/// requires 128-D. Returns the stage-final checkpoint.
pub fn run_stage(
    model: &mut SslModel,
    plan: &StagePlan,
    manifest: &DatasetManifest,
    opts: &StageOpts,
) -> Result<Checkpoint> {
    resume_stage(model, plan, manifest, opts, 0, None)
}

/// Like [`run_stage`] but starting from `start_epoch` with optional
/// restored optimizer state (the resume path).
pub fn resume_stage(
    model: &mut SslModel,
    plan: &StagePlan,
    manifest: &DatasetManifest,
    opts: &StageOpts,
    start_epoch: usize,
    optimizer_state: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    plan.validate()?;
    opts.augment.validate()?;
    let n = manifest.len();
    if n < opts.batch_size {
        return Err(Error::Training(format!(
            "dataset has {n} images, smaller than one batch of {}",
            opts.batch_size
        )));
    }
    match (plan.stage_id, model.projector.out_dim()) {
        (1, 128) | (2, 128) | (3, 2) => {}
        (s, d) => {
            return Err(Error::Data(format!(
                "stage {s} cannot start from a {d}-D projector \
                 (stages 1 and 2 need 128-D, stage 3 needs 2-D)"
            )));
        }
    }
    if plan.stage_id == 2 && start_epoch == 0 {
        model.projector = model.projector.anneal_to_2d(opts.master_seed)?;
    }

    // Stage entry: normalize to f32 precision, exactly what a checkpoint
    // load would produce.
    model.round_to_f32();
    let mut optimizer = Optimizer::new(opts.optimizer.clone());
    if let Some(ck) = optimizer_state {
        if let Some(meta) = &ck.meta.optimizer {
            optimizer.load_state(&ck.tensors, &meta.step_counts);
        }
    }

    let spe = steps_per_epoch(n, opts.batch_size);
    let mut log = TrainLog::open(&opts.out_dir.join("train_log.csv"))?;
    let loss_kind = plan.loss_kind();
    let mut periodic: Vec<PathBuf> = Vec::new();
    let mut last = None;

    for epoch in start_epoch..plan.epochs {
        let mut shuffle_rng =
            seeds::rng_for(opts.master_seed, &[tag::SHUFFLE, plan.stage_id as u64, epoch as u64]);
        let batches = epoch_batches(n, opts.batch_size, &mut shuffle_rng);
        debug_assert_eq!(batches.len(), spe);
        for (step, batch_indices) in batches.iter().enumerate() {
            let x = view_tensor(
                manifest,
                batch_indices,
                &opts.augment,
                opts.master_seed,
                plan.stage_id,
                epoch,
            )?;
            model.zero_grad();
            let loss = match plan.trainable {
                TrainableSet::All => {
                    let fm = model.encoder.forward_train(&x)?;
                    let (h, w) = (fm.shape()[2], fm.shape()[3]);
                    let pooled = global_avg_pool(&fm);
                    let z = model.projector.forward_train(&pooled)?;
                    let (loss, gz) = loss_gradient(loss_kind, &ContrastiveBatch::new(z)?)?;
                    let gp = model.projector.backward(&gz);
                    let gfm = global_avg_pool_backward(&gp, h, w);
                    model.encoder.backward(&gfm);
                    loss
                }
                TrainableSet::ProjectorLastLayerOnly => {
                    let fm = model.encoder.forward_eval(&x)?;
                    let pooled = global_avg_pool(&fm);
                    let z = model.projector.forward_train_last_only(&pooled)?;
                    let (loss, gz) = loss_gradient(loss_kind, &ContrastiveBatch::new(z)?)?;
                    model.projector.backward_last_only(&gz);
                    loss
                }
            };
            let lr = lr_at(plan, epoch as f64, spe, step)?;
            match plan.trainable {
                TrainableSet::All => {
                    let mut params = model.encoder.params_mut();
                    params.extend(model.projector.params_mut());
                    optimizer.step(&mut params, lr)?;
                }
                TrainableSet::ProjectorLastLayerOnly => {
                    let mut params = model.projector.last_layer_params_mut();
                    optimizer.step(&mut params, lr)?;
                }
            }
            log.push(&LogRow {
                stage: plan.stage_id,
                epoch,
                step,
                lr,
                loss,
            })?;
        }
        log.flush()?;

        let done = epoch + 1;
        if done < plan.epochs && opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 {
            let path = periodic_ckpt_path(&opts.out_dir, plan.stage_id, done);
            write_checkpoint(model, &mut optimizer, plan, opts, done, &path)?;
            periodic.push(path);
            while periodic.len() > 2 {
                let old = periodic.remove(0);
                let _ = std::fs::remove_file(old);
            }
        }
        last = Some(epoch);
    }
    let completed = last.map_or(start_epoch, |e| e + 1);
    let path = final_ckpt_path(&opts.out_dir, plan.stage_id);
    write_checkpoint(model, &mut optimizer, plan, opts, completed, &path)
}

/// Full pretraining configuration with paper-scale defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub augment_out_size: usize,
    pub batch_size: usize,
    /// Defaults to 0.075 * sqrt(batch_size) when absent.
    pub base_lr: Option<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub stage_epochs: [usize; 3],
    pub warmup_epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
            augment_out_size: 64,
            batch_size: 1024,
            base_lr: None,
            weight_decay: 1e-6,
            momentum: 0.9,
            optimizer: OptimizerKind::Lars,
            stage_epochs: [1000, 25, 200],
            warmup_epochs: 10,
            temperature: 0.5,
            seed: 0,
            checkpoint_every: 25,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projector.validate()?;
        AugmentConfig::simclr(self.augment_out_size).validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "contrastive batches need at least 2 images, got {}",
                self.batch_size
            )));
        }
        if self.stage_epochs.iter().any(|&e| e == 0) {
            return Err(Error::Config("every stage needs at least one epoch".into()));
        }
        if let Some(lr) = self.base_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("base_lr must be positive, got {lr}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
            .unwrap_or_else(|| plan::default_base_lr(self.batch_size))
    }

    pub fn stage_plans(&self) -> Result<[StagePlan; 3]> {
        let lr = self.base_lr();
        // Warmup must fit inside each warmup-cosine stage.
        let w1 = self.warmup_epochs.min(self.stage_epochs[0].saturating_sub(1));
        let w3 = self.warmup_epochs.min(self.stage_epochs[2].saturating_sub(1));
        Ok([
            StagePlan::stage1(self.stage_epochs[0], lr, w1, self.temperature)?,
            StagePlan::stage2(self.stage_epochs[1], lr)?,
            StagePlan::stage3(self.stage_epochs[2], lr, w3)?,
        ])
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Lars => OptimizerConfig::lars(self.weight_decay, self.momentum),
            OptimizerKind::SgdMomentum => OptimizerConfig::sgd(self.weight_decay, self.momentum),
            OptimizerKind::AdamW => OptimizerConfig::adamw(self.weight_decay),
        }
    }

    pub fn stage_opts(&self, out_dir: &Path) -> StageOpts {
        let snapshot = match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(map)) => map.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        StageOpts {
            batch_size: self.batch_size,
            augment: AugmentConfig::simclr(self.augment_out_size),
            optimizer: self.optimizer_config(),
            master_seed: self.seed,
            out_dir: out_dir.to_path_buf(),
            checkpoint_every: self.checkpoint_every,
            config_snapshot: snapshot,
        }
    }
}

/// Execute stages 1 -> 2 -> 3 from scratch. Returns the stage-3 final
/// checkpoint (2-D projector).
pub fn pretrain(
    manifest: &DatasetManifest,
    cfg: &PretrainConfig,
    out_dir: &Path,
) -> Result<Checkpoint> {
    let mut model = SslModel::build(cfg.encoder.clone(), cfg.projector.clone(), cfg.seed)?;
    let plans = cfg.stage_plans()?;
    let opts = cfg.stage_opts(out_dir);
    run_stage(&mut model, &plans[0], manifest, &opts)?;
    run_stage(&mut model, &plans[1], manifest, &opts)?;
    run_stage(&mut model, &plans[2], manifest, &opts)
}

/// Rebuild a model from a checkpoint (encoder + projector + running
/// stats; optimizer state stays in the checkpoint for `resume`).
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<SslModel> {
    let projector_cfg = ck
        .meta
        .projector
        .clone()
        .ok_or_else(|| Error::Data("checkpoint has no projector config".into()))?;
    let mut model =
        SslModel::build(ck.meta.encoder.clone(), projector_cfg, ck.meta.rng.master_seed)?;
    {
        let mut params = model.encoder.params_mut();
        params.extend(model.projector.params_mut());
        restore_tensors(&ck.tensors, params, Vec::new())?;
    }
    restore_tensors(&ck.tensors, Vec::new(), model.encoder.batchnorms_mut())?;
    Ok(model)
}

/// Resume pretraining from a mid- or end-of-stage checkpoint and carry it
/// through the remaining stages.
pub fn resume(
    ck_path: &Path,
    manifest: &DatasetManifest,
    cfg: &PretrainConfig,
    out_dir: &Path,
) -> Result<Checkpoint> {
    let ck = Checkpoint::load(ck_path)?;
    if ck.meta.encoder != cfg.encoder {
        return Err(Error::Config(
            "checkpoint encoder config does not match the run config".into(),
        ));
    }
    let mut model = model_from_checkpoint(&ck)?;
    let plans = cfg.stage_plans()?;
    let opts = cfg.stage_opts(out_dir);
    let stage_idx = (ck.meta.stage_id as usize).checked_sub(1).ok_or_else(|| {
        Error::Data(format!("checkpoint has invalid stage id {}", ck.meta.stage_id))
    })?;
    if stage_idx >= plans.len() {
        return Err(Error::Data(format!(
            "checkpoint has invalid stage id {}",
            ck.meta.stage_id
        )));
    }

    let mut result = None;
    // Finish the checkpoint's stage if it stopped mid-way.
    if ck.meta.epoch < plans[stage_idx].epochs {
        result = Some(resume_stage(
            &mut model,
            &plans[stage_idx],
            manifest,
            &opts,
            ck.meta.epoch,
            Some(&ck),
        )?);
    }
    for p in &plans[stage_idx + 1..] {
        result = Some(run_stage(&mut model, p, manifest, &opts)?);
    }
    result.ok_or_else(|| Error::Data("checkpoint is already past the final stage".into()))
}

/// Retrain the projector (all layers) on frozen encoder features with the
/// Cauchy loss; used to re-align the 2-D map after fine-tuning moves the
/// encoder. Taking the encoder by shared reference enforces the freeze.
pub fn realign_projector(
    encoder: &BagNetEncoder,
    projector: &mut Projector,
    manifest: &DatasetManifest,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<()> {
    augment.validate()?;
    let n = manifest.len();
    if n < batch_size {
        return Err(Error::Training(format!(
            "dataset has {n} images, smaller than one batch of {batch_size}"
        )));
    }
    let mut optimizer = Optimizer::new(OptimizerConfig::sgd(0.0, 0.9));
    for epoch in 0..epochs {
        let mut shuffle_rng = seeds::rng_for(seed, &[tag::SHUFFLE, 4, epoch as u64]);
        for batch_indices in epoch_batches(n, batch_size, &mut shuffle_rng) {
            let x = view_tensor(manifest, &batch_indices, augment, seed, 4, epoch)?;
            let fm = encoder.forward_eval(&x)?;
            let pooled = global_avg_pool(&fm);
            for p in projector.params_mut() {
                p.zero_grad();
            }
            let z = projector.forward_train(&pooled)?;
            let (_, gz) = loss_gradient(crate::loss::LossKind::Cauchy, &ContrastiveBatch::new(z)?)?;
            projector.backward(&gz);
            let mut params = projector.params_mut();
            optimizer.step(&mut params, lr)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::nn::params_checksum;

    fn tiny_cfg(out_dir_seed: u64) -> PretrainConfig {
        PretrainConfig {
            encoder: EncoderConfig {
                receptive_field: 9,
                input_channels: 3,
                stem_channels: 4,
                stage_channels: [4, 6, 8, 8],
                blocks_per_stage: [1, 1, 1, 1],
            },
            projector: ProjectorConfig {
                hidden_dims: vec![16],
                out_dim: 128,
            },
            augment_out_size: 36,
            batch_size: 8,
            base_lr: Some(0.05),
            weight_decay: 1e-6,
            momentum: 0.9,
            optimizer: OptimizerKind::Lars,
            stage_epochs: [3, 2, 2],
            warmup_epochs: 1,
            temperature: 0.5,
            seed: out_dir_seed,
            checkpoint_every: 2,
        }
    }

    fn tiny_data() -> DatasetManifest {
        generate_synthetic_dataset(16, 2, 36, &[0, 4], 77).unwrap()
    }

    #[test]
    fn steps_per_epoch_counts_usable_batches() {
        assert_eq!(steps_per_epoch(16, 8), 2);
        assert_eq!(steps_per_epoch(17, 8), 2); // tail of 1 dropped
        assert_eq!(steps_per_epoch(18, 8), 3); // tail of 2 kept
        assert_eq!(steps_per_epoch(8, 8), 1);
    }

    #[test]
    fn dataset_smaller_than_batch_is_error() {
        let cfg = tiny_cfg(1);
        let data = generate_synthetic_dataset(4, 2, 36, &[0, 4], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = pretrain(&data, &cfg, dir.path()).unwrap_err();
        assert!(err.to_string().contains("smaller than one batch"), "{err}");
    }

    #[test]
    fn wrong_stage_projector_is_rejected() {
        let cfg = tiny_cfg(2);
        let dir = tempfile::tempdir().unwrap();
        let mut model =
            SslModel::build(cfg.encoder.clone(), cfg.projector.clone(), cfg.seed).unwrap();
        let plans = cfg.stage_plans().unwrap();
        let opts = cfg.stage_opts(dir.path());
        // Stage 3 demands a 2-D projector.
        let err = run_stage(&mut model, &plans[2], &tiny_data(), &opts).unwrap_err();
        assert!(err.to_string().contains("stage 3"), "{err}");
    }

    #[test]
    fn stage2_freezes_encoder_and_projector_prefix() {
        let cfg = tiny_cfg(3);
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data();
        let mut model =
            SslModel::build(cfg.encoder.clone(), cfg.projector.clone(), cfg.seed).unwrap();
        let plans = cfg.stage_plans().unwrap();
        let opts = cfg.stage_opts(dir.path());
        run_stage(&mut model, &plans[0], &data, &opts).unwrap();

        let enc_before = params_checksum(model.encoder.params());
        let prefix_before: Vec<_> = {
            let ps = model.projector.params();
            ps[..ps.len() - 2].iter().map(|p| p.value.clone()).collect()
        };
        run_stage(&mut model, &plans[1], &data, &opts).unwrap();
        assert_eq!(enc_before, params_checksum(model.encoder.params()));
        let ps = model.projector.params();
        assert_eq!(model.projector.out_dim(), 2);
        for (before, after) in prefix_before.iter().zip(&ps[..ps.len() - 2]) {
            assert_eq!(before, &after.value, "prefix param {} moved", after.name);
        }
    }

    #[test]
    fn pretrain_runs_all_stages_and_loss_decreases() {
        let mut cfg = tiny_cfg(4);
        cfg.stage_epochs = [4, 2, 2];
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data();
        let ck = pretrain(&data, &cfg, dir.path()).unwrap();
        assert_eq!(ck.meta.stage_id, 3);
        assert_eq!(ck.meta.projector.as_ref().unwrap().out_dim, 2);

        let rows = log::read_log(&dir.path().join("train_log.csv")).unwrap();
        let means = log::epoch_means(&rows, 1);
        assert_eq!(means.len(), 4);
        // Loss at the last stage-1 epoch below the first.
        assert!(
            means.last().unwrap().1 < means[0].1,
            "stage-1 loss did not decrease: {means:?}"
        );
        // All three stages logged.
        for stage in [1u8, 2, 3] {
            assert!(rows.iter().any(|r| r.stage == stage));
        }
        // Stage-final checkpoints exist.
        for stage in [1u8, 2, 3] {
            assert!(final_ckpt_path(dir.path(), stage).is_file());
        }
    }

    #[test]
    fn two_runs_with_same_seed_match_and_different_seed_differs() {
        let cfg = tiny_cfg(5);
        let data = tiny_data();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        pretrain(&data, &cfg, d1.path()).unwrap();
        pretrain(&data, &cfg, d2.path()).unwrap();
        let l1 = log::read_log(&d1.path().join("train_log.csv")).unwrap();
        let l2 = log::read_log(&d2.path().join("train_log.csv")).unwrap();
        assert_eq!(l1, l2);
        let b1 = std::fs::read(final_ckpt_path(d1.path(), 3)).unwrap();
        let b2 = std::fs::read(final_ckpt_path(d2.path(), 3)).unwrap();
        assert_eq!(b1, b2);

        let mut cfg2 = cfg.clone();
        cfg2.seed = 99;
        let d3 = tempfile::tempdir().unwrap();
        pretrain(&data, &cfg2, d3.path()).unwrap();
        let l3 = log::read_log(&d3.path().join("train_log.csv")).unwrap();
        assert_ne!(l1, l3);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let mut cfg = tiny_cfg(6);
        cfg.stage_epochs = [4, 2, 2];
        cfg.checkpoint_every = 2; // mid-stage checkpoint at epoch 2 of 4
        let data = tiny_data();

        let d_full = tempfile::tempdir().unwrap();
        pretrain(&data, &cfg, d_full.path()).unwrap();

        // The full run left its stage-1 epoch-2 periodic checkpoint
        // behind; resuming from it must replay epochs 2..4 and the later
        // stages exactly.
        let midpoint = periodic_ckpt_path(d_full.path(), 1, 2);
        assert!(midpoint.is_file());

        let d_resume = tempfile::tempdir().unwrap();
        resume(&midpoint, &data, &cfg, d_resume.path()).unwrap();

        let full = log::read_log(&d_full.path().join("train_log.csv")).unwrap();
        let tail: Vec<_> = full
            .iter()
            .filter(|r| r.stage > 1 || r.epoch >= 2)
            .cloned()
            .collect();
        let post = log::read_log(&d_resume.path().join("train_log.csv")).unwrap();
        assert_eq!(tail.len(), post.len());
        for (a, b) in tail.iter().zip(&post) {
            assert_eq!(a, b, "trajectory diverged at {a:?} vs {b:?}");
        }

        // And the final checkpoints agree byte for byte.
        let b_full = std::fs::read(final_ckpt_path(d_full.path(), 3)).unwrap();
        let b_res = std::fs::read(final_ckpt_path(d_resume.path(), 3)).unwrap();
        assert_eq!(b_full, b_res);
    }

    #[test]
    fn checkpoint_cadence_keeps_latest_two() {
        let mut cfg = tiny_cfg(7);
        cfg.stage_epochs = [7, 2, 2];
        cfg.checkpoint_every = 1;
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut model =
            SslModel::build(cfg.encoder.clone(), cfg.projector.clone(), cfg.seed).unwrap();
        let plans = cfg.stage_plans().unwrap();
        let opts = cfg.stage_opts(dir.path());
        run_stage(&mut model, &plans[0], &data, &opts).unwrap();
        let kept: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        let periodic: Vec<_> = kept.iter().filter(|n| n.contains("epoch")).collect();
        assert_eq!(periodic.len(), 2, "kept: {kept:?}");
        assert!(kept.iter().any(|n| n == "stage1_final.ckpt"));
    }

    #[test]
    fn realign_changes_projector_but_not_encoder_and_noop_at_zero_epochs() {
        let cfg = tiny_cfg(8);
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let ck = pretrain(&data, &cfg, dir.path()).unwrap();
        let model = model_from_checkpoint(&ck).unwrap();
        let mut projector =
            model_from_checkpoint(&ck).unwrap().projector;
        let enc_sum = params_checksum(model.encoder.params());
        let proj_sum = params_checksum(projector.params());

        // Zero epochs: no-op.
        realign_projector(
            &model.encoder,
            &mut projector,
            &data,
            0,
            0.01,
            8,
            &AugmentConfig::simclr(36),
            5,
        )
        .unwrap();
        assert_eq!(proj_sum, params_checksum(projector.params()));

        realign_projector(
            &model.encoder,
            &mut projector,
            &data,
            2,
            0.01,
            8,
            &AugmentConfig::simclr(36),
            5,
        )
        .unwrap();
        assert_ne!(proj_sum, params_checksum(projector.params()));
        assert_eq!(enc_sum, params_checksum(model.encoder.params()));
    }
}
