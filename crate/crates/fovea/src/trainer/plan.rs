//! Stage plans for the three-phase pretraining schedule and the learning
//! rate curves they use.
//!
//! Stage one trains everything with NT-Xent under warmup-cosine; stage
//! two trains only the freshly annealed 2-D output layer with the Cauchy
//! loss at a constant rate; stage three trains everything with the Cauchy
//! loss at the base rate divided by 1000.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    All,
    ProjectorLastLayerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    WarmupCosine { warmup_epochs: usize },
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_id: u8,
    pub loss_kind_name: String,
    pub temperature: f64,
    pub trainable: TrainableSet,
    pub epochs: usize,
    pub base_lr: f64,
    pub schedule: LrSchedule,
}

impl StagePlan {
    pub fn stage1(epochs: usize, base_lr: f64, warmup_epochs: usize, temperature: f64) -> Result<Self> {
        let plan = StagePlan {
            stage_id: 1,
            loss_kind_name: "nt_xent".into(),
            temperature,
            trainable: TrainableSet::All,
            epochs,
            base_lr,
            schedule: LrSchedule::WarmupCosine { warmup_epochs },
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn stage2(epochs: usize, base_lr: f64) -> Result<Self> {
        let plan = StagePlan {
            stage_id: 2,
            loss_kind_name: "cauchy".into(),
            temperature: 0.0,
            trainable: TrainableSet::ProjectorLastLayerOnly,
            epochs,
            base_lr,
            schedule: LrSchedule::Constant,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// `base_lr` is the run's base rate; the stage stores it divided by
    /// 1000 as the schedule's peak.
    pub fn stage3(epochs: usize, base_lr: f64, warmup_epochs: usize) -> Result<Self> {
        let plan = StagePlan {
            stage_id: 3,
            loss_kind_name: "cauchy".into(),
            temperature: 0.0,
            trainable: TrainableSet::All,
            epochs,
            base_lr: base_lr / 1000.0,
            schedule: LrSchedule::WarmupCosine { warmup_epochs },
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss_kind_name.as_str() {
            "nt_xent" => LossKind::NtXent {
                temperature: self.temperature,
            },
            _ => LossKind::Cauchy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(format!(
                "stage {} must run at least one epoch",
                self.stage_id
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "stage {} base_lr must be positive, got {}",
                self.stage_id, self.base_lr
            )));
        }
        if let LrSchedule::WarmupCosine { warmup_epochs } = self.schedule {
            if warmup_epochs >= self.epochs {
                return Err(Error::Config(format!(
                    "stage {}: warmup ({warmup_epochs}) must be shorter than the stage ({} epochs)",
                    self.stage_id, self.epochs
                )));
            }
        }
        let ok = match self.stage_id {
            1 => {
                self.loss_kind_name == "nt_xent"
                    && self.trainable == TrainableSet::All
                    && matches!(self.schedule, LrSchedule::WarmupCosine { .. })
                    && self.temperature > 0.0
            }
            2 => {
                self.loss_kind_name == "cauchy"
                    && self.trainable == TrainableSet::ProjectorLastLayerOnly
                    && self.schedule == LrSchedule::Constant
            }
            3 => {
                self.loss_kind_name == "cauchy"
                    && self.trainable == TrainableSet::All
                    && matches!(self.schedule, LrSchedule::WarmupCosine { .. })
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "stage {} plan violates the stage schedule contract",
                self.stage_id
            )));
        }
        Ok(())
    }
}

/// The default base learning rate: square-root batch scaling,
/// 0.075 * sqrt(batch_size). At the paper-scale batch of 1024 this is
/// 0.075 * 32 = 2.4.
pub fn default_base_lr(batch_size: usize) -> f64 {
    0.075 * (batch_size as f64).sqrt()
}

/// Learning rate at a fractional position within the stage. `epoch` is
/// the current epoch index and `step` the step within it; the schedule is
/// evaluated at `epoch + step / steps_per_epoch`.
pub fn lr_at(plan: &StagePlan, epoch: f64, steps_per_epoch: usize, step: usize) -> Result<f64> {
    if steps_per_epoch == 0 {
        return Err(Error::Config("steps_per_epoch must be positive".into()));
    }
    if !(0.0 <= epoch && epoch < plan.epochs as f64) {
        return Err(Error::Config(format!(
            "epoch {epoch} outside [0, {})",
            plan.epochs
        )));
    }
    let e = epoch + step as f64 / steps_per_epoch as f64;
    Ok(match plan.schedule {
        LrSchedule::Constant => plan.base_lr,
        LrSchedule::WarmupCosine { warmup_epochs } => {
            let warm = warmup_epochs as f64;
            if e < warm {
                plan.base_lr * e / warm
            } else {
                let progress = (e - warm) / (plan.epochs as f64 - warm);
                plan.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    })
}
