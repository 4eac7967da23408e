//! Optimizers: LARS (large-batch pretraining), SGD with momentum (the
//! desk-scale fallback), and AdamW (fine-tuning).
//!
//! State is keyed by parameter name so it survives checkpointing and
//! param-set reordering. Biases and normalization parameters are exempt
//! from weight decay everywhere and from LARS trust scaling.
//!
//! All three use the same momentum convention: the buffer accumulates
//! learning-rate-scaled updates (`v = momentum·v + lr·step`), which keeps
//! LARS and the SGD fallback interchangeable under shared schedules.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lars,
    SgdMomentum,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn lars(weight_decay: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Lars,
            weight_decay,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(weight_decay: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            ..Self::lars(weight_decay, momentum)
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            weight_decay,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct SlotState {
    v: ArrayD<f64>,
    m: Option<ArrayD<f64>>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    state: BTreeMap<String, SlotState>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update to the given parameters at learning rate `lr`.
    /// Gradients are read from each `Param` and left untouched (callers
    /// zero them before the next accumulation).
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) -> Result<()> {
        for p in params.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
        }
        for p in params.iter_mut() {
            match self.config.kind {
                OptimizerKind::Lars => self.lars_one(p, lr),
                OptimizerKind::SgdMomentum => self.sgd_one(p, lr),
                OptimizerKind::AdamW => self.adamw_one(p, lr),
            }
        }
        Ok(())
    }

    fn slot(&mut self, p: &Param, with_m: bool) -> &mut SlotState {
        self.state.entry(p.name.clone()).or_insert_with(|| SlotState {
            v: ArrayD::zeros(p.value.raw_dim()),
            m: with_m.then(|| ArrayD::zeros(p.value.raw_dim())),
            t: 0,
        })
    }

    fn lars_one(&mut self, p: &mut Param, lr: f64) {
        let wd = self.config.weight_decay;
        let momentum = self.config.momentum;
        let slot = self.slot(p, false);
        let update = match p.kind {
            ParamKind::Weight => {
                let wn = l2(&p.value);
                let gn = l2(&p.grad);
                if wn > 0.0 && gn > 0.0 {
                    let local_lr = lr * wn / (gn + wd * wn);
                    let mut u = p.grad.clone();
                    u.zip_mut_with(&p.value, |g, &w| *g = local_lr * (*g + wd * w));
                    u
                } else {
                    // Degenerate norms: plain scaled gradient, so a zero
                    // gradient is an exact fixed point.
                    p.grad.mapv(|g| lr * g)
                }
            }
            ParamKind::BiasOrGain => p.grad.mapv(|g| lr * g),
        };
        slot.v.zip_mut_with(&update, |v, &u| *v = momentum * *v + u);
        p.value.zip_mut_with(&slot.v, |w, &v| *w -= v);
    }

    fn sgd_one(&mut self, p: &mut Param, lr: f64) {
        let wd = match p.kind {
            ParamKind::Weight => self.config.weight_decay,
            ParamKind::BiasOrGain => 0.0,
        };
        let momentum = self.config.momentum;
        let slot = self.slot(p, false);
        let mut update = p.grad.clone();
        update.zip_mut_with(&p.value, |g, &w| *g = lr * (*g + wd * w));
        slot.v.zip_mut_with(&update, |v, &u| *v = momentum * *v + u);
        p.value.zip_mut_with(&slot.v, |w, &v| *w -= v);
    }

    fn adamw_one(&mut self, p: &mut Param, lr: f64) {
        let wd = match p.kind {
            ParamKind::Weight => self.config.weight_decay,
            ParamKind::BiasOrGain => 0.0,
        };
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let slot = self.slot(p, true);
        slot.t += 1;
        let t = slot.t as i32;
        let m = slot.m.as_mut().expect("adamw slot has first moment");
        m.zip_mut_with(&p.grad, |mv, &g| *mv = b1 * *mv + (1.0 - b1) * g);
        slot.v
            .zip_mut_with(&p.grad, |vv, &g| *vv = b2 * *vv + (1.0 - b2) * g * g);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let m = slot.m.as_ref().unwrap();
        let v = &slot.v;
        ndarray::Zip::from(&mut p.value)
            .and(m)
            .and(v)
            .for_each(|w, &mv, &vv| {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            });
    }

    /// Named state tensors in deterministic (sorted) order, for the
    /// checkpoint container.
    pub fn state_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (name, slot) in &self.state {
            out.push((format!("opt.{name}.v"), slot.v.clone()));
            if let Some(m) = &slot.m {
                out.push((format!("opt.{name}.m"), m.clone()));
            }
        }
        out
    }

    /// Per-slot step counts (AdamW bias correction), sorted by name.
    pub fn step_counts(&self) -> BTreeMap<String, u64> {
        self.state.iter().map(|(k, s)| (k.clone(), s.t)).collect()
    }

    pub fn load_state(
        &mut self,
        tensors: &BTreeMap<String, ArrayD<f64>>,
        step_counts: &BTreeMap<String, u64>,
    ) {
        self.state.clear();
        for (key, v) in tensors {
            if let Some(name) = key.strip_prefix("opt.").and_then(|k| k.strip_suffix(".v")) {
                let m = tensors.get(&format!("opt.{name}.m")).cloned();
                let t = step_counts.get(name).copied().unwrap_or(0);
                self.state.insert(
                    name.to_string(),
                    SlotState {
                        v: v.clone(),
                        m,
                        t,
                    },
                );
            }
        }
    }

    /// Round state to f32 precision, mirroring what checkpoint storage
    /// keeps, so resumed and uninterrupted runs continue identically.
    pub fn round_to_f32(&mut self) {
        for slot in self.state.values_mut() {
            slot.v.mapv_inplace(|v| v as f32 as f64);
            if let Some(m) = &mut slot.m {
                m.mapv_inplace(|v| v as f32 as f64);
            }
        }
    }
}

fn l2(a: &ArrayD<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    fn scalar_param(w: f64, g: f64, kind: ParamKind) -> Param {
        let mut p = Param::new("w", kind, arr1(&[w]).into_dyn());
        p.grad.fill(g);
        p
    }

    #[test]
    fn lars_scalar_hand_case() {
        // w=1, g=1, wd=0, momentum=0, lr=0.1: trust ratio 1 -> w = 0.9.
        let mut opt = Optimizer::new(OptimizerConfig::lars(0.0, 0.0));
        let mut p = scalar_param(1.0, 1.0, ParamKind::Weight);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert_abs_diff_eq!(p.value[[0]], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn lars_scalar_with_weight_decay() {
        // w=2, g=0.5, wd=0.1, lr=0.1: local_lr = 0.1*2/(0.5+0.2) = 0.2/0.7,
        // update = local_lr*(0.5+0.2) = 0.2 -> w = 1.8.
        let mut opt = Optimizer::new(OptimizerConfig::lars(0.1, 0.0));
        let mut p = scalar_param(2.0, 0.5, ParamKind::Weight);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert_abs_diff_eq!(p.value[[0]], 1.8, epsilon = 1e-15);
    }

    #[test]
    fn lars_zero_grad_zero_momentum_is_fixed_point() {
        let mut opt = Optimizer::new(OptimizerConfig::lars(1e-2, 0.9));
        let mut p = scalar_param(3.0, 0.0, ParamKind::Weight);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert_abs_diff_eq!(p.value[[0]], 3.0, epsilon = 0.0);
    }

    #[test]
    fn lars_bias_gets_plain_update() {
        // Bias: no weight decay, no trust scaling -> w -= lr*g.
        let mut opt = Optimizer::new(OptimizerConfig::lars(0.5, 0.0));
        let mut p = scalar_param(1.0, 2.0, ParamKind::BiasOrGain);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert_abs_diff_eq!(p.value[[0]], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn lars_is_deterministic() {
        let run = || {
            let mut opt = Optimizer::new(OptimizerConfig::lars(1e-6, 0.9));
            let mut p = Param::new(
                "w",
                ParamKind::Weight,
                arr1(&[0.3, -1.2, 2.2]).into_dyn(),
            );
            for i in 0..5 {
                p.grad.assign(&arr1(&[0.1 * i as f64, -0.2, 0.05]).into_dyn());
                opt.step(&mut [&mut p], 0.01).unwrap();
            }
            p.value
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_error() {
        let mut opt = Optimizer::new(OptimizerConfig::lars(0.0, 0.0));
        let mut p = scalar_param(1.0, f64::NAN, ParamKind::Weight);
        let err = opt.step(&mut [&mut p], 0.1).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        // Parameter untouched on error.
        assert_abs_diff_eq!(p.value[[0]], 1.0, epsilon = 0.0);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // lr=0.5, m=0.9, g=0.2 twice: v1=0.1, w=0.9; v2=0.19, w=0.71.
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.0, 0.9));
        let mut p = scalar_param(1.0, 0.2, ParamKind::Weight);
        opt.step(&mut [&mut p], 0.5).unwrap();
        assert_abs_diff_eq!(p.value[[0]], 0.9, epsilon = 1e-15);
        p.grad.fill(0.2);
        opt.step(&mut [&mut p], 0.5).unwrap();
        assert_abs_diff_eq!(p.value[[0]], 0.71, epsilon = 1e-15);
    }

    #[test]
    fn adamw_first_step_and_decoupled_decay() {
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.0));
        let mut p = scalar_param(1.0, 1.0, ParamKind::Weight);
        opt.step(&mut [&mut p], 0.1).unwrap();
        // First step: m_hat = g, v_hat = g^2 -> step ~= lr.
        assert_abs_diff_eq!(p.value[[0]], 1.0 - 0.1 / (1.0 + 1e-8), epsilon = 1e-12);

        let mut opt2 = Optimizer::new(OptimizerConfig::adamw(0.01));
        let mut q = scalar_param(1.0, 1.0, ParamKind::Weight);
        opt2.step(&mut [&mut q], 0.1).unwrap();
        assert_abs_diff_eq!(
            q.value[[0]],
            1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * 0.01,
            epsilon = 1e-12
        );

        // Bias excluded from decay: identical to the wd=0 case.
        let mut b = scalar_param(1.0, 1.0, ParamKind::BiasOrGain);
        let mut opt3 = Optimizer::new(OptimizerConfig::adamw(0.01));
        opt3.step(&mut [&mut b], 0.1).unwrap();
        assert_abs_diff_eq!(b.value[[0]], 1.0 - 0.1 / (1.0 + 1e-8), epsilon = 1e-12);
    }

    #[test]
    fn state_roundtrip_preserves_trajectory() {
        let grads = [[0.3, -0.1], [0.2, 0.4], [-0.5, 0.2]];
        let run_full = |cfg: OptimizerConfig| {
            let mut opt = Optimizer::new(cfg);
            let mut p = Param::new("w", ParamKind::Weight, arr1(&[1.0, -1.0]).into_dyn());
            for g in grads {
                p.grad.assign(&arr1(&g).into_dyn());
                opt.step(&mut [&mut p], 0.05).unwrap();
            }
            p.value
        };
        let run_split = |cfg: OptimizerConfig| {
            let mut opt = Optimizer::new(cfg.clone());
            let mut p = Param::new("w", ParamKind::Weight, arr1(&[1.0, -1.0]).into_dyn());
            p.grad.assign(&arr1(&grads[0]).into_dyn());
            opt.step(&mut [&mut p], 0.05).unwrap();
            // Serialize, rebuild, continue.
            let tensors: BTreeMap<_, _> = opt.state_tensors().into_iter().collect();
            let counts = opt.step_counts();
            let mut opt2 = Optimizer::new(cfg);
            opt2.load_state(&tensors, &counts);
            for g in &grads[1..] {
                p.grad.assign(&arr1(g).into_dyn());
                opt2.step(&mut [&mut p], 0.05).unwrap();
            }
            p.value
        };
        for cfg in [
            OptimizerConfig::lars(1e-4, 0.9),
            OptimizerConfig::sgd(1e-4, 0.9),
            OptimizerConfig::adamw(1e-4),
        ] {
            assert_eq!(run_full(cfg.clone()), run_split(cfg));
        }
    }
}
