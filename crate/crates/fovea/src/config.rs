//! Layered run configuration.
//!
//! Settings live in a flat map of dotted keys ("stage1.epochs") and are
//! resolved in three layers: compiled defaults, then an optional TOML
//! file, then explicit `key=value` overrides. Later layers win. Unknown
//! keys and type mismatches are rejected up front, and the fully
//! resolved map is written next to every run's outputs so results stay
//! attributable to exact settings.

use std::collections::BTreeMap;
use std::path::Path;

use toml::Value;

use crate::classifier::FinetuneConfig;
use crate::data::AugmentConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::ProbeConfig;
use crate::optim::OptimizerKind;
use crate::projector::ProjectorConfig;
use crate::trainer::PretrainConfig;

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

fn default_entries() -> Vec<(&'static str, Value)> {
    fn ints(v: &[i64]) -> Value {
        Value::Array(v.iter().map(|&x| Value::Integer(x)).collect())
    }
    fn floats(v: &[f64]) -> Value {
        Value::Array(v.iter().map(|&x| Value::Float(x)).collect())
    }
    vec![
        ("seed", Value::Integer(0)),
        ("data.n_images", Value::Integer(2000)),
        ("data.n_classes", Value::Integer(3)),
        ("data.image_size", Value::Integer(64)),
        // Empty means the built-in progression for data.n_classes.
        ("data.lesions_per_grade", ints(&[])),
        ("encoder.receptive_field", Value::Integer(9)),
        ("encoder.stem_channels", Value::Integer(16)),
        ("encoder.stage_channels", ints(&[16, 32, 64, 64])),
        ("encoder.blocks_per_stage", ints(&[1, 1, 1, 1])),
        ("projector.hidden_dims", ints(&[128])),
        ("projector.out_dim", Value::Integer(128)),
        ("pretrain.batch_size", Value::Integer(1024)),
        // 0 means the batch-size rule 0.075 * sqrt(batch).
        ("pretrain.base_lr", Value::Float(0.0)),
        ("pretrain.weight_decay", Value::Float(1e-6)),
        ("pretrain.momentum", Value::Float(0.9)),
        ("pretrain.optimizer", Value::String("lars".into())),
        ("pretrain.temperature", Value::Float(0.5)),
        ("pretrain.warmup_epochs", Value::Integer(10)),
        ("pretrain.checkpoint_every", Value::Integer(25)),
        ("pretrain.out_size", Value::Integer(64)),
        ("stage1.epochs", Value::Integer(1000)),
        ("stage2.epochs", Value::Integer(25)),
        ("stage3.epochs", Value::Integer(200)),
        ("finetune.head_lr", Value::Float(1e-4)),
        ("finetune.encoder_lr", Value::Float(1e-5)),
        ("finetune.weight_decay", Value::Float(1e-4)),
        ("finetune.head_only_epochs", Value::Integer(5)),
        ("finetune.max_epochs", Value::Integer(50)),
        ("finetune.patience", Value::Integer(10)),
        ("finetune.lambda", Value::Float(0.0)),
        ("finetune.batch_size", Value::Integer(64)),
        ("finetune.val_fraction", Value::Float(0.2)),
        ("split.folds", Value::Integer(5)),
        ("probe.alpha", Value::Float(0.5)),
        ("probe.strengths", floats(&[1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2])),
        ("eval.knn_k", Value::Integer(15)),
        ("eval.precision_k", Value::Integer(10)),
        ("sweep.lambdas", floats(&[0.0, 1e-4, 1e-3, 1e-2])),
        ("sweep.tolerance", Value::Float(0.01)),
        // 0 means all folds.
        ("sweep.fold_cap", Value::Integer(0)),
    ]
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Coerce `new` to the type of the default at `key`; integers widen to
/// floats where a float is expected, and array elements coerce
/// elementwise.
fn coerce(key: &str, default: &Value, new: Value) -> Result<Value> {
    match (default, new) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Float(_), v @ Value::Float(_)) => Ok(v),
        (Value::Integer(_), v @ Value::Integer(_)) => Ok(v),
        (Value::String(_), v @ Value::String(_)) => Ok(v),
        (Value::Boolean(_), v @ Value::Boolean(_)) => Ok(v),
        (Value::Array(d), Value::Array(items)) => {
            let template = d.first().cloned().unwrap_or(Value::Integer(0));
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                out.push(coerce(key, &template, item)?);
            }
            Ok(Value::Array(out))
        }
        (d, v) => Err(Error::Config(format!(
            "{key} expects a {}, got {} ({v})",
            type_name(d),
            type_name(&v),
        ))),
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Table(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: default_entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl Config {
    /// Defaults, optionally layered with a TOML file, then overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(path) = file {
            cfg.load_file(path)?;
        }
        for pair in overrides {
            let (key, raw) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {pair:?} is not of the form key=value"))
            })?;
            cfg.set(key.trim(), raw.trim())?;
        }
        Ok(cfg)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let table: Value = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (key, value) in flat {
            self.insert(&key, value)?;
        }
        Ok(())
    }

    /// Set one key from its raw command-line text. The value parses as a
    /// TOML literal when possible and falls back to a bare string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let value = format!("v = {raw}")
            .parse::<Value>()
            .ok()
            .and_then(|t| t.get("v").cloned())
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.insert(key, value)
    }

    fn insert(&mut self, key: &str, value: Value) -> Result<()> {
        let default = self
            .values
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown setting {key}")))?
            .clone();
        let coerced = coerce(key, &default, value)?;
        self.values.insert(key.to_string(), coerced);
        Ok(())
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        match self.values.get(key) {
            Some(Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
            Some(Value::Integer(i)) => {
                Err(Error::Config(format!("{key} must be nonnegative, got {i}")))
            }
            other => Err(self.type_err(key, "integer", other)),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        match self.values.get(key) {
            Some(Value::Float(f)) => Ok(*f),
            Some(Value::Integer(i)) => Ok(*i as f64),
            other => Err(self.type_err(key, "float", other)),
        }
    }

    pub fn string(&self, key: &str) -> Result<&str> {
        match self.values.get(key) {
            Some(Value::String(s)) => Ok(s),
            other => Err(self.type_err(key, "string", other)),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        match self.values.get(key) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                    _ => Err(self.type_err(key, "nonnegative integer array", Some(v))),
                })
                .collect(),
            other => Err(self.type_err(key, "array", other)),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        match self.values.get(key) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    _ => Err(self.type_err(key, "float array", Some(v))),
                })
                .collect(),
            other => Err(self.type_err(key, "array", other)),
        }
    }

    fn type_err(&self, key: &str, want: &str, got: Option<&Value>) -> Error {
        match got {
            Some(v) => Error::Config(format!("{key} must be a {want}, got {}", type_name(v))),
            None => Error::Config(format!("unknown setting {key}")),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        Ok(self.usize("seed")? as u64)
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let stages = self.usize_list("encoder.stage_channels")?;
        let blocks = self.usize_list("encoder.blocks_per_stage")?;
        let arr = |v: Vec<usize>, key: &str| -> Result<[usize; 4]> {
            v.try_into()
                .map_err(|_| Error::Config(format!("{key} needs exactly 4 entries")))
        };
        let cfg = EncoderConfig {
            receptive_field: self.usize("encoder.receptive_field")?,
            input_channels: 3,
            stem_channels: self.usize("encoder.stem_channels")?,
            stage_channels: arr(stages, "encoder.stage_channels")?,
            blocks_per_stage: arr(blocks, "encoder.blocks_per_stage")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn projector_config(&self) -> Result<ProjectorConfig> {
        let cfg = ProjectorConfig {
            hidden_dims: self.usize_list("projector.hidden_dims")?,
            out_dim: self.usize("projector.out_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let optimizer = match self.string("pretrain.optimizer")? {
            "lars" => OptimizerKind::Lars,
            "sgd" => OptimizerKind::SgdMomentum,
            "adamw" => OptimizerKind::AdamW,
            other => {
                return Err(Error::Config(format!(
                    "pretrain.optimizer must be lars, sgd or adamw, got {other:?}"
                )))
            }
        };
        let base_lr = self.f64("pretrain.base_lr")?;
        let cfg = PretrainConfig {
            encoder: self.encoder_config()?,
            projector: self.projector_config()?,
            augment_out_size: self.usize("pretrain.out_size")?,
            batch_size: self.usize("pretrain.batch_size")?,
            base_lr: (base_lr > 0.0).then_some(base_lr),
            weight_decay: self.f64("pretrain.weight_decay")?,
            momentum: self.f64("pretrain.momentum")?,
            optimizer,
            stage_epochs: [
                self.usize("stage1.epochs")?,
                self.usize("stage2.epochs")?,
                self.usize("stage3.epochs")?,
            ],
            warmup_epochs: self.usize("pretrain.warmup_epochs")?,
            temperature: self.f64("pretrain.temperature")?,
            seed: self.seed()?,
            checkpoint_every: self.usize("pretrain.checkpoint_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let cfg = FinetuneConfig {
            head_lr: self.f64("finetune.head_lr")?,
            encoder_lr: self.f64("finetune.encoder_lr")?,
            weight_decay: self.f64("finetune.weight_decay")?,
            head_only_epochs: self.usize("finetune.head_only_epochs")?,
            max_epochs: self.usize("finetune.max_epochs")?,
            patience: self.usize("finetune.patience")?,
            lambda: self.f64("finetune.lambda")?,
            folds: self.usize("split.folds")?,
            batch_size: self.usize("finetune.batch_size")?,
            val_fraction: self.f64("finetune.val_fraction")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let cfg = ProbeConfig {
            alpha: self.f64("probe.alpha")?,
            strengths: self.f64_list("probe.strengths")?,
            ..ProbeConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment_config(&self) -> Result<AugmentConfig> {
        let cfg = AugmentConfig::simclr(self.usize("pretrain.out_size")?);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved map as sorted `key = value` lines (valid TOML).
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("\"{k}\" = {v}\n"));
        }
        out
    }

    /// Write the resolved configuration into a run's output directory.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml_string())?;
        Ok(())
    }

    /// JSON view for checkpoint provenance.
    pub fn snapshot(&self) -> BTreeMap<String, serde_json::Value> {
        self.values
            .iter()
            .map(|(k, v)| {
                let j = serde_json::to_value(v.clone())
                    .unwrap_or(serde_json::Value::String(v.to_string()));
                (k.clone(), j)
            })
            .collect()
    }
}
