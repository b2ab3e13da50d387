//! Experiment configuration files and content hashes.
//!
//! A config is a TOML file with `[run]`, `[data]`, `[model]`, `[train]` and `[qat]`
//! sections. Every field has a default, so an empty file is a valid config. Unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AdaSettings, Divergence, NormDomain, SIMAM_LAMBDA};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, QuantSetup};
use crate::quant::QuantizerKind;

/// Hex characters kept from the SHA-256 digest.
pub const HASH_LEN: usize = 16;

/// SHA-256 of the JSON encoding of `value`, truncated to [`HASH_LEN`] hex characters.
/// Struct fields serialize in declaration order, so the encoding is canonical for a type.
pub fn stable_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize");
    hex_prefix(&Sha256::digest(&json))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex_prefix(&Sha256::digest(bytes))
}

fn hex_prefix(digest: &[u8]) -> String {
    digest
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>()
        .chars()
        .take(HASH_LEN)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_size: usize,
    pub eval_size: usize,
    /// Scenes used to calibrate quantizers, taken from the start of the training set.
    pub calibration_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_size: 2000,
            eval_size: 500,
            calibration_size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Weight of the squared center error.
    pub beta: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta: 10.0,
            lr_decay_epochs: vec![10],
            lr_decay: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QatSection {
    pub epochs: usize,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub quantizer: QuantizerKind,
    pub extremes_8bit: bool,
    /// QAT learning rate as a multiple of `train.lr`.
    pub lr_scale: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub ada: Divergence,
    pub ada_weight: f64,
    pub ada_domain: NormDomain,
    pub simam_lambda: f64,
}

impl Default for QatSection {
    fn default() -> Self {
        QatSection {
            epochs: 6,
            weight_bits: 4,
            act_bits: 4,
            quantizer: QuantizerKind::Lsq,
            extremes_8bit: true,
            lr_scale: 0.3,
            lr_decay_epochs: vec![4],
            ada: Divergence::None,
            ada_weight: 1.0,
            ada_domain: NormDomain::PerChannel,
            simam_lambda: SIMAM_LAMBDA,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub qat: QatSection,
}

/// Largest seed TOML can store (its integers are signed 64-bit).
pub const MAX_SEED: u64 = i64::MAX as u64;

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Panics on a seed above [`MAX_SEED`], which [`validate`](Self::validate) rejects.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config types serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model.validate()?;
        if self.run.seed > MAX_SEED {
            return bad(format!("seed {} exceeds {MAX_SEED}", self.run.seed));
        }
        if self.data.train_size == 0 || self.data.eval_size == 0 {
            return bad("data sizes must be positive".into());
        }
        if self.data.calibration_size == 0 {
            return bad("calibration_size must be positive".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.train.lr > 0.0) || !(self.qat.lr_scale > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.train.beta >= 0.0) {
            return bad("beta must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !(self.train.lr_decay > 0.0) {
            return bad("lr_decay must be positive".into());
        }
        for bits in [self.qat.weight_bits, self.qat.act_bits] {
            if !(2..=8).contains(&bits) {
                return bad(format!("bit-width {bits} outside [2, 8]"));
            }
        }
        if !(self.qat.ada_weight >= 0.0) || !(self.qat.simam_lambda > 0.0) {
            return bad("ada_weight must be non-negative and simam_lambda positive".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        stable_hash(self)
    }

    pub fn quant_setup(&self) -> QuantSetup {
        QuantSetup {
            weight_bits: self.qat.weight_bits,
            act_bits: self.qat.act_bits,
            kind: self.qat.quantizer,
            extremes_8bit: self.qat.extremes_8bit,
        }
    }

    /// `None` when distillation is off or weighted to zero.
    pub fn ada_settings(&self) -> Option<AdaSettings> {
        (self.qat.ada != Divergence::None && self.qat.ada_weight > 0.0).then_some(AdaSettings {
            metric: self.qat.ada,
            lambda: self.qat.simam_lambda,
            weight: self.qat.ada_weight,
            domain: self.qat.ada_domain,
        })
    }

    /// The part of the config that determines the full-precision teacher.
    pub fn teacher_config(&self) -> TrainConfig {
        TrainConfig {
            qat: QatSection::default(),
            ..self.clone()
        }
    }
}
