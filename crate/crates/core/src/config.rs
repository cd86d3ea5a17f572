//! Flat, serializable run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::losses::{CorrMode, LossConfig, LossWeights};
use crate::model::{FusionMode, ModelConfig};
use crate::optim::AdamWConfig;

/// When a schedule or average advances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    Step,
    Epoch,
}

impl FromStr for Cadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Cadence::Step),
            "epoch" => Ok(Cadence::Epoch),
            other => Err(Error::Config(format!("unknown cadence {other:?}"))),
        }
    }
}

/// Every knob of a run. Together with the dataset, fully determines the
/// outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub seed: u64,

    pub dim_visual: Option<usize>,
    pub dim_audio: Option<usize>,
    pub dim_text: Option<usize>,
    pub hidden_dim: usize,
    pub align_len: usize,
    pub dropout: f64,
    pub fusion: FusionMode,
    pub activation: Activation,
    pub use_vad: bool,
    pub output_sigmoid: bool,

    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub lr_schedule: Cadence,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub ema_update: Cadence,
    pub patience: usize,
    pub shuffle: bool,

    pub lambda_corr: f64,
    pub lambda_aux: f64,
    pub lambda_vad: f64,
    pub lambda_visual: f64,
    pub lambda_audio: f64,
    pub lambda_text: f64,
    pub corr_mode: CorrMode,
    pub pearson_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let adam = AdamWConfig::default();
        TrainConfig {
            manifest: None,
            run_dir: None,
            seed: 0,
            dim_visual: None,
            dim_audio: None,
            dim_text: None,
            hidden_dim: 256,
            align_len: 128,
            dropout: 0.2,
            fusion: FusionMode::Concat,
            activation: Activation::Relu,
            use_vad: true,
            output_sigmoid: true,
            batch_size: 32,
            epochs: 30,
            lr: 1e-4,
            min_lr: 0.0,
            lr_schedule: Cadence::Epoch,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            clip_norm: 1.0,
            ema_decay: 0.999,
            ema_update: Cadence::Step,
            patience: 8,
            shuffle: true,
            lambda_corr: w.corr,
            lambda_aux: w.aux,
            lambda_vad: w.vad,
            lambda_visual: w.visual,
            lambda_audio: w.audio,
            lambda_text: w.text,
            corr_mode: CorrMode::PerDim,
            pearson_eps: crate::losses::PEARSON_EPS,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the compact JSON form, hex encoded. The output location
    /// is not part of the experiment and is left out.
    pub fn hash(&self) -> String {
        let experiment = TrainConfig { run_dir: None, ..self.clone() };
        let bytes = serde_json::to_vec(&experiment).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn feature_dims(&self) -> Result<[usize; 3]> {
        match (self.dim_visual, self.dim_audio, self.dim_text) {
            (Some(v), Some(a), Some(t)) => Ok([v, a, t]),
            _ => Err(Error::Config(
                "feature dims are mandatory: set dim_visual, dim_audio, dim_text".into(),
            )),
        }
    }

    pub fn set_feature_dims(&mut self, dims: [usize; 3]) {
        self.dim_visual = Some(dims[0]);
        self.dim_audio = Some(dims[1]);
        self.dim_text = Some(dims[2]);
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            feature_dims: self.feature_dims()?,
            hidden_dim: self.hidden_dim,
            align_len: self.align_len,
            dropout: self.dropout,
            fusion: self.fusion,
            activation: self.activation,
            use_vad: self.use_vad,
            output_sigmoid: self.output_sigmoid,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            corr: self.lambda_corr,
            aux: self.lambda_aux,
            vad: self.lambda_vad,
            visual: self.lambda_visual,
            audio: self.lambda_audio,
            text: self.lambda_text,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.loss_weights(),
            corr_mode: self.corr_mode,
            pearson_eps: self.pearson_eps,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Checks everything except the paths.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.loss_weights().validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=self.lr).contains(&self.min_lr) {
            return Err(Error::Config(format!(
                "need 0 ≤ min_lr ≤ lr with lr > 0, got lr {} min_lr {}",
                self.lr, self.min_lr
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.pearson_eps > 0.0) {
            return Err(Error::Config("adam_eps and pearson_eps must be > 0, weight_decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// Parses a `v:a:t` dims string such as `64:32:48`.
pub fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Config(format!("dims must look like V:A:T with positive integers, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut dims = [0; 3];
    for (slot, p) in dims.iter_mut().zip(parts) {
        *slot = p.trim().parse().map_err(|_| bad())?;
        if *slot == 0 {
            return Err(bad());
        }
    }
    Ok(dims)
}
