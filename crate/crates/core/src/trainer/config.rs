use std::f64::consts::PI;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, BlobConfig, Dataset};
use crate::error::{Error, Result};
use crate::transformer::{BlockStyle, ModelSpec, StageSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Blobs,
    Idx,
}

/// Everything a training run depends on. Serialised as one flat JSON object;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs trained with merging disabled.
    pub t_warm: usize,
    pub batch_size: usize,
    pub seed: u64,

    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    /// Epochs of linear ramp from `lr_start` to `lr_peak`; cosine decay to
    /// `lr_end` follows.
    pub lr_warmup: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,

    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub tau: f64,
    pub eta: f64,
    pub positional: bool,
    pub stages: Vec<StageSpec>,

    /// Cap on the samples used for per-epoch clustering.
    pub kmeans_samples: usize,

    pub data: DataKind,
    pub blob_size: usize,
    pub blob_classes: usize,
    pub blob_sigma: f64,
    pub blob_train_per_class: usize,
    pub blob_test_per_class: usize,
    pub data_seed: u64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,

    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            t_warm: 20,
            batch_size: 32,
            seed: 0,
            lr_start: 0.001,
            lr_peak: 0.01,
            lr_end: 0.001,
            lr_warmup: 5,
            optimizer: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            momentum: 0.0,
            dim: 32,
            heads: 1,
            mlp_ratio: 4,
            patch: 4,
            tau: 0.5,
            eta: 1.0,
            positional: true,
            stages: vec![StageSpec {
                depth: 2,
                style: BlockStyle::Regular,
                ratio: 0.5,
            }],
            kmeans_samples: 2048,
            data: DataKind::Blobs,
            blob_size: 16,
            blob_classes: 3,
            blob_sigma: 0.1,
            blob_train_per_class: 100,
            blob_test_per_class: 50,
            data_seed: 0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            checkpoint: None,
            report: None,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule: 300 epochs, 100 warm-up, batch 1024,
    /// 2e-4 → 2e-3 → 2e-4.
    pub fn full_scale_schedule(mut self) -> Self {
        self.epochs = 300;
        self.t_warm = 100;
        self.batch_size = 1024;
        self.lr_start = 2e-4;
        self.lr_peak = 2e-3;
        self.lr_end = 2e-4;
        self
    }

    /// Same run with every stage at `ratio`.
    pub fn with_ratio(mut self, ratio: f64) -> Self {
        for s in &mut self.stages {
            s.ratio = ratio;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("train config: {m}")));
        if self.epochs == 0 || self.t_warm > self.epochs {
            return bad("need epochs >= 1 and t_warm <= epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        let lrs = [self.lr_start, self.lr_peak, self.lr_end];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps be positive");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)");
        }
        if self.kmeans_samples == 0 {
            return bad("kmeans_samples must be positive");
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_warmup {
            return self.lr_start + (self.lr_peak - self.lr_start) * epoch as f64 / self.lr_warmup as f64;
        }
        let span = self.epochs.saturating_sub(self.lr_warmup).max(1);
        let t = ((epoch - self.lr_warmup) as f64 / span as f64).min(1.0);
        self.lr_end + 0.5 * (self.lr_peak - self.lr_end) * (1.0 + (PI * t).cos())
    }

    pub fn model_spec(&self, data: &Dataset) -> Result<ModelSpec> {
        let spec = ModelSpec {
            image_height: data.height(),
            image_width: data.width(),
            channels: 1,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            classes: data.classes,
            tau: self.tau,
            eta: self.eta,
            positional: self.positional,
            stages: self.stages.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn blob_config(&self) -> BlobConfig {
        BlobConfig {
            height: self.blob_size,
            width: self.blob_size,
            classes: self.blob_classes,
            sigma: self.blob_sigma,
            seed: self.data_seed,
        }
    }

    /// Training set and, when configured, the test set.
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        match self.data {
            DataKind::Blobs => {
                let cfg = self.blob_config();
                let train = cfg.generate(self.blob_train_per_class, 0)?;
                let test = (self.blob_test_per_class > 0)
                    .then(|| cfg.generate(self.blob_test_per_class, 1))
                    .transpose()?;
                Ok((train, test))
            }
            DataKind::Idx => {
                let (Some(ti), Some(tl)) = (&self.train_images, &self.train_labels) else {
                    return Err(Error::invalid("idx data needs train_images and train_labels"));
                };
                let train = load_idx(ti, tl, None)?;
                let test = match (&self.test_images, &self.test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l, Some(train.classes))?),
                    (None, None) => None,
                    _ => return Err(Error::invalid("test_images and test_labels go together")),
                };
                Ok((train, test))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert!((c.lr_at(0) - 0.001).abs() < 1e-15);
        assert!((c.lr_at(5) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(60) - 0.001).abs() < 1e-15);
        let lrs: Vec<f64> = (5..=60).map(|e| c.lr_at(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn json_is_flat_and_strict() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "t_warm": 1, "optimizer": "sgd"}"#).unwrap();
        assert_eq!((c.epochs, c.t_warm, c.optimizer), (3, 1, OptimizerKind::Sgd));
        assert_eq!(c.batch_size, 32);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            t_warm: 61,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            t_warm: 60,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_scale_schedule_values() {
        let c = TrainConfig::default().full_scale_schedule();
        assert_eq!((c.epochs, c.t_warm, c.batch_size), (300, 100, 1024));
        assert_eq!(c.eta, 1.0);
    }
}
