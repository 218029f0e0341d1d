use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::synthdata::{AugmentParams, AugmentPolicy};

/// Which two views of a masked patch form the positive pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PositivePair {
    /// Center-masked branch against surrounding-masked branch.
    CenterSurround,
    /// Two independently masked surrounding branches; centers stay visible.
    SurroundSurround,
}

impl PositivePair {
    pub fn name(self) -> &'static str {
        match self {
            PositivePair::CenterSurround => "cs",
            PositivePair::SurroundSurround => "ss",
        }
    }
}

impl fmt::Display for PositivePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PositivePair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cs" => Ok(PositivePair::CenterSurround),
            "ss" => Ok(PositivePair::SurroundSurround),
            _ => Err(Error::invalid_arg(format!("unknown positive pair `{s}` (expected cs or ss)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub augment_params: AugmentParams,
    pub loss: LossKind,
    pub positive_pair: PositivePair,
    /// Average both anchor directions of the contrastive loss.
    pub symmetric: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Random FPS start point per sample and epoch instead of index 0.
    pub random_fps_start: bool,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 32,
            base_lr: 5e-4,
            min_lr: 1e-6,
            weight_decay: 0.05,
            seed: 0,
            augment: AugmentPolicy::ScaleTranslateRotation,
            augment_params: AugmentParams::default(),
            loss: LossKind::Inner,
            positive_pair: PositivePair::CenterSurround,
            symmetric: false,
            grad_clip: 10.0,
            checkpoint_every: 10,
            random_fps_start: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            epochs: 300,
            warmup_epochs: 10,
            batch_size: 128,
            checkpoint_every: 50,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "train.warmup_epochs",
                format!("must be below epochs ({} >= {})", self.warmup_epochs, self.epochs),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::config("train.min_lr", "must lie in [0, lr]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", "must be non-negative"));
        }
        self.augment_params.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(field: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("train.{field}"), format!("cannot parse `{}`", v.trim())))
        }
        fn named<V: FromStr<Err = Error>>(field: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|e: Error| Error::config(format!("train.{field}"), e.to_string()))
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.base_lr = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = named(key, value)?,
            "scale_min" => self.augment_params.scale_min = parse(key, value)?,
            "scale_max" => self.augment_params.scale_max = parse(key, value)?,
            "translate" => self.augment_params.translate = parse(key, value)?,
            "jitter_sigma" => self.augment_params.jitter_sigma = parse(key, value)?,
            "jitter_clip" => self.augment_params.jitter_clip = parse(key, value)?,
            "loss" => self.loss = named(key, value)?,
            "positive_pair" => self.positive_pair = named(key, value)?,
            "symmetric" => self.symmetric = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "random_fps_start" => self.random_fps_start = parse(key, value)?,
            _ => return Err(Error::config(format!("train.{key}"), "unknown key")),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment_params;
        vec![
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.base_lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("augment", self.augment.to_string()),
            ("scale_min", a.scale_min.to_string()),
            ("scale_max", a.scale_max.to_string()),
            ("translate", a.translate.to_string()),
            ("jitter_sigma", a.jitter_sigma.to_string()),
            ("jitter_clip", a.jitter_clip.to_string()),
            ("loss", self.loss.to_string()),
            ("positive_pair", self.positive_pair.to_string()),
            ("symmetric", self.symmetric.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("random_fps_start", self.random_fps_start.to_string()),
        ]
    }
}
