use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Whether the two branches run through one encoder+projector or two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sharing {
    Shared,
    NonShared,
}

impl Sharing {
    pub fn name(self) -> &'static str {
        match self {
            Sharing::Shared => "shared",
            Sharing::NonShared => "non_shared",
        }
    }
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Sharing::Shared),
            "non_shared" | "non-shared" => Ok(Sharing::NonShared),
            _ => Err(Error::invalid_arg(format!("unknown sharing mode `{s}` (expected shared or non_shared)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patches per cloud (N).
    pub n_patches: usize,
    /// Points per patch (k).
    pub k: usize,
    pub mask_ratio: f64,
    pub tau: f64,
    pub drop_path: f64,
    pub proj_hidden: usize,
    pub sharing: Sharing,
}

impl ModelConfig {
    /// CPU-sized profile used by default.
    pub fn desk() -> Self {
        Self {
            depth: 4,
            dim: 96,
            heads: 4,
            mlp_ratio: 4,
            n_patches: 32,
            k: 16,
            mask_ratio: 0.6,
            tau: 1.0,
            drop_path: 0.1,
            proj_hidden: 96,
            sharing: Sharing::Shared,
        }
    }

    /// Full-size architecture.
    pub fn paper() -> Self {
        Self {
            depth: 12,
            dim: 384,
            heads: 6,
            n_patches: 64,
            k: 32,
            proj_hidden: 384,
            ..Self::desk()
        }
    }

    /// Tiny configuration for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            n_patches: 8,
            k: 4,
            mask_ratio: 0.5,
            tau: 1.0,
            drop_path: 0.0,
            proj_hidden: 8,
            sharing: Sharing::Shared,
        }
    }

    /// Number of masked patches, `round(r·N)` clamped to `[1, N−1]`.
    pub fn mask_count(&self) -> usize {
        mask_count(self.n_patches, self.mask_ratio)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    /// Hidden width of the first PointNet stage, `⌈D/3⌉`.
    pub fn pointnet_hidden(&self) -> usize {
        self.dim.div_ceil(3)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.depth", self.depth, 0),
            ("model.dim", self.dim, 1),
            ("model.heads", self.heads, 1),
            ("model.mlp_ratio", self.mlp_ratio, 1),
            ("model.n_patches", self.n_patches, 2),
            ("model.k", self.k, 1),
            ("model.proj_hidden", self.proj_hidden, 1),
        ];
        for (field, value, min) in positive {
            if value < min {
                return Err(Error::config(field, format!("must be at least {min}, got {value}")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("dim {} is not divisible by heads {}", self.dim, self.heads),
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("model.mask_ratio", format!("must lie in (0, 1), got {}", self.mask_ratio)));
        }
        let m = (self.mask_ratio * self.n_patches as f64).round();
        if m < 1.0 || m > (self.n_patches - 1) as f64 {
            return Err(Error::config(
                "model.mask_ratio",
                format!("round(r·N) = {m} must lie in [1, {}]", self.n_patches - 1),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("model.tau", format!("must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("model.drop_path", format!("must lie in [0, 1), got {}", self.drop_path)));
        }
        Ok(())
    }

    /// Sets one field from its textual key (keys as in [`to_kv`](Self::to_kv)).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(field: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("model.{field}"), format!("cannot parse `{v}`")))
        }
        match key {
            "depth" => self.depth = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "n_patches" => self.n_patches = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "drop_path" => self.drop_path = num(key, value)?,
            "proj_hidden" => self.proj_hidden = num(key, value)?,
            "sharing" => {
                self.sharing = value
                    .trim()
                    .parse()
                    .map_err(|e: Error| Error::config("model.sharing", e.to_string()))?
            }
            _ => return Err(Error::config(format!("model.{key}"), "unknown key")),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("depth", self.depth.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("n_patches", self.n_patches.to_string()),
            ("k", self.k.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("tau", self.tau.to_string()),
            ("drop_path", self.drop_path.to_string()),
            ("proj_hidden", self.proj_hidden.to_string()),
            ("sharing", self.sharing.to_string()),
        ]
    }

    /// `key=value` lines, the checkpoint metadata format.
    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::desk();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config("model", format!("expected key=value, got `{line}`")))?;
            config.set(k.trim(), v)?;
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn mask_count(n: usize, ratio: f64) -> usize {
    let m = (ratio * n as f64).round() as usize;
    m.clamp(1, n.saturating_sub(1).max(1))
}
