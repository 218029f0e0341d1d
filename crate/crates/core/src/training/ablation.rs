use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluation::{mean_std, probe_checkpoint, write_results, ProbeConfig, Protocol, ResultRow};
use crate::geometry::PointCloud;
use crate::model::ModelConfig;

use super::config::TrainConfig;
use super::pretrain::pretrain;

pub const RESULTS_FILE: &str = "results.tsv";

/// The configuration field varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Knob {
    MaskRatio,
    Augment,
    Tau,
    Sharing,
    Loss,
    PositivePair,
}

impl Knob {
    pub const ALL: [Knob; 6] = [
        Knob::MaskRatio,
        Knob::Augment,
        Knob::Tau,
        Knob::Sharing,
        Knob::Loss,
        Knob::PositivePair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Knob::MaskRatio => "mask_ratio",
            Knob::Augment => "augment",
            Knob::Tau => "tau",
            Knob::Sharing => "sharing",
            Knob::Loss => "loss",
            Knob::PositivePair => "positive_pair",
        }
    }

    /// Sweep values used when none are given.
    pub fn default_grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            Knob::MaskRatio => &["0.3", "0.6", "0.9"],
            Knob::Augment => &[
                "none",
                "jitter",
                "scale",
                "rotation",
                "scale_translate",
                "scale_translate_rotation",
                "rotation_scale_translate",
            ],
            Knob::Tau => &["0.05", "0.1", "0.5", "1", "2"],
            Knob::Sharing => &["shared", "non_shared"],
            Knob::Loss => &["inner", "inter", "alignment"],
            Knob::PositivePair => &["cs", "ss"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Sets this knob to `value` in the given configurations.
    pub fn apply(self, value: &str, mc: &mut ModelConfig, tc: &mut TrainConfig) -> Result<()> {
        match self {
            Knob::MaskRatio | Knob::Tau | Knob::Sharing => mc.set(self.name(), value),
            Knob::Augment | Knob::Loss | Knob::PositivePair => tc.set(self.name(), value),
        }
    }
}

impl fmt::Display for Knob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Knob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Knob::ALL.iter().copied().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Knob::ALL.iter().map(|k| k.name()).collect();
            Error::invalid_arg(format!("unknown sweep knob `{s}` (valid: {})", valid.join(", ")))
        })
    }
}

/// One sweep: every value is pretrained once per seed and linearly probed.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub knob: Knob,
    pub values: Vec<String>,
    /// Pretraining seeds per value, offset from `train.seed`.
    pub seeds: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl SweepSpec {
    pub fn new(knob: Knob, model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            knob,
            values: knob.default_grid(),
            seeds: 3,
            model,
            train,
            probe: ProbeConfig::default(),
        }
    }

    /// Configurations of every sweep point, validated up front.
    pub fn points(&self) -> Result<Vec<(String, ModelConfig, TrainConfig)>> {
        if self.values.is_empty() {
            return Err(Error::invalid_arg("sweep has no values"));
        }
        if self.seeds == 0 {
            return Err(Error::invalid_arg("sweep needs at least one seed"));
        }
        self.values
            .iter()
            .map(|v| {
                let (mut mc, mut tc) = (self.model.clone(), self.train.clone());
                self.knob.apply(v, &mut mc, &mut tc)?;
                mc.validate()?;
                tc.validate()?;
                Ok((v.clone(), mc, tc))
            })
            .collect()
    }
}

/// Progress event of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEvent<'a> {
    pub value: &'a str,
    pub seed: u64,
    pub accuracy: f64,
}

/// Runs the sweep and returns one row per value with the probe accuracy
/// mean and spread over pretraining seeds. With `out`, the table is written
/// to `out/results.tsv`.
pub fn run_ablation(
    spec: &SweepSpec,
    train: &[PointCloud],
    test: &[PointCloud],
    out: Option<&Path>,
    progress: &mut dyn FnMut(&SweepEvent),
) -> Result<Vec<ResultRow>> {
    let points = spec.points()?;
    let mut rows = Vec::with_capacity(points.len());
    for (value, mc, tc) in points {
        let mut accs = Vec::with_capacity(spec.seeds);
        for s in 0..spec.seeds as u64 {
            let tc = TrainConfig {
                seed: tc.seed + s,
                ..tc.clone()
            };
            let run = pretrain(&mc, &tc, train, None, &mut |_| {})?;
            let probe = ProbeConfig {
                seed: spec.probe.seed + s,
                ..spec.probe.clone()
            };
            let report = probe_checkpoint(&run.model, &run.store, train, test, Protocol::Linear, &probe)?;
            progress(&SweepEvent {
                value: &value,
                seed: tc.seed,
                accuracy: report.mean,
            });
            accs.push(report.mean);
        }
        let (mean, std) = mean_std(&accs);
        rows.push(ResultRow {
            name: spec.knob.name().to_string(),
            value,
            mean,
            std,
            n: accs.len(),
        });
        if let Some(dir) = out {
            write_results(&dir.join(RESULTS_FILE), &rows)?;
        }
    }
    Ok(rows)
}
