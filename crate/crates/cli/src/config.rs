//! Run configuration: `key = value` text with `[model]`, `[train]`,
//! `[data]`, `[probe]` and `[sweep]` sections.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pointcon::evaluation::ProbeConfig;
use pointcon::model::ModelConfig;
use pointcon::synthdata::DatasetConfig;
use pointcon::training::TrainConfig;
use pointcon::{Error, Result};

pub const RESOLVED_FILE: &str = "config.resolved";

/// Named starting point for the model and training settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config("profile", format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    /// Dataset directory used by training commands.
    pub data_path: Option<PathBuf>,
    pub probe: ProbeConfig,
    /// Pretraining seeds per sweep value.
    pub sweep_seeds: usize,
    /// Explicit sweep values; empty means the knob's default grid.
    pub sweep_values: Vec<String>,
}

impl RunConfig {
    pub fn preset(profile: Profile) -> Self {
        let (model, train) = match profile {
            Profile::Desk => (ModelConfig::desk(), TrainConfig::desk()),
            Profile::Paper => (ModelConfig::paper(), TrainConfig::paper()),
        };
        Self {
            model,
            train,
            data: DatasetConfig::default(),
            data_path: None,
            probe: ProbeConfig::default(),
            sweep_seeds: 3,
            sweep_values: Vec::new(),
        }
    }

    /// Reads only the top-level `profile` key, so the preset can be chosen
    /// before the file's other keys are applied on top of it.
    pub fn file_profile(text: &str) -> Result<Option<Profile>> {
        for line in text.lines().map(strip_comment) {
            if line.starts_with('[') {
                break;
            }
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == "profile" {
                    return v.parse().map(Some);
                }
            }
        }
        Ok(None)
    }

    /// Applies every assignment of a config file.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{}:{}", origin.display(), n + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            self.set(&section, k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match section {
            "" if key == "profile" => value.parse::<Profile>().map(|_| ()),
            "model" => self.model.set(key, value),
            "train" => self.train.set(key, value),
            "probe" => self.probe.set(key, value),
            "data" if key == "path" => {
                self.data_path = Some(PathBuf::from(value));
                Ok(())
            }
            "data" => self.data.set(key, value),
            "sweep" => match key {
                "seeds" => {
                    self.sweep_seeds = value
                        .parse()
                        .map_err(|_| Error::config("sweep.seeds", format!("cannot parse `{value}`")))?;
                    Ok(())
                }
                "values" => {
                    self.sweep_values = value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
                    Ok(())
                }
                _ => Err(Error::config(format!("sweep.{key}"), "unknown key")),
            },
            "" => Err(Error::config(key, "unknown top-level key")),
            _ => Err(Error::config(format!("{section}.{key}"), format!("unknown section `{section}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.probe.validate()?;
        if self.sweep_seeds == 0 {
            return Err(Error::config("sweep.seeds", "must be at least 1"));
        }
        Ok(())
    }

    /// Full text form; reading it back reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, kv: Vec<(&str, String)>| {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        };
        section("model", self.model.to_kv());
        section("train", self.train.to_kv());
        let mut data = self.data.to_kv();
        if let Some(p) = &self.data_path {
            data.insert(0, ("path", p.display().to_string()));
        }
        section("data", data);
        section("probe", self.probe.to_kv());
        section(
            "sweep",
            vec![("seeds", self.sweep_seeds.to_string()), ("values", self.sweep_values.join(","))],
        );
        out
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Resolves preset, then file, then flag overrides `(section, key, value)`.
pub fn resolve(file: Option<&Path>, profile: Option<Profile>, overrides: &[(&str, &str, String)]) -> Result<RunConfig> {
    let text = match file {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let from_file = match &text {
        Some(t) => RunConfig::file_profile(t)?,
        None => None,
    };
    let mut rc = RunConfig::preset(profile.or(from_file).unwrap_or(Profile::Desk));
    if let (Some(t), Some(p)) = (&text, file) {
        rc.apply_text(t, p)?;
    }
    for (section, key, value) in overrides {
        rc.set(section, key, value)?;
    }
    rc.validate()?;
    Ok(rc)
}
