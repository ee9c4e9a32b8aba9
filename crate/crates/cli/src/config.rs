//! Run configuration: a preset, overlaid by a TOML file, overlaid by flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use nodule_detect::data::PhantomConfig;
use nodule_detect::{DecoderType, DetectorConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default dataset directory.
pub const CACHE_ENV: &str = "NODULE_DETECT_CACHE";
pub const DEFAULT_DATASET: &str = "data/phantom";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size network on 512 px slices.
    #[default]
    Default,
    /// Small network on 64 px phantoms; trains on one CPU in minutes.
    Micro,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "default" => Ok(Preset::Default),
            "micro" => Ok(Preset::Micro),
            _ => Err(format!("unknown preset {s:?}, expected default or micro")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Default => "default",
            Preset::Micro => "micro",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub phantom: PhantomConfig,
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Default => Self {
                preset,
                phantom: PhantomConfig::default(),
                model: DetectorConfig::default(),
                train: TrainConfig::default(),
                eval: EvalConfig::default(),
                paths: PathsConfig::default(),
            },
            Preset::Micro => Self {
                preset,
                phantom: PhantomConfig {
                    image_size: 64,
                    slices_per_volume: 8,
                    nodules_per_volume: [1, 1],
                    nodule_radius_px: [3.0, 7.0],
                    ..PhantomConfig::default()
                },
                model: DetectorConfig::micro(),
                train: TrainConfig {
                    epochs: 300,
                    learning_rate: 3e-3,
                    lr_after_drop: 3e-4,
                    lr_drop_epoch: 250,
                    ..TrainConfig::default()
                },
                eval: EvalConfig::default(),
                paths: PathsConfig::default(),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the resolved configuration")
    }

    /// Dataset directory: flag, then config, then the cache variable, then the built-in default.
    pub fn dataset_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.dataset.clone())
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATASET))
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub decoder: Option<DecoderType>,
}

/// Resolved configuration and which settings the user chose explicitly.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    /// Decoder given by flag or file rather than taken from the preset.
    pub decoder_explicit: bool,
    /// Any model setting given by flag or file.
    pub model_explicit: bool,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn lookup<'a>(v: &'a toml::Value, path: &[&str]) -> Option<&'a toml::Value> {
    path.iter().try_fold(v, |v, k| v.get(k))
}

pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<Resolved> {
    let user: toml::Value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => toml::Value::Table(Default::default()),
    };
    let file_preset = match lookup(&user, &["preset"]) {
        Some(v) => Some(
            v.as_str()
                .context("preset must be a string")?
                .parse::<Preset>()
                .map_err(anyhow::Error::msg)?,
        ),
        None => None,
    };
    let preset = ov.preset.or(file_preset).unwrap_or_default();
    let mut merged = toml::Value::try_from(RunConfig::preset(preset)).context("serializing preset")?;
    let decoder_in_file = lookup(&user, &["model", "backbone", "decoder_type"]).is_some();
    let model_in_file = lookup(&user, &["model"]).is_some();
    merge(&mut merged, user);
    let mut config: RunConfig = merged.try_into().context("invalid configuration")?;
    config.preset = preset;
    if let Some(seed) = ov.seed {
        config.phantom.seed = seed;
        config.train.seed = seed;
    }
    if let Some(d) = ov.decoder {
        config.model.backbone.decoder_type = d;
    }
    if config.eval.batch_size == 0 {
        bail!("eval.batch_size must be at least 1");
    }
    config.phantom.validate()?;
    config.model.validate()?;
    config.train.validate()?;
    Ok(Resolved {
        config,
        decoder_explicit: decoder_in_file || ov.decoder.is_some(),
        model_explicit: model_in_file || ov.decoder.is_some() || ov.preset.is_some() || file_preset.is_some(),
    })
}
