//! Run configuration: presets, TOML files, environment overrides.
//!
//! Layers apply in order, later ones winning: the preset (named by
//! `--preset` or a top-level `preset = "..."` key), the config file,
//! `ORTHOSPHERE_*` environment variables, then command-line flags.
//!
//! An environment variable names a key path after the prefix, with `__`
//! between levels: `ORTHOSPHERE_TRAIN__EPOCHS=5` sets `train.epochs`,
//! `ORTHOSPHERE_DATA__CIFAR_DIR=/data/cifar` sets `data.cifar_dir`. Values
//! parse as TOML (`[22, 38]`, `true`, `0.5`) and fall back to plain strings.
//!
//! The top-level `seed` always overwrites `train.seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use orthosphere_core::analysis::{CorrelationMode, DEFAULT_BINS};
use orthosphere_core::data::{PerturbConfig, SynthConfig};
use orthosphere_core::losses::{LossWeights, RAMP_DOWN_EPOCHS, RAMP_UP_EPOCHS};
use orthosphere_core::model::ModelConfig;
use orthosphere_core::train::TrainConfig;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "ORTHOSPHERE_";
pub const PRESETS: [&str; 3] = ["desk-synth", "desk-cifar4", "paper-cifar10"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated in memory.
    Synthetic,
    /// CIFAR-10 binary batches under `cifar_dir`.
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding `data_batch_*.bin` and `test_batch.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cifar_dir: Option<PathBuf>,
    /// Classes kept (CIFAR: labels `0..classes`) or generated.
    pub classes: usize,
    /// Per-class cap on training images; required for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    /// Labeled training images; absent means every label is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled: Option<usize>,
    /// Seed of the synthetic generator; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(default)]
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Defaults to `<out_dir>/model.ckpt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Correlation layer; defaults to the final conv layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    pub correlation_images: usize,
    pub correlation_bins: usize,
    pub correlation_mode: CorrelationMode,
    pub calibration_bins: usize,
    /// Prediction CSV (`label,p0,...`) to calibrate instead of a checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prune_layer: Option<String>,
    pub prune_rates: Vec<f64>,
    /// Images per forward pass.
    pub chunk: usize,
    /// Test-set index of the Grad-CAM image.
    pub gradcam_image: usize,
    /// CIFAR-format file whose first record replaces `gradcam_image`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcam_image_file: Option<PathBuf>,
    /// Defaults to the image's label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcam_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcam_layer: Option<String>,
    /// Prune `prune_layer` at this rate before computing the map.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcam_prune_rate: Option<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            layer: None,
            correlation_images: 1000,
            correlation_bins: 40,
            correlation_mode: CorrelationMode::PerImage,
            calibration_bins: DEFAULT_BINS,
            predictions: None,
            prune_layer: None,
            prune_rates: vec![0.0, 22.0, 38.0, 53.0, 61.0, 69.0, 77.0],
            chunk: 100,
            gradcam_image: 0,
            gradcam_image_file: None,
            gradcam_class: None,
            gradcam_layer: None,
            gradcam_prune_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for analysis; absent means one per core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.analysis.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn data_seed(&self) -> u64 {
        self.data.data_seed.unwrap_or(self.seed)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("serializing config: {e}")))
    }

    /// Checks cross-section consistency; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("data.classes", "need at least two classes"));
        }
        match d.source {
            DataSource::Cifar10 => {
                if d.classes > 10 {
                    return Err(Error::config("data.classes", "CIFAR-10 has ten classes"));
                }
                match &d.cifar_dir {
                    None => return Err(Error::config("data.cifar_dir", "required when data.source = \"cifar10\"")),
                    Some(p) if !p.is_dir() => {
                        return Err(Error::config("data.cifar_dir", format!("{} is not a directory", p.display())))
                    }
                    _ => {}
                }
            }
            DataSource::Synthetic => {
                for (key, v) in [("data.train_per_class", d.train_per_class), ("data.test_per_class", d.test_per_class)]
                {
                    if !matches!(v, Some(n) if n > 0) {
                        return Err(Error::config(key, "required (positive) for synthetic data"));
                    }
                }
            }
        }
        if d.labeled == Some(0) {
            return Err(Error::config("data.labeled", "must be positive"));
        }
        if self.model.classes != d.classes {
            return Err(Error::config(
                "model.classes",
                format!("{} does not match data.classes = {}", self.model.classes, d.classes),
            ));
        }
        self.model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        self.train.validate().map_err(|e| Error::config("train", e.to_string()))?;
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be positive"));
        }
        let a = &self.analysis;
        for (key, layer) in [
            ("analysis.layer", &a.layer),
            ("analysis.prune_layer", &a.prune_layer),
            ("analysis.gradcam_layer", &a.gradcam_layer),
        ] {
            if let Some(l) = layer {
                if self.model.layer_channels(l).is_none() {
                    return Err(Error::config(
                        key,
                        format!("model has no layer {l:?} (layers: {:?})", self.model.layer_names()),
                    ));
                }
            }
        }
        if a.correlation_images == 0 || a.correlation_bins == 0 || a.calibration_bins == 0 || a.chunk == 0 {
            return Err(Error::config("analysis", "image counts, bin counts and chunk must be positive"));
        }
        for &r in a.prune_rates.iter().chain(&a.gradcam_prune_rate) {
            if !(0.0..100.0).contains(&r) {
                return Err(Error::config("analysis.prune_rates", format!("rate {r}% must lie in [0, 100)")));
            }
        }
        Ok(())
    }
}

fn desk_train(epochs: usize, seed: u64, os: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 100,
        base_learning_rate: 0.003,
        ramp_up_epochs: epochs / 3,
        ramp_down_epochs: epochs / 4,
        loss: LossWeights { os, normalize_latent: false, ..LossWeights::default() },
        perturb: PerturbConfig::default(),
        seed,
        ..TrainConfig::default()
    }
}

/// A shipped preset by name.
pub fn preset(name: &str) -> Option<RunConfig> {
    let seed = 0;
    let cfg = match name {
        "desk-synth" => RunConfig {
            seed,
            out_dir: "runs/desk-synth".into(),
            threads: None,
            data: DataConfig {
                source: DataSource::Synthetic,
                cifar_dir: None,
                classes: 4,
                train_per_class: Some(250),
                test_per_class: Some(100),
                labeled: Some(400),
                data_seed: None,
                synth: SynthConfig::default(),
            },
            model: ModelConfig::desk(4),
            train: desk_train(10, seed, LossWeights::default_os_weight(false)),
            analysis: AnalysisConfig { correlation_images: 400, ..AnalysisConfig::default() },
        },
        "desk-cifar4" => RunConfig {
            seed,
            out_dir: "runs/desk-cifar4".into(),
            threads: None,
            data: DataConfig {
                source: DataSource::Cifar10,
                cifar_dir: None,
                classes: 4,
                train_per_class: Some(1000),
                test_per_class: None,
                labeled: Some(1000),
                data_seed: None,
                synth: SynthConfig::hard(),
            },
            model: ModelConfig::desk(4),
            train: desk_train(30, seed, 5e-3),
            analysis: AnalysisConfig::default(),
        },
        "paper-cifar10" => RunConfig {
            seed,
            out_dir: "runs/paper-cifar10".into(),
            threads: None,
            data: DataConfig {
                source: DataSource::Cifar10,
                cifar_dir: None,
                classes: 10,
                train_per_class: None,
                test_per_class: None,
                labeled: Some(4000),
                data_seed: None,
                synth: SynthConfig::default(),
            },
            model: ModelConfig::full(10),
            train: TrainConfig {
                epochs: 300,
                batch_size: 100,
                base_learning_rate: 0.003,
                ramp_up_epochs: RAMP_UP_EPOCHS,
                ramp_down_epochs: RAMP_DOWN_EPOCHS,
                loss: LossWeights::default().with_amc(),
                seed,
                ..TrainConfig::default()
            },
            analysis: AnalysisConfig::default(),
        },
        _ => return None,
    };
    Some(cfg)
}

fn to_table(cfg: &RunConfig) -> Table {
    Table::try_from(cfg).expect("run config serializes to a table")
}

/// Overlays `top` onto `base`, recursing into tables.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as TOML, falling back to a string.
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key path, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &[&str], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::config("", "empty key"))?;
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::config(path[..=i].join("."), "is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Table of the `ORTHOSPHERE_*` entries of `vars`.
pub fn env_table<I, K, V>(vars: I) -> Result<Table>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut sorted: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            k.as_ref().strip_prefix(ENV_PREFIX).map(|rest| (rest.to_lowercase(), v.as_ref().to_string()))
        })
        .collect();
    sorted.sort();
    let mut table = Table::new();
    for (key, raw) in sorted {
        let path: Vec<&str> = key.split("__").collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::config(format!("{ENV_PREFIX}{}", key.to_uppercase()), "malformed key path"));
        }
        set_path(&mut table, &path, parse_value(&raw))?;
    }
    Ok(table)
}

/// Inputs to [`resolve`].
#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub file: Option<PathBuf>,
    pub preset: Option<String>,
    /// Environment table from [`env_table`].
    pub env: Table,
    /// Command-line overrides, applied last.
    pub cli: Table,
}

fn preset_table(name: &str) -> Result<Table> {
    preset(name)
        .map(|c| to_table(&c))
        .ok_or_else(|| Error::config("preset", format!("unknown preset {name:?} (available: {})", PRESETS.join(", "))))
}

/// Builds the fully resolved configuration.
pub fn resolve(src: &Sources) -> Result<RunConfig> {
    let mut file = match &src.file {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    let file_preset = match file.remove("preset") {
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(Error::config("preset", "must be a string")),
        None => None,
    };
    let name = src.preset.clone().or(file_preset);
    let mut table = match &name {
        Some(n) => preset_table(n)?,
        None if src.file.is_some() => Table::new(),
        None => return Err(Error::config("--config", "give a config file or a preset")),
    };
    merge(&mut table, file);
    merge(&mut table, src.env.clone());
    merge(&mut table, src.cli.clone());
    from_table(table)
}

/// Deserializes and validates a merged table, copying `seed` into `train`.
pub fn from_table(mut table: Table) -> Result<RunConfig> {
    if let Some(seed) = table.get("seed").cloned() {
        if let Some(Value::Table(train)) = table.get_mut("train") {
            train.insert("seed".into(), seed);
        }
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let key = e.path().to_string();
        Error::config(if key == "." { String::new() } else { key }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a resolved config written by a previous run.
pub fn load_resolved(path: &Path) -> Result<RunConfig> {
    resolve(&Sources { file: Some(path.to_path_buf()), ..Sources::default() })
}
