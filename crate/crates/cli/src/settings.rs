//! Flat `key = value` run settings.
//!
//! Values are layered defaults < config file < `--set` pairs < named flags.
//! The `preset` key picks the base model geometry and is resolved before any
//! other key, wherever it appears.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sformer::data::SplitSpec;
use sformer::model::{ModelConfig, Readout};
use sformer::tensor::SelectionRate;
use sformer::train::TrainConfig;
use sformer::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataSettings {
    /// PCA components; `None` keeps every (min-max scaled) band.
    pub pca: Option<usize>,
    pub patch_size: usize,
    pub train_per_class: usize,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSettings {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
}

pub const PRESETS: [&str; 6] = ["tiny", "full", "pavia", "houston", "indian_pines", "honghu"];

fn base_model(preset: &str) -> Result<ModelConfig> {
    match preset {
        "tiny" => Ok(ModelConfig::tiny(8, 4)),
        "full" => Ok(ModelConfig::full(30, 9, SelectionRate::new(0.4)?)),
        other if PRESETS.contains(&other) => ModelConfig::for_dataset(other, 30),
        other => Err(Error::Config(format!("unknown preset '{other}'; expected one of {}", PRESETS.join(", ")))),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("cannot parse '{value}' for key '{key}'")))
}

impl RunSettings {
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = pairs.iter().rev().find(|(k, _)| k == "preset").map_or("tiny", |(_, v)| v.as_str()).to_string();
        let model = base_model(&preset)?;
        let mut s = Self {
            data: DataSettings { pca: None, patch_size: model.patch_size, train_per_class: 50, split_seed: 0 },
            preset,
            model,
            train: TrainConfig::default(),
        };
        if s.preset != "tiny" {
            s.data.pca = Some(s.model.pca_dim);
            s.train = TrainConfig::full_schedule();
        }
        for (k, v) in pairs {
            s.apply(k, v)?;
        }
        s.model.patch_size = s.data.patch_size;
        if let Some(c) = s.data.pca {
            s.model.pca_dim = c;
        }
        s.train.validate()?;
        Ok(s)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "preset" => {}
            "pca" | "pca_dim" => {
                d.pca = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "patch_size" => d.patch_size = parse(key, value)?,
            "train_per_class" => d.train_per_class = parse(key, value)?,
            "split_seed" => d.split_seed = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "transformer_patch" => m.transformer_patch = parse(key, value)?,
            "groups" => m.groups = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "selection_rate" => m.selection_rate = SelectionRate::new(parse(key, value)?)?,
            "stg_count" => m.stg_count = parse(key, value)?,
            "tstb_per_stg" => m.tstb_per_stg = parse(key, value)?,
            "ffn_ratio" => m.ffn_ratio = parse(key, value)?,
            "readout" => m.readout = value.parse::<Readout>()?,
            "learning_rate" | "lr" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "threads" => t.threads = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec { train_per_class: self.data.train_per_class, seed: self.data.split_seed }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let line = line.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then(|| parse_pair(line).map_err(|e| Error::Config(format!("line {}: {e}", i + 1))))
        })
        .collect()
}

pub fn parse_pair(text: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = text.split_once('=').ok_or_else(|| format!("expected key=value, got '{text}'"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(format!("empty key in '{text}'"));
    }
    Ok((k.to_string(), v.to_string()))
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    parse_config_text(&text)
}
