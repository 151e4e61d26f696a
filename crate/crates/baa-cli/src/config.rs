//! The run configuration: a dataset block plus the training blocks in one
//! TOML file. Every key is optional; omissions take the pipeline defaults.

use std::path::Path;

use anyhow::Context;
use baa::synthworld::DatasetConfig;
use baa::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunFile {
    pub dataset: DatasetConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

pub struct Loaded {
    pub file: RunFile,
    /// As given on the command line; `<defaults>` when omitted.
    pub path: String,
}

/// Deserializes the two config halves separately: `#[serde(flatten)]` would
/// stop serde from rejecting unknown keys.
fn parse(text: &str) -> Result<RunFile, toml::de::Error> {
    let mut table: toml::Table = toml::from_str(text)?;
    let dataset = match table.remove("dataset") {
        Some(v) => v.try_into()?,
        None => DatasetConfig::default(),
    };
    let train = toml::Value::Table(table).try_into()?;
    Ok(RunFile { dataset, train })
}

pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Loaded, Failure> {
    let (mut file, path) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(Failure::io)?;
            let file = parse(&text)
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(Failure::config)?;
            (file, p.display().to_string())
        }
        None => (RunFile::default(), "<defaults>".to_string()),
    };
    if let Some(s) = seed {
        file.train.seed = s;
        file.dataset.seed = s;
    }
    file.dataset.validate().map_err(crate::world_failure)?;
    file.train.validate().map_err(crate::train_failure)?;
    Ok(Loaded { file, path })
}
