//! Optional TOML config file, seed resolution and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use lasskit::model::ModelConfig;
use lasskit::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const SEED_ENV: &str = "LASSKIT_SEED";

/// File layout:
///
/// ```toml
/// seed = 7
/// jobs = 4
///
/// [model]
/// preset = "tiny"
/// d_query = 8
///
/// [train]
/// learning_rate = 0.002
/// ```
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub train: toml::Table,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Flag, then config file, then `LASSKIT_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file.seed) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub fn model_preset(name: &str) -> Result<ModelConfig, CliError> {
    match name {
        "default" => Ok(ModelConfig::default()),
        "tiny" => Ok(ModelConfig::tiny()),
        "full-scale" => Ok(ModelConfig::full_scale()),
        _ => Err(CliError::Config(format!(
            "unknown model preset {name:?}; valid presets: default, tiny, full-scale"
        ))),
    }
}

/// Overlays `table` on `base` key by key; unknown keys are rejected.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: &toml::Table, section: &str) -> Result<T, CliError> {
    let Value::Object(mut map) = serde_json::to_value(base).map_err(|e| CliError::Config(e.to_string()))? else {
        unreachable!("configs serialize to objects");
    };
    for (k, v) in table {
        if !map.contains_key(k) {
            let keys: Vec<&String> = map.keys().collect();
            return Err(CliError::Config(format!("[{section}] unknown key {k:?}; valid keys: {keys:?}")));
        }
        let v = serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))?;
        map.insert(k.clone(), v);
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(format!("[{section}]: {e}")))
}

/// The `[model]` section over its preset (`preset` key, default "default").
pub fn file_model_config(file: &FileConfig, preset_flag: Option<&str>) -> Result<ModelConfig, CliError> {
    let mut table = file.model.clone();
    let file_preset = table.remove("preset").map(|v| match v {
        toml::Value::String(s) => Ok(s),
        other => Err(CliError::Config(format!("[model] preset must be a string, got {other}"))),
    });
    let preset = match (preset_flag, file_preset) {
        (Some(p), _) => p.to_string(),
        (None, Some(p)) => p?,
        (None, None) => "default".to_string(),
    };
    overlay(&model_preset(&preset)?, &table, "model")
}

pub fn file_train_config(file: &FileConfig) -> Result<TrainConfig, CliError> {
    overlay(&TrainConfig::default(), &file.train, "train")
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: Value,
}

/// Writes `run.json` (or `path` itself when it ends in `.json`).
pub fn write_run_manifest(path: &Path, command: &str, seed: u64, config: Map<String, Value>) -> Result<PathBuf, CliError> {
    let m = RunManifest {
        tool: "lasskit",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv: std::env::args().collect(),
        seed,
        config: Value::Object(config),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Config(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}
