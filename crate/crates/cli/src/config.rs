//! TOML configuration. Every command-line flag has a key here; flags win
//! over the file and the file wins over built-in defaults.

use std::path::{Path, PathBuf};

use prefnet::dataset::{SynthConfig, NUM_FOLDS};
use prefnet::models::ModelConfig;
use prefnet::train::{CvOptions, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Directory of WAV clips.
    pub audio: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub audio_dir: Option<PathBuf>,
    pub log: PathBuf,
    /// Saved pair plan; when absent the plan is built from `audio_dir`.
    pub plan: Option<PathBuf>,
    /// Seed for presentation order when building the plan.
    pub seed: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            audio_dir: None,
            log: PathBuf::from("answers.log"),
            plan: None,
            seed: 0,
        }
    }
}

/// Paths and selectors shared by several commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Main output file or directory.
    pub out: Option<PathBuf>,
    /// 1-based test fold for `train` and `evaluate`.
    pub fold: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
    pub fold_bn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub runs: usize,
    pub base_seed: u64,
    pub jobs: usize,
    /// 1-based test folds; all folds when absent.
    pub folds: Option<Vec<usize>>,
}

impl Default for CvConfig {
    fn default() -> Self {
        let d = CvOptions::default();
        CvConfig { runs: d.runs, base_seed: d.base_seed, jobs: d.jobs, folds: None }
    }
}

impl CvConfig {
    pub fn options(&self) -> Result<CvOptions> {
        let folds = match &self.folds {
            None => None,
            Some(f) => Some(f.iter().map(|&k| fold_index(k)).collect::<Result<Vec<_>>>()?),
        };
        Ok(CvOptions { runs: self.runs, base_seed: self.base_seed, jobs: self.jobs, folds })
    }
}

/// 1-based fold number to 0-based index.
pub fn fold_index(k: usize) -> Result<usize> {
    if (1..=NUM_FOLDS).contains(&k) {
        Ok(k - 1)
    } else {
        Err(CliError::Validation(format!("fold {k} is not in 1..={NUM_FOLDS}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataConfig,
    pub run: RunConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub synth: SynthConfig,
    pub serve: ServeConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }
}

/// Records which keys came from flags while applying them.
#[derive(Debug, Default)]
pub struct Overrides {
    pub keys: Vec<String>,
}

impl Overrides {
    pub fn set<T>(&mut self, slot: &mut T, flag: Option<T>, key: &str) {
        if let Some(v) = flag {
            *slot = v;
            self.keys.push(key.to_string());
        }
    }

    pub fn set_some<T>(&mut self, slot: &mut Option<T>, flag: Option<T>, key: &str) {
        if let Some(v) = flag {
            *slot = Some(v);
            self.keys.push(key.to_string());
        }
    }
}

pub fn require<'a>(value: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a PathBuf> {
    value.as_ref().ok_or_else(|| CliError::Validation(format!("missing {flag} (or `{key}` in the config file)")))
}
