use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_file: Option<PathBuf>,
    /// Keys set on the command line; everything else came from the config
    /// file or defaults.
    pub flag_overrides: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub summary: Value,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
}

pub fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config_file: Option<PathBuf>) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            config_file,
            flag_overrides: Vec::new(),
            config: Value::Null,
            seed: None,
            artifacts: Vec::new(),
            summary: Value::Null,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: timestamp(),
            finished_at: None,
        }
    }

    /// `<output>.manifest.json` beside a file output.
    pub fn path_for_file(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn write(&mut self, path: &Path, finished: bool) -> Result<()> {
        if finished {
            self.finished_at = Some(timestamp());
        }
        let json = serde_json::to_string_pretty(self).map_err(prefnet::Error::from)?;
        prefnet::fsutil::atomic_write(path, json.as_bytes())?;
        Ok(())
    }
}
