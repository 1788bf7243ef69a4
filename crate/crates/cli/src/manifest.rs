use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::Flat;

/// Everything needed to rerun a command: pass the file back with `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Flat,
    pub seeds: BTreeMap<String, u64>,
    pub backends: BTreeMap<String, String>,
    pub code_version: String,
    pub started_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: Flat) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seeds: BTreeMap::new(),
            backends: BTreeMap::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        log::info!("run manifest at {}", path.display());
        Ok(())
    }
}
