//! Run configuration: one TOML file, environment overrides, then flags.
//!
//! ```toml
//! seed = 0
//! cache_dir = ".plantseg/cache"
//! python = "python3"
//! scripts_dir = "scripts"
//!
//! [datasets]
//! phenobench = "/data/PhenoBench"
//!
//! [encoders.plantnet-dinov2]
//! checkpoint = "/models/plantnet_dinov2.pth"
//!
//! [refiners.sam2]
//! checkpoint = "/models/sam2.1_hiera_large.pt"
//! options = { config = "configs/sam2.1/sam2.1_hiera_l.yaml", device = "cuda" }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use plantseg::encoder::BridgeConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const DEFAULT_CACHE_DIR: &str = ".plantseg/cache";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub python: Option<String>,
    pub scripts_dir: Option<PathBuf>,
    /// Dataset id to root directory.
    pub datasets: BTreeMap<String, PathBuf>,
    pub encoders: BTreeMap<String, BackendConfig>,
    pub refiners: BTreeMap<String, BackendConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub checkpoint: Option<PathBuf>,
    /// Worker command; defaults to the bundled bridge script.
    pub command: Option<Vec<String>>,
    pub options: serde_json::Value,
}

/// Environment variable overriding the checkpoint of a model backend.
pub fn checkpoint_env(backend: &str) -> String {
    format!("PLANTSEG_{}_CHECKPOINT", backend.to_uppercase().replace('-', "_"))
}

/// Environment variable overriding the root of a dataset.
pub fn root_env(dataset: &str) -> String {
    format!("PLANTSEG_{}_ROOT", dataset.to_uppercase().replace('-', "_"))
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", p.display())))?
            }
            None => Config::default(),
        };
        config.apply_env(|k| std::env::var_os(k).map(PathBuf::from));
        Ok(config)
    }

    /// Checkpoint and dataset-root variables win over the file.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<PathBuf>) {
        for (kind, names) in [
            ("encoder", &["plantnet-dinov2", "dinov2-base"][..]),
            ("refiner", &["sam2"][..]),
        ] {
            for name in names {
                if let Some(p) = var(&checkpoint_env(name)) {
                    let table = if kind == "encoder" { &mut self.encoders } else { &mut self.refiners };
                    table.entry(name.to_string()).or_default().checkpoint = Some(p);
                }
            }
        }
        for d in plantseg::datasets::DatasetId::ALL {
            if let Some(p) = var(&root_env(d.as_str())) {
                self.datasets.insert(d.as_str().to_string(), p);
            }
        }
        if let Some(p) = var("PLANTSEG_CACHE_DIR") {
            self.cache_dir = Some(p);
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
    }

    fn scripts_dir(&self) -> PathBuf {
        self.scripts_dir
            .clone()
            .or_else(|| std::env::var_os("PLANTSEG_SCRIPTS_DIR").map(PathBuf::from))
            .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts"))
    }

    /// Launch settings for a bridged backend. A missing checkpoint surfaces
    /// later as a weights error naming the override variable.
    pub fn bridge(&self, kind: &str, backend: &str, script: &str) -> BridgeConfig {
        let table = if kind == "encoder" { &self.encoders } else { &self.refiners };
        let entry = table.get(backend).cloned().unwrap_or_default();
        let command = entry.command.unwrap_or_else(|| {
            vec![
                self.python.clone().unwrap_or_else(|| "python3".into()),
                self.scripts_dir().join(script).display().to_string(),
            ]
        });
        BridgeConfig {
            command,
            checkpoint: entry.checkpoint.unwrap_or_default(),
            env_var: checkpoint_env(backend),
            options: entry.options,
        }
    }
}
