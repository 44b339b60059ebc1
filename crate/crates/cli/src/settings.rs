//! Config file handling shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use neatr_core::config::PipelineConfig;
use neatr_core::dataset::Protocol;
use neatr_core::simulate::SimulationConfig;

/// Marks a failure as a configuration problem (exit status 3).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub verbose: bool,
}

/// The two halves of a config file.
pub struct Loaded {
    pub simulation: Option<SimulationConfig>,
    /// pipeline tables with the `[simulation]` table removed
    pipeline_text: Option<String>,
}

impl Loaded {
    pub fn pipeline(&self, fallback: Protocol) -> Result<PipelineConfig> {
        let cfg = match &self.pipeline_text {
            Some(text) => PipelineConfig::from_toml_or(text, fallback)?,
            None => PipelineConfig::preset(fallback),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load(path: Option<&Path>) -> Result<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded {
            simulation: None,
            pipeline_text: None,
        });
    };
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError(format!("{}: {e}", path.display())))?;
    let simulation = table
        .remove("simulation")
        .map(|v| v.try_into::<SimulationConfig>())
        .transpose()
        .map_err(|e| ConfigError(format!("{} [simulation]: {e}", path.display())))?;
    let rest = toml::to_string(&table).context("re-serializing config")?;
    Ok(Loaded {
        simulation,
        pipeline_text: Some(rest),
    })
}
