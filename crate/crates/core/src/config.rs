//! Run configuration: one JSON document for every subcommand.

use std::path::Path;

use crate::error::{Error, Result};
pub use crate::eval::ExperimentConfig as RunConfig;

/// Parses and validates a configuration document. Schema and validation
/// problems both surface as [`Error::Config`].
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_config(&text)
}

pub fn default_config_json() -> String {
    serde_json::to_string_pretty(&RunConfig::default()).expect("default config serializes") + "\n"
}
