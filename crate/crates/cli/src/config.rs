//! Study configuration files.
//!
//! A config is a TOML table of scenario fields. `preset = "<name>"` starts from
//! a named scenario and the remaining keys override it.

use std::path::Path;

use tweedie_core::simulate::ScenarioConfig;
use tweedie_core::{Result, TweedieError};

pub fn parse(text: &str) -> Result<ScenarioConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| TweedieError::ConfigError(e.to_string()))?;
    let merged = match table.remove("preset") {
        Some(toml::Value::String(name)) => {
            let base = ScenarioConfig::preset(&name)?;
            let mut base_table = toml::Table::try_from(&base)
                .map_err(|e| TweedieError::ConfigError(e.to_string()))?;
            for (k, v) in table {
                base_table.insert(k, v);
            }
            base_table
        }
        Some(other) => {
            return Err(TweedieError::ConfigError(format!(
                "preset must be a string, found {}",
                other.type_str()
            )))
        }
        None => table,
    };
    let config: ScenarioConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| TweedieError::ConfigError(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TweedieError::ConfigError(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        TweedieError::ConfigError(m) => TweedieError::ConfigError(format!("{}: {m}", path.display())),
        other => other,
    })
}
