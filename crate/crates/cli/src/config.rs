//! `--config` handling: a JSON object of flag values keyed by the flag's
//! snake_case name. Explicit command-line flags take precedence.

use std::path::Path;

use anyhow::{anyhow, Context};
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::failure::Failure;

pub fn load_overrides(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Input)?;
    match serde_json::from_str(&text).map_err(Failure::input)? {
        Value::Object(map) => Ok(map),
        _ => Err(Failure::Input(anyhow!("config {} must be a JSON object", path.display()))),
    }
}

/// Applies overrides to parsed arguments.
pub fn resolve<T: Serialize + DeserializeOwned>(
    args: T,
    overrides: Option<&Map<String, Value>>,
    matches: &ArgMatches,
) -> Result<T, Failure> {
    let Some(overrides) = overrides else { return Ok(args) };
    let Value::Object(mut fields) = serde_json::to_value(&args).map_err(Failure::input)? else {
        unreachable!("argument structs serialize to objects")
    };
    for (key, value) in overrides {
        if !fields.contains_key(key) {
            return Err(Failure::Input(anyhow!("unknown config key '{key}'")));
        }
        let explicit = matches!(matches.value_source(key), Some(ValueSource::CommandLine));
        if !explicit {
            fields.insert(key.clone(), value.clone());
        }
    }
    serde_json::from_value(Value::Object(fields))
        .context("config values have the wrong type")
        .map_err(Failure::Input)
}
