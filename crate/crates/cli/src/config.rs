use std::path::Path;

use anyhow::{bail, Result};
use serde_json::Value;
use tacoformer::trainer::RunConfig;
use tacoformer::Error;

/// Reads the optional JSON config, applies `key=value` overrides and returns
/// the validated effective configuration.
pub fn effective_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Sets a dotted key such as `train.epochs=5`. The value is parsed as JSON and
/// falls back to a plain string, so `arch.fusion=cca` works unquoted.
pub fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`")).into()),
        };
    }
    if slot.is_object() {
        bail!(Error::Config(format!("`{key}` is a section, not a value")));
    }
    *slot = parsed;
    Ok(())
}

pub fn to_json(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string(cfg)?)
}
