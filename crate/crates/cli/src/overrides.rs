//! JSON config loading with `dotted.key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Sets `key` (dot-separated path) in `root`, creating objects as needed.
/// The value is parsed as JSON when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty segment");
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let Value::Object(map) = node else {
            bail!("override {key:?}: {part:?} is not inside an object");
        };
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Map::new());
    }
    let Value::Object(map) = node else {
        bail!("override {key:?} does not address an object field");
    };
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads `path` (or starts from the defaults), applies the overrides and
/// deserializes the result.
pub fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: DeserializeOwned + Serialize + Default,
{
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| edgebias::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(edgebias::Error::from)?
        }
        None => serde_json::to_value(T::default())?,
    };
    for o in overrides {
        apply_override(&mut value, o).map_err(|e| edgebias::Error::Config(e.to_string()))?;
    }
    Ok(serde_json::from_value(value).map_err(edgebias::Error::from)?)
}
