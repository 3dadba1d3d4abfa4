//! Layered configuration: built-in defaults, then an optional JSON config
//! file, then command-line flags.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::CliError;

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces the one below it.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a config file that must hold a JSON object.
pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
    if !value.is_object() {
        return Err(CliError::Config { path: path.to_path_buf(), message: "expected a JSON object".into() });
    }
    Ok(value)
}

/// Builds `defaults` overlaid with the config file (if any) and the flag
/// overrides, then deserializes the result.
pub fn layered<T>(defaults: &T, file: Option<&Path>, flags: Map<String, Value>) -> Result<T, CliError>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut value = serde_json::to_value(defaults).expect("defaults serialize");
    if let Some(path) = file {
        merge(&mut value, read_config_file(path)?);
    }
    merge(&mut value, Value::Object(flags));
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

/// Symbols of an alphabet file: every non-whitespace character, first
/// occurrence order, duplicates dropped.
pub fn read_alphabet(path: &Path) -> Result<Vec<char>, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    let mut out: Vec<char> = Vec::new();
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        if !out.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn later_layers_win_and_objects_merge() {
        let mut base = json!({"a": 1, "m": {"x": 1, "y": 2}});
        merge(&mut base, json!({"m": {"y": 3}, "b": true}));
        assert_eq!(base, json!({"a": 1, "b": true, "m": {"x": 1, "y": 3}}));
    }
}
