//! Configuration layering: built-in defaults, then a TOML file, then flags.
//!
//! A config file holds one table per subcommand, named after it with
//! underscores (`[train_captioner]`, `[train_clip]`, ...). A top-level
//! `seed` applies to every subcommand whose table does not set one.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Recursively overlays `top` onto `base`. Tables merge key by key; any
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

pub fn read_config_file(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(capreward_core::Error::io(path, e)))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::to_value(table).map_err(|e| CliError::Config(e.to_string()))
}

/// Defaults overlaid with the file's `[section]` table.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Value>, section: &str) -> CliResult<T> {
    let mut value = serde_json::to_value(defaults).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(file) = file {
        let mut layer = file.get(section).cloned().unwrap_or(Value::Object(Default::default()));
        if let (Some(seed), Some(obj)) = (file.get("seed"), layer.as_object_mut()) {
            if value.get("seed").is_some() && !obj.contains_key("seed") {
                obj.insert("seed".into(), seed.clone());
            }
        }
        merge(&mut value, layer);
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("[{section}]: {e}")))
}
