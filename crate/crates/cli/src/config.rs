//! Flat `key=value` config files with flag override (flags win).

use bspml_core::{Error, Result};
use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

/// Parsed config file: one `key=value` per line, `#` comments allowed.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut values = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "config line {}: expected key=value, got `{line}`",
                    i + 1
                ))
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::config(format!("config key `{key}`: cannot parse `{raw}`"))),
        }
    }
}

/// Flag value if present, else config-file value, else the default.
pub fn resolve<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get(key)?.unwrap_or(default)),
    }
}
