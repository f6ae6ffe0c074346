//! `key=value` run configuration shared by all commands.
//!
//! Values come from an optional file first and are then overridden by
//! command-line flags. The merged result is written next to the outputs so a
//! run can be repeated with `--config <that file>`.

use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("config line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key {key:?}")]
    Unknown { key: String },
    #[error("invalid value {value:?} for {key}")]
    Value { key: String, value: String },
    #[error("missing required setting {0}")]
    Missing(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    allowed: &'static [&'static str],
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(allowed: &'static [&'static str]) -> Self {
        Self {
            allowed,
            values: BTreeMap::new(),
        }
    }

    fn check(&self, key: &str) -> Result<(), ConfigError> {
        if self.allowed.contains(&key) {
            Ok(())
        } else {
            Err(ConfigError::Unknown { key: key.into() })
        }
    }

    /// Merges a config file. `#` starts a comment; blank lines are ignored.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: n + 1 });
            }
            self.check(k)?;
            self.values.insert(k.into(), v.into());
        }
        Ok(())
    }

    /// Applies a flag value when present.
    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<(), ConfigError> {
        self.check(key)?;
        if let Some(v) = value {
            self.values.insert(key.into(), v.to_string());
        }
        Ok(())
    }

    /// Fills `key` only if neither the file nor a flag set it.
    pub fn default(&mut self, key: &str, value: impl ToString) {
        debug_assert!(self.allowed.contains(&key));
        self.values.entry(key.into()).or_insert_with(|| value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::Value {
                key: key.into(),
                value: v.clone(),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &'static str) -> Result<T, ConfigError> {
        self.get(key)?.ok_or(ConfigError::Missing(key))
    }

    /// Comma-separated list; empty when unset.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
