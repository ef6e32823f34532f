//! Plain `key = value` configuration files with `SECDOOD_*` environment
//! overrides. Lines starting with `#` and blank lines are ignored; keys are
//! lowercase with underscores, and `SECDOOD_MAX_SESSIONS` overrides
//! `max_sessions`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const ENV_PREFIX: &str = "SECDOOD_";

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("{path}:{line}: duplicate key {key:?}")]
    Duplicate { path: String, line: usize, key: String },
    #[error("setting {key} = {value:?} ({origin}): {reason}")]
    Invalid {
        key: String,
        value: String,
        origin: String,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, (String, String)>,
}

impl Settings {
    pub fn parse(text: &str, origin: &str) -> Result<Self, SettingsError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(SettingsError::Syntax {
                    path: origin.into(),
                    line: i + 1,
                });
            };
            let key = k.trim().to_ascii_lowercase();
            if key.is_empty() {
                return Err(SettingsError::Syntax {
                    path: origin.into(),
                    line: i + 1,
                });
            }
            let at = format!("{origin}:{}", i + 1);
            if values.insert(key.clone(), (v.trim().to_string(), at)).is_some() {
                return Err(SettingsError::Duplicate {
                    path: origin.into(),
                    line: i + 1,
                    key,
                });
            }
        }
        Ok(Self { values })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SettingsError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SettingsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Optional file, then the process environment on top.
    pub fn load(path: Option<&Path>) -> Result<Self, SettingsError> {
        let base = match path {
            Some(p) => Self::read(p)?,
            None => Self::default(),
        };
        Ok(base.with_env(std::env::vars()))
    }

    pub fn with_env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Self {
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                if !key.is_empty() {
                    self.values.insert(key.to_ascii_lowercase(), (v, format!("env {k}")));
                }
            }
        }
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), (value.to_string(), "command line".into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Parsed value of `key`, or `None` when unset.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, SettingsError>
    where
        T::Err: std::fmt::Display,
    {
        let Some((v, origin)) = self.values.get(key) else { return Ok(None) };
        v.parse().map(Some).map_err(|e: T::Err| SettingsError::Invalid {
            key: key.into(),
            value: v.clone(),
            origin: origin.clone(),
            reason: e.to_string(),
        })
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, SettingsError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }
}
